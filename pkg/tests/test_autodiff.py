"""Gradient and semantics checks for the autodiff core.

Every differentiable op is validated against central finite differences
in float64.  Tolerances are tight (1e-6 relative) because the oracle and
the op share no code.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctbg import autodiff as ad
from oracles import fd_grad, rel_err, bilinear_reference

F64 = np.float64


def check_against_fd(build, arrays, tol=1e-6):
    """build(tensors) -> scalar Tensor; compares grads to finite differences."""
    with ad.using_dtype(F64):
        tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
        loss = build(*tensors)
        grads = ad.grad(loss, tensors)
        for t in tensors:
            # fd_grad perturbs t.data in place; rebuild from the shared arrays
            num = fd_grad(lambda: build(*[ad.Tensor(x.data) for x in tensors]).data, t.data)
            err = rel_err(grads[t], num)
            assert err < tol, f"gradient mismatch {err:.2e} for shape {t.shape}"


def rnd(*shape, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=shape).astype(F64) * scale


class TestElementwise:
    def test_add_broadcast(self):
        check_against_fd(lambda a, b: ad.add(a, b).sum(), [rnd(3, 4), rnd(4, seed=1)])

    def test_sub_broadcast(self):
        check_against_fd(lambda a, b: ad.sub(a, b).sum(), [rnd(2, 3, 4), rnd(1, 4, seed=1)])

    def test_mul_broadcast(self):
        check_against_fd(lambda a, b: ad.mul(a, b).sum(), [rnd(5, 1, 3), rnd(4, 3, seed=1)])

    def test_mul_constant(self):
        check_against_fd(lambda a: ad.mul(a, np.arange(4.0)).sum(), [rnd(2, 4)])

    def test_relu(self):
        x = rnd(6, 6, seed=3)
        x[np.abs(x) < 0.05] += 0.2  # keep clear of the kink
        check_against_fd(lambda a: a.relu().mean(), [x])

    def test_chained_reuse(self):
        # diamond: same tensor feeds two paths; grads must sum
        check_against_fd(lambda a: (ad.mul(a, a).sum() + a.sum()), [rnd(3, 3)])


class TestMatmul:
    def test_2d(self):
        check_against_fd(lambda a, b: ad.matmul(a, b).sum(), [rnd(3, 4), rnd(4, 5, seed=1)])

    def test_batched_equal_leading(self):
        check_against_fd(
            lambda a, b: ad.matmul(a, b).sum(), [rnd(2, 3, 4), rnd(2, 4, 5, seed=1)]
        )

    def test_broadcast_leading(self):
        # [H, m, t, C] @ [H, 1, C, d]: the right side broadcasts over m
        check_against_fd(
            lambda a, b: ad.matmul(a, b).sum(), [rnd(2, 3, 5, 4), rnd(2, 1, 4, 6, seed=1)]
        )

    def test_affine_matches_unfused(self):
        x, w, b = rnd(4, 3), rnd(3, 5, seed=1), rnd(5, seed=2)
        check_against_fd(lambda x, w, b: ad.affine(x, w, b).sum(), [x, w, b])
        with ad.using_dtype(F64):
            fused = ad.affine(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b))
            plain = ad.add(ad.matmul(ad.Tensor(x), ad.Tensor(w)), ad.Tensor(b))
            np.testing.assert_allclose(fused.data, plain.data, rtol=1e-12)


class TestShapes:
    def test_reshape_transpose(self):
        check_against_fd(
            lambda a: ad.transpose(ad.reshape(a, (4, 6)), (1, 0)).mean(), [rnd(2, 3, 4)]
        )

    def test_index_axis(self):
        check_against_fd(lambda a: ad.index_axis(a, 1, axis=1).sum(), [rnd(2, 3, 4)])

    def test_concat(self):
        check_against_fd(
            lambda a, b: ad.concat([a, b], axis=1).sum(), [rnd(3, 2), rnd(3, 4, seed=1)]
        )

    def test_stack(self):
        check_against_fd(
            lambda a, b: ad.stack([a, b], axis=0).mean(), [rnd(3, 2), rnd(3, 2, seed=1)]
        )

    def test_gather_rows_duplicates(self):
        check_against_fd(lambda a: ad.gather_rows(a, [0, 2, 2, 1]).sum(), [rnd(4, 3)])

    def test_sum_axes(self):
        check_against_fd(lambda a: a.sum(axis=(0, 2)).sum(), [rnd(2, 3, 4)])

    def test_mean_axis_keepdims(self):
        check_against_fd(lambda a: a.mean(axis=1, keepdims=True).sum(), [rnd(3, 5)])


class TestSoftmaxFamily:
    def test_softmax_fd(self):
        check_against_fd(
            lambda a: ad.mul(ad.softmax(a, axis=-1), np.arange(5.0)).sum(), [rnd(4, 5)]
        )

    def test_masked_softmax_exact_zero(self):
        mask = np.zeros((3, 3))
        mask[0, 1] = -np.inf
        mask[2, :] = -np.inf
        s = ad.softmax(ad.Tensor(rnd(3, 3), requires_grad=True), axis=-1, mask=mask)
        assert s.data[0, 1] == 0.0
        assert np.all(s.data[2] == 0.0)
        np.testing.assert_allclose(s.data[:2].sum(axis=-1), [1.0, 1.0], rtol=1e-6)

    def test_masked_softmax_fd(self):
        mask = np.zeros((4, 5))
        mask[1, 2] = -np.inf
        mask[3, 0] = -np.inf
        coeff = rnd(4, 5, seed=7)
        check_against_fd(
            lambda a: ad.mul(ad.softmax(a, axis=-1, mask=mask), coeff).sum(), [rnd(4, 5)]
        )

    def test_masked_softmax_zero_grad_flow(self):
        mask = np.zeros((1, 4))
        mask[0, 2] = -np.inf
        with ad.using_dtype(F64):
            x = ad.Tensor(rnd(1, 4), requires_grad=True)
            loss = ad.mul(ad.softmax(x, mask=mask), rnd(1, 4, seed=5)).sum()
            g = ad.grad(loss, [x])[x]
        assert g[0, 2] == 0.0

    def test_log_softmax_fd(self):
        coeff = rnd(3, 4, seed=9)
        check_against_fd(lambda a: ad.mul(ad.log_softmax(a), coeff).sum(), [rnd(3, 4)])

    def test_cross_entropy_value(self):
        # uniform logits over k classes -> ln k
        logits = ad.Tensor(np.zeros((2, 3)), dtype=F64)
        labels = np.array([0, 2])
        loss = ad.softmax_cross_entropy(logits, labels)
        assert abs(loss.item() - np.log(3.0)) < 1e-12

    def test_cross_entropy_fd(self):
        labels = np.array([1, 0, 3, 2])
        check_against_fd(lambda a: ad.softmax_cross_entropy(a, labels), [rnd(4, 4)])

    def test_cross_entropy_with_neg_inf(self):
        z = rnd(3, 4, seed=2)
        masked = z.copy()
        masked[:, 1] = -np.inf
        labels = np.array([0, 2, 3])
        with ad.using_dtype(F64):
            t = ad.Tensor(masked, requires_grad=True)
            loss = ad.softmax_cross_entropy(t, labels)
            g = ad.grad(loss, [t])[t]
        assert np.all(g[:, 1] == 0.0)
        # matches dropping the masked column entirely
        keep = z[:, [0, 2, 3]]
        remap = np.array([0, 1, 2])
        ref = ad.softmax_cross_entropy(ad.Tensor(keep, dtype=F64), remap)
        assert abs(loss.item() - ref.item()) < 1e-12

    def test_cross_entropy_label_on_masked_column(self):
        z = np.zeros((1, 3))
        z[0, 1] = -np.inf
        with pytest.raises(ad.AutodiffError):
            ad.softmax_cross_entropy(ad.Tensor(z, dtype=F64), np.array([1]))

    def test_bce_known_value(self):
        # logit 0 vs target 1 -> ln 2
        loss = ad.bce_with_logits(ad.Tensor(np.zeros(4), dtype=F64), np.ones(4))
        assert abs(loss.item() - np.log(2.0)) < 1e-12

    def test_bce_fd(self):
        targets = np.array([1.0, 0.0, 0.0, 1.0, 1.0])
        check_against_fd(lambda a: ad.bce_with_logits(a, targets), [rnd(5, scale=2.0)])

    def test_bce_extreme_logits_stable(self):
        z = ad.Tensor(np.array([60.0, -60.0]), dtype=F64)
        loss = ad.bce_with_logits(z, np.array([0.0, 1.0]))
        assert np.isfinite(loss.item()) and loss.item() > 10.0


class TestLayerNorm:
    def test_fd(self):
        check_against_fd(
            lambda x, g, b: ad.mul(ad.layer_norm(x, g, b), rnd(4, 6, seed=11)).sum(),
            [rnd(4, 6), rnd(6, seed=1, scale=0.5) + 1.0, rnd(6, seed=2, scale=0.1)],
        )

    def test_normalizes(self):
        x = ad.Tensor(rnd(5, 8, scale=3.0) + 2.0, dtype=F64)
        ones = ad.Tensor(np.ones(8), dtype=F64)
        zeros = ad.Tensor(np.zeros(8), dtype=F64)
        out = ad.layer_norm(x, ones, zeros).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)


class TestBilinear:
    def test_exact_pixel(self):
        m = rnd(3, 5, 7, seed=4)
        out = ad.bilinear_sample(m, np.array([[2.0, 3.0]], dtype=F64))
        np.testing.assert_allclose(out.data[0], m[:, 3, 2], rtol=1e-12)

    def test_center_of_four(self):
        m = rnd(2, 4, 4, seed=5)
        out = ad.bilinear_sample(m, np.array([[1.5, 2.5]], dtype=F64))
        ref = m[:, 2:4, 1:3].mean(axis=(1, 2))
        np.testing.assert_allclose(out.data[0], ref, rtol=1e-10)

    def test_outside_zero(self):
        m = rnd(2, 4, 4, seed=6)
        pts = np.array([[-2.0, 1.0], [1.0, 7.5], [-1.01, -1.01]], dtype=F64)
        out = ad.bilinear_sample(m, pts)
        assert np.all(out.data == 0.0)

    def test_matches_scalar_reference(self):
        m = rnd(3, 6, 5, seed=7)
        rng = np.random.default_rng(8)
        pts = rng.uniform(-1.5, 6.5, size=(40, 2))
        out = ad.bilinear_sample(m, pts).data
        for k in range(40):
            ref = bilinear_reference(m, pts[k, 0], pts[k, 1])
            np.testing.assert_allclose(out[k], ref, atol=1e-10)

    def test_fd_wrt_points(self):
        m = rnd(2, 6, 6, seed=9)
        rng = np.random.default_rng(10)
        pts = rng.uniform(0.3, 4.6, size=(5, 2))
        pts = np.where(np.abs(pts - np.round(pts)) < 0.05, pts + 0.1, pts)
        coeff = rnd(5, 2, seed=11)
        check_against_fd(
            lambda p: ad.mul(ad.bilinear_sample(m, p), coeff).sum(), [pts]
        )

    def test_fd_wrt_map(self):
        rng = np.random.default_rng(12)
        pts = rng.uniform(-0.4, 4.4, size=(7, 2))
        coeff = rnd(7, 2, seed=13)
        check_against_fd(
            lambda m: ad.mul(ad.bilinear_sample(m, pts), coeff).sum(), [rnd(2, 4, 5, seed=14)]
        )

    def test_constant_path_agrees(self):
        m = rnd(4, 8, 8, seed=15)
        rng = np.random.default_rng(16)
        pts = rng.uniform(-1.0, 8.5, size=(3, 6, 2))
        np.testing.assert_allclose(
            ad.sample_levels(m, pts), ad.bilinear_sample(m, pts).data, atol=1e-12
        )


class TestTapeMechanics:
    def test_no_grad_blocks_taping(self):
        x = ad.Tensor(rnd(2, 2), requires_grad=True)
        with ad.no_grad():
            y = ad.mul(x, x).sum()
        assert not y.requires_grad and y._backward is None

    def test_backward_requires_scalar(self):
        x = ad.Tensor(rnd(2, 2), requires_grad=True)
        with pytest.raises(ad.AutodiffError):
            ad.backward(ad.mul(x, 2.0))

    def test_grad_unreached_param_is_zero(self):
        x = ad.Tensor(rnd(2,), requires_grad=True)
        unused = ad.Tensor(rnd(3,), requires_grad=True)
        g = ad.grad(x.sum(), [x, unused])
        assert np.all(g[unused] == 0.0)

    def test_nan_loss_raises(self):
        x = ad.Tensor(np.array(np.nan), requires_grad=True)
        with pytest.raises(ad.GradientNaNError):
            ad.grad(x.sum(), [x])

    def test_dtype_context(self):
        assert ad.default_dtype() is np.float32
        with ad.using_dtype(np.float64):
            assert ad.Tensor(1.0).dtype == np.float64
        assert ad.Tensor(1.0).dtype == np.float32

    def test_deep_chain_iterative_topo(self):
        # would blow the recursion limit with a recursive topo sort
        with ad.using_dtype(F64):
            x = ad.Tensor(np.ones(4), requires_grad=True)
            y = x
            for _ in range(5000):
                y = ad.mul(y, 1.0001)
            g = ad.grad(y.sum(), [x])[x]
        np.testing.assert_allclose(g, 1.0001 ** 5000, rtol=1e-9)


@settings(max_examples=60, deadline=None)
@given(
    rows=st.integers(1, 5),
    cols=st.integers(2, 6),
    seed=st.integers(0, 10_000),
)
def test_softmax_rows_are_distributions(rows, cols, seed):
    rng = np.random.default_rng(seed)
    x = ad.Tensor(rng.normal(size=(rows, cols)) * 3.0, dtype=F64)
    mask = np.where(rng.random((rows, cols)) < 0.3, -np.inf, 0.0)
    mask[:, 0] = 0.0  # keep every row feasible
    s = ad.softmax(x, axis=-1, mask=mask).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(s[np.isneginf(mask)] == 0.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_unbroadcast_matches_fd_on_random_broadcast_add(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 4, size=rng.integers(1, 4)))
    # drop leading axes and squash random dims to 1 for the second operand
    k = rng.integers(0, len(shape) + 1)
    bshape = tuple(s if rng.random() < 0.7 else 1 for s in shape[k:])
    a = rng.normal(size=shape)
    b = rng.normal(size=bshape) if bshape else rng.normal()
    coeff = rng.normal(size=np.broadcast_shapes(shape, bshape or ()))
    check_against_fd(lambda x, y: ad.mul(ad.add(x, y), coeff).sum(), [a, np.atleast_1d(b)])
