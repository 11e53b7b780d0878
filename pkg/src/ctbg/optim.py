"""Adam with decoupled weight decay and linear warmup."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Adam:
    """Adam over a fixed parameter list; decay multiplies weights directly.

    The decoupled decay step is ``p *= 1 - lr_t * weight_decay`` so decay
    strength tracks the scheduled learning rate but never touches the
    moment estimates.
    """

    def __init__(
        self,
        params: list[Tensor],
        lr: float = 5e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-2,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: dict[Tensor, np.ndarray], lr: float | None = None) -> None:
        """One update from a grad dict (as produced by ``autodiff.grad``)."""
        lr_t = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = grads[p]
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            if self.weight_decay:
                p.data *= 1.0 - lr_t * self.weight_decay
            p.data -= lr_t * (mhat / (np.sqrt(vhat) + self.eps))


def warmup_lr(base_lr: float, iteration: int, warmup_iters: int) -> float:
    """Linear ramp from 0 over ``warmup_iters`` steps, flat afterwards.

    ``iteration`` is 0-based; the first step runs at 0 when warmup is on.
    """
    if warmup_iters <= 0 or iteration >= warmup_iters:
        return base_lr
    return base_lr * (iteration / warmup_iters)
