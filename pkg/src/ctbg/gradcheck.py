"""Finite-difference verification of whole-model gradients.

Central differences in float64 against the reverse-mode gradient of the
full per-scene loss, element by element over every parameter.  The error
measure is |analytic - numeric| / max(1, |analytic|, |numeric|), so tiny
gradients are judged on absolute error and large ones on relative error.

The forward pass makes a few hard selections (initial proposal top-k,
bilinear corner choice), so a perturbation that crosses one of those
boundaries would invalidate the comparison.  ``run_micro_check`` screens
candidate seeds until the selections sit comfortably away from every
boundary, then checks all parameters.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .losses import scene_loss
from .model import ModelConfig, RelationTransformer
from .synth import DifficultyConfig, Scene, generate_scene

DEFAULT_STEP = 1e-4
DEFAULT_TOL = 1e-5

MICRO_MODEL = ModelConfig(dim=8, heads=2, ffn_dim=16, layers=1, raster_base=32)
MICRO_DATA = DifficultyConfig(block_count=(1, 1), units_per_block=(3, 3))


@dataclass
class ParamCheck:
    name: str
    n_elements: int
    max_err: float
    worst_index: int


@dataclass
class GradCheckReport:
    checks: list[ParamCheck]
    max_err: float
    tol: float
    n_parameters: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_err <= self.tol

    def failures(self) -> list[ParamCheck]:
        return [c for c in self.checks if c.max_err > self.tol]


def elementwise_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / scale


def check_gradients(
    model: RelationTransformer,
    scene: Scene,
    h: float = DEFAULT_STEP,
    tol: float = DEFAULT_TOL,
) -> GradCheckReport:
    """Compare reverse-mode gradients to central differences, all elements."""
    started = time.perf_counter()
    succ = scene.successors()

    def loss_value() -> float:
        with ad.no_grad():
            total, _ = scene_loss(model.forward_scene(scene), succ)
        return float(total.data)

    total, _ = scene_loss(model.forward_scene(scene), succ)
    grads = ad.grad(total, model.parameters())

    checks: list[ParamCheck] = []
    for name, p in model.named_parameters():
        analytic = grads[p].ravel()
        numeric = np.empty_like(analytic)
        flat = p.data.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss_value()
            flat[i] = keep - h
            down = loss_value()
            flat[i] = keep
            numeric[i] = (up - down) / (2.0 * h)
        err = elementwise_error(analytic, numeric)
        worst = int(np.argmax(err)) if err.size else 0
        checks.append(ParamCheck(name, flat.size, float(err.max(initial=0.0)), worst))

    max_err = max((c.max_err for c in checks), default=0.0)
    n_params = sum(c.n_elements for c in checks)
    return GradCheckReport(checks, max_err, tol, n_params, time.perf_counter() - started)


def _selection_margins(model: RelationTransformer, scene: Scene) -> float:
    """Smallest distance from any hard selection to its decision boundary.

    Two selection mechanisms matter: the top-k cut in the initial relation
    scores (margin = score gap across the cut) and the bilinear corner
    choice (margin = fractional distance of each sampling coordinate from
    the pixel lattice).  Both are returned on their own scale; the caller
    just needs them to dwarf the finite-difference step.
    """
    with ad.no_grad():
        res = model.forward_scene(scene)
    margin = np.inf

    n = scene.n_units
    k = model.cfg.top_k
    s0 = res.relation_scores[0].data
    for src in range(n):
        row = np.delete(s0[src, :n], src)
        if row.size > k:
            srt = np.sort(row)[::-1]
            margin = min(margin, float(srt[k - 1] - srt[k]))

    from .graph import centers_sizes

    centers, _ = centers_sizes(scene.units)
    points = [centers]
    if res.state.edge_centers is not None and len(res.state.edge_centers):
        points.append(res.state.edge_centers)
    for level in range(model.cfg.levels):
        side = model.cfg.raster_base >> level
        for pts in points:
            px = pts * side - 0.5
            frac = np.abs(px - np.round(px))
            margin = min(margin, float(frac.min(initial=np.inf)))
    return margin


def build_micro(seed: int) -> tuple[RelationTransformer, Scene]:
    model = RelationTransformer(MICRO_MODEL, np.random.default_rng(seed))
    scene = generate_scene(seed, MICRO_DATA)
    return model, scene


def run_micro_check(
    h: float = DEFAULT_STEP,
    tol: float = DEFAULT_TOL,
    min_margin: float = 5e-3,
    max_seed_tries: int = 64,
) -> GradCheckReport:
    """Full-model finite-difference check on a small fixed configuration."""
    with ad.using_dtype(np.float64):
        for seed in range(max_seed_tries):
            model, scene = build_micro(seed)
            if _selection_margins(model, scene) >= min_margin:
                return check_gradients(model, scene, h=h, tol=tol)
    raise RuntimeError(
        f"no seed in range({max_seed_tries}) kept selections {min_margin} clear of boundaries"
    )
