"""Synthetic document scenes: blocks of text-unit boxes with reading order.

A scene is a set of axis-aligned unit boxes in the [0,1] frame plus the
ground-truth partition into ordered blocks.  Blocks are built as rows of
adjacent units (left to right, wrapping top to bottom), so the reading
order matches visual layout the way real line detectors see it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import default_dtype
from .graph import Box, successor_map

MAX_PLACEMENT_ATTEMPTS = 500
MAX_SCENE_REDRAWS = 25


class SceneGenerationError(RuntimeError):
    """The difficulty configuration could not be satisfied."""


@dataclass(frozen=True)
class DifficultyConfig:
    """Layout knobs; presets ``easy`` and ``hard`` cover the usual cases."""

    block_count: tuple[int, int] = (2, 4)
    units_per_block: tuple[int, int] = (2, 5)
    wrap_probability: float = 0.18
    jitter_sigma: float = 0.0
    margin: float = 0.05
    overlap_allowance: float = 0.0
    unit_height: tuple[float, float] = (0.035, 0.05)
    unit_aspect: tuple[float, float] = (0.9, 2.2)
    max_row_width: float = 0.40

    def __post_init__(self):
        for name in ("block_count", "units_per_block", "unit_height", "unit_aspect"):
            lo, hi = getattr(self, name)
            if not (lo <= hi):
                raise ValueError(f"{name} range is inverted")
        if self.block_count[0] < 1 or self.units_per_block[0] < 1:
            raise ValueError("need at least one block and one unit per block")
        for name in ("wrap_probability", "overlap_allowance"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if self.jitter_sigma < 0 or self.margin < 0:
            raise ValueError("jitter and margin must be nonnegative")


def easy_preset() -> DifficultyConfig:
    return DifficultyConfig()


def hard_preset() -> DifficultyConfig:
    return DifficultyConfig(
        block_count=(3, 6),
        units_per_block=(2, 7),
        wrap_probability=0.35,
        jitter_sigma=0.004,
        margin=0.02,
        overlap_allowance=0.5,
        unit_height=(0.025, 0.06),
    )


PRESETS = {"easy": easy_preset, "hard": hard_preset}


@dataclass(eq=False)
class Scene:
    units: list[Box]
    blocks: list[list[int]]
    _raster_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_units(self) -> int:
        return len(self.units)

    def successors(self) -> np.ndarray:
        return successor_map(self.blocks, self.n_units)

    def to_json(self) -> dict:
        return {
            "units": [list(b.as_tuple()) for b in self.units],
            "blocks": [list(blk) for blk in self.blocks],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Scene":
        units = [Box(*row) for row in obj["units"]]
        blocks = [list(map(int, blk)) for blk in obj["blocks"]]
        seen = sorted(u for blk in blocks for u in blk)
        if seen != list(range(len(units))):
            raise ValueError("blocks must partition the unit indices")
        return cls(units=units, blocks=blocks)

    def features(self, base: int = 64, levels: int = 2) -> list[np.ndarray]:
        """Multi-scale feature maps for this scene, cached per resolution."""
        key = (base, levels, np.dtype(default_dtype()).name)
        if key not in self._raster_cache:
            self._raster_cache[key] = rasterize(self, base=base, levels=levels)
        return self._raster_cache[key]


def _layout_block(rng: np.random.Generator, cfg: DifficultyConfig) -> list[tuple[float, float, float, float]]:
    """One block in local coordinates anchored at (0, 0)."""
    k = int(rng.integers(cfg.units_per_block[0], cfg.units_per_block[1] + 1))
    h = float(rng.uniform(*cfg.unit_height))
    gap_x = 0.25 * h
    gap_y = 0.4 * h
    boxes = []
    x = 0.0
    y = 0.0
    for i in range(k):
        w = h * float(rng.uniform(*cfg.unit_aspect))
        if x > 0.0 and x + w > cfg.max_row_width:
            x = 0.0
            y += h + gap_y
        boxes.append((x, y, x + w, y + h))
        x += w + gap_x
        if i + 1 < k and rng.random() < cfg.wrap_probability:
            x = 0.0
            y += h + gap_y
    return boxes


def _separated(a: tuple, b: tuple, margin: float) -> bool:
    """True if the rectangles are at least ``margin`` apart on some axis."""
    return (
        b[0] >= a[2] + margin
        or a[0] >= b[2] + margin
        or b[1] >= a[3] + margin
        or a[1] >= b[3] + margin
    )


def _boxes_intersect(a: tuple, b: tuple) -> bool:
    return not (b[0] >= a[2] or a[0] >= b[2] or b[1] >= a[3] or a[1] >= b[3])


def generate_scene(seed_or_rng, cfg: DifficultyConfig | None = None) -> Scene:
    """One scene, fully determined by (seed, cfg).

    A crowded draw can fail placement; the whole layout is then redrawn
    from the same stream, so results stay deterministic.  Only a config
    that keeps failing is reported as infeasible.
    """
    cfg = cfg or easy_preset()
    rng = (
        seed_or_rng
        if isinstance(seed_or_rng, np.random.Generator)
        else np.random.default_rng(seed_or_rng)
    )
    last_error: SceneGenerationError | None = None
    for _ in range(MAX_SCENE_REDRAWS):
        try:
            return _generate_scene_once(rng, cfg)
        except SceneGenerationError as e:
            last_error = e
    raise SceneGenerationError(
        f"gave up after {MAX_SCENE_REDRAWS} layout redraws: {last_error}"
    )


def _generate_scene_once(rng: np.random.Generator, cfg: DifficultyConfig) -> Scene:
    n_blocks = int(rng.integers(cfg.block_count[0], cfg.block_count[1] + 1))
    pad = 0.02 + cfg.margin + 4.0 * cfg.jitter_sigma

    placed_bboxes: list[tuple] = []
    placed_units: list[list[tuple]] = []
    for _ in range(n_blocks):
        local = _layout_block(rng, cfg)
        bw = max(b[2] for b in local)
        bh = max(b[3] for b in local)
        if bw > 1 - 2 * pad or bh > 1 - 2 * pad:
            raise SceneGenerationError("block larger than the scene frame")
        interleave = rng.random() < cfg.overlap_allowance
        for attempt in range(MAX_PLACEMENT_ATTEMPTS):
            ox = float(rng.uniform(pad, 1 - pad - bw))
            oy = float(rng.uniform(pad, 1 - pad - bh))
            bbox = (ox, oy, ox + bw, oy + bh)
            if interleave:
                units = [(ox + b[0], oy + b[1], ox + b[2], oy + b[3]) for b in local]
                clash = any(
                    _boxes_intersect(u, v) for u in units for blk in placed_units for v in blk
                )
                if not clash:
                    break
            else:
                if all(_separated(bbox, other, cfg.margin) for other in placed_bboxes):
                    break
        else:
            raise SceneGenerationError(
                f"could not place block {len(placed_bboxes)} after "
                f"{MAX_PLACEMENT_ATTEMPTS} attempts; relax the config"
            )
        placed_bboxes.append(bbox)
        placed_units.append([(ox + b[0], oy + b[1], ox + b[2], oy + b[3]) for b in local])

    units: list[Box] = []
    blocks: list[list[int]] = []
    for blk in placed_units:
        ids = []
        for (x0, y0, x1, y1) in blk:
            if cfg.jitter_sigma > 0:
                dx0, dy0, dx1, dy1 = rng.normal(0.0, cfg.jitter_sigma, size=4)
                x0, y0, x1, y1 = x0 + dx0, y0 + dy0, x1 + dx1, y1 + dy1
            x0 = min(max(x0, 0.0), 0.99)
            y0 = min(max(y0, 0.0), 0.99)
            x1 = max(min(x1, 1.0), x0 + 0.004)
            y1 = max(min(y1, 1.0), y0 + 0.004)
            ids.append(len(units))
            units.append(Box(x0, y0, x1, y1))
        blocks.append(ids)

    # Shuffle unit indices so nothing downstream can lean on id order.
    perm = rng.permutation(len(units))
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(len(perm))
    shuffled = [units[perm[i]] for i in range(len(units))]
    remapped = [[int(inverse[u]) for u in blk] for blk in blocks]
    return Scene(units=shuffled, blocks=remapped)


def generate_corpus(seed: int, count: int, cfg: DifficultyConfig | None = None) -> list[Scene]:
    """Scenes i = 0..count-1, each seeded independently from (seed, i)."""
    cfg = cfg or easy_preset()
    out = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), int(i))))
        out.append(generate_scene(rng, cfg))
    return out


def rasterize(scene: Scene, base: int = 64, levels: int = 2) -> list[np.ndarray]:
    """Multi-scale maps, level l at (base >> l) squared, 4 channels:
    unit count covering the cell center, cell x, cell y, mean unit height.
    """
    dtype = default_dtype()
    maps = []
    for level in range(levels):
        size = base >> level
        xs = (np.arange(size) + 0.5) / size
        ys = (np.arange(size) + 0.5) / size
        occ = np.zeros((size, size))
        hsum = np.zeros((size, size))
        for b in scene.units:
            mx = (xs >= b.x0) & (xs < b.x1)
            my = (ys >= b.y0) & (ys < b.y1)
            region = np.outer(my, mx)
            occ += region
            hsum += region * b.height
        mean_h = np.divide(hsum, occ, out=np.zeros_like(hsum), where=occ > 0)
        grid_x = np.tile(xs, (size, 1))
        grid_y = np.tile(ys[:, None], (1, size))
        maps.append(np.stack([occ, grid_x, grid_y, mean_h]).astype(dtype))
    return maps


def save_scenes(path, scenes: list[Scene]) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for s in scenes:
            fh.write(json.dumps(s.to_json(), separators=(",", ":")) + "\n")


def load_scenes(path) -> list[Scene]:
    path = Path(path)
    out = []
    with path.open() as fh:
        for line_no, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(Scene.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ValueError(f"{path}:{line_no + 1}: bad scene record: {e}") from e
    return out
