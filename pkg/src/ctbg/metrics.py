"""Reading-order evaluation: local accuracy, local continuity, global
accuracy, computed after one-to-one unit matching at an IoU threshold.

All three metrics pool raw counts across scenes (micro average), then
the per-threshold numbers are averaged over the 0.50:0.05:0.95 ladder
for the summary entry.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .graph import Box, iou
from .synth import Scene

DEFAULT_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
MAX_NGRAM = 4


class ScenePrediction(NamedTuple):
    blocks: list[list[int]]
    boxes: list[Box]


def match_units(pred_boxes: Sequence[Box], gt_boxes: Sequence[Box], threshold: float) -> dict[int, int]:
    """Greedy one-to-one matching, best IoU first.

    Candidate pairs at or above the threshold are sorted by descending
    IoU with ties broken toward smaller prediction then ground-truth
    index, and accepted while both sides are unused.
    """
    cand = []
    for i, pb in enumerate(pred_boxes):
        for j, gb in enumerate(gt_boxes):
            v = iou(pb, gb)
            if v >= threshold:
                cand.append((-v, i, j))
    cand.sort()
    mapping: dict[int, int] = {}
    used_gt: set[int] = set()
    for _, i, j in cand:
        if i in mapping or j in used_gt:
            continue
        mapping[i] = j
        used_gt.add(j)
    return mapping


def remap_blocks(pred_blocks: Sequence[Sequence[int]], mapping: dict[int, int]) -> list[list[int]]:
    """Translate predicted unit ids into ground-truth ids; units without
    a match become unique placeholders that can never line up."""
    out = []
    fresh = -1
    for blk in pred_blocks:
        cur = []
        for u in blk:
            if u in mapping:
                cur.append(mapping[u])
            else:
                cur.append(fresh)
                fresh -= 1
        out.append(cur)
    return out


@dataclass
class ScoreCounts:
    """Raw pooled counts; metric values are derived at report time."""

    la_hit: int = 0
    la_total: int = 0
    ga_hit: int = 0
    ga_total: int = 0
    ngram_hit: tuple[int, ...] = (0,) * MAX_NGRAM
    ngram_total: tuple[int, ...] = (0,) * MAX_NGRAM
    ngram_ref: tuple[int, ...] = (0,) * MAX_NGRAM

    def merge(self, other: "ScoreCounts") -> "ScoreCounts":
        return ScoreCounts(
            self.la_hit + other.la_hit,
            self.la_total + other.la_total,
            self.ga_hit + other.ga_hit,
            self.ga_total + other.ga_total,
            tuple(a + b for a, b in zip(self.ngram_hit, other.ngram_hit)),
            tuple(a + b for a, b in zip(self.ngram_total, other.ngram_total)),
            tuple(a + b for a, b in zip(self.ngram_ref, other.ngram_ref)),
        )

    def local_accuracy(self) -> float:
        """Recall of consecutive ground-truth pairs; vacuously 1."""
        return 1.0 if self.la_total == 0 else self.la_hit / self.la_total

    def global_accuracy(self) -> float:
        """Recall of ground-truth blocks reproduced exactly; vacuously 1."""
        return 1.0 if self.ga_total == 0 else self.ga_hit / self.ga_total

    def local_continuity(self) -> float:
        """Geometric mean of clipped n-gram precisions (n = 1..4), with no
        brevity penalty.  Orders empty on both sides are skipped; an
        order the ground truth attains but the prediction misses
        entirely scores zero, which zeroes the whole metric."""
        logs = []
        for hit, total, ref in zip(self.ngram_hit, self.ngram_total, self.ngram_ref):
            if total == 0 and ref == 0:
                continue
            if hit == 0:
                return 0.0
            logs.append(np.log(hit / total))
        if not logs:
            return 1.0
        return float(np.exp(sum(logs) / len(logs)))


def _block_ngrams(blocks: Sequence[Sequence[int]], n: int) -> Counter:
    out: Counter = Counter()
    for blk in blocks:
        for i in range(len(blk) - n + 1):
            out[tuple(blk[i : i + n])] += 1
    return out


def score_scene(
    pred_blocks: Sequence[Sequence[int]],
    gt_blocks: Sequence[Sequence[int]],
    mapping: dict[int, int],
) -> ScoreCounts:
    mapped = remap_blocks(pred_blocks, mapping)

    successor: dict[int, int] = {}
    for blk in mapped:
        for a, b in zip(blk, blk[1:]):
            successor[a] = b
    la_hit = la_total = 0
    for blk in gt_blocks:
        for a, b in zip(blk, blk[1:]):
            la_total += 1
            if successor.get(a) == b:
                la_hit += 1

    pred_pool = Counter(tuple(b) for b in mapped)
    ga_hit = 0
    for blk in gt_blocks:
        key = tuple(blk)
        if pred_pool[key] > 0:
            pred_pool[key] -= 1
            ga_hit += 1

    hits, totals, refs = [], [], []
    for order in range(1, MAX_NGRAM + 1):
        cand = _block_ngrams(mapped, order)
        ref = _block_ngrams(gt_blocks, order)
        hits.append(sum(min(c, ref[g]) for g, c in cand.items()))
        totals.append(sum(cand.values()))
        refs.append(sum(ref.values()))

    return ScoreCounts(
        la_hit=la_hit,
        la_total=la_total,
        ga_hit=ga_hit,
        ga_total=len(gt_blocks),
        ngram_hit=tuple(hits),
        ngram_total=tuple(totals),
        ngram_ref=tuple(refs),
    )


@dataclass
class MetricReport:
    values: dict[str, dict[str, float]]

    def __getitem__(self, key: str) -> dict[str, float]:
        return self.values[key]

    def to_json(self) -> dict:
        return {k: {m: round(v, 6) for m, v in d.items()} for k, d in self.values.items()}

    @classmethod
    def from_json(cls, obj: dict) -> "MetricReport":
        return cls({k: dict(v) for k, v in obj.items()})


def evaluate(
    predictions: Sequence[ScenePrediction],
    ground_truths: Sequence[Scene],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> MetricReport:
    if len(predictions) != len(ground_truths):
        raise ValueError("prediction and ground-truth counts differ")
    ladder: list[dict[str, float]] = []
    for thr in thresholds:
        pooled = ScoreCounts()
        for pred, gt in zip(predictions, ground_truths):
            mapping = match_units(pred.boxes, gt.units, thr)
            pooled = pooled.merge(score_scene(pred.blocks, gt.blocks, mapping))
        ladder.append(
            {
                "la": pooled.local_accuracy(),
                "lc": pooled.local_continuity(),
                "ga": pooled.global_accuracy(),
            }
        )
    report: dict[str, dict[str, float]] = {}
    for want in (0.5, 0.75):
        for t, entry in zip(thresholds, ladder):
            if abs(t - want) < 1e-9:
                report[f"iou_{want:.2f}"] = entry
    report["iou_avg"] = {
        m: float(np.mean([entry[m] for entry in ladder])) for m in ("la", "lc", "ga")
    }
    return MetricReport(report)


def save_report(path, report: MetricReport) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n")


def load_predictions(path, gts: Sequence[Scene]) -> list[ScenePrediction]:
    """Prediction JSONL aligned with the ground-truth scenes.

    Records carry ``blocks`` and may carry their own ``units`` boxes;
    otherwise the ground-truth boxes are assumed (the given-box regime).
    """
    path = Path(path)
    out = []
    with path.open() as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if len(lines) != len(gts):
        raise ValueError(f"{path}: {len(lines)} predictions for {len(gts)} scenes")
    for line, gt in zip(lines, gts):
        obj = json.loads(line)
        blocks = [list(map(int, blk)) for blk in obj["blocks"]]
        if "units" in obj:
            boxes = [Box(*row) for row in obj["units"]]
        else:
            boxes = gt.units
        out.append(ScenePrediction(blocks=blocks, boxes=boxes))
    return out
