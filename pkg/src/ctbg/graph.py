"""Boxes, reading-order edges, blocks, and the edge-to-block assembler.

Coordinates live in a [0, 1] scene frame, origin top-left, x to the
right and y downward.  A block is an ordered run of unit indices; the
reading order inside a block is the order of the list.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle with strictly positive extent."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError(f"degenerate box {self!r}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)


class Edge(NamedTuple):
    """Directed reading-order edge: ``dst`` follows ``src``."""

    src: int
    dst: int
    score: float


@dataclass(frozen=True)
class Block:
    """Maximal chain of unit indices in reading order."""

    units: tuple[int, ...]

    def __post_init__(self):
        if not self.units:
            raise ValueError("empty block")


def union_box(a: Box, b: Box) -> Box:
    """Smallest box enclosing both inputs."""
    return Box(min(a.x0, b.x0), min(a.y0, b.y0), max(a.x1, b.x1), max(a.y1, b.y1))


def iou(a: Box, b: Box) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.width * a.height + b.width * b.height - inter
    return inter / union


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64).reshape(len(boxes), 4)


def centers_sizes(boxes: Sequence[Box]) -> tuple[np.ndarray, np.ndarray]:
    """(centers [m,2], sizes [m,2]) for a box list, as float64 arrays."""
    arr = boxes_to_array(boxes)
    centers = 0.5 * (arr[:, :2] + arr[:, 2:])
    sizes = arr[:, 2:] - arr[:, :2]
    return centers, sizes


def connected_components(n: int, pairs: Iterable[tuple[int, int]]) -> np.ndarray:
    """Component label per node under the undirected closure of ``pairs``.

    Labels are the smallest member index of each component, so they are
    stable across pair orderings.
    """
    parent = list(range(n))

    def find(x: int) -> int:
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:  # path compression
            parent[x], x = root, parent[x]
        return root

    for s, d in pairs:
        rs, rd = find(s), find(d)
        if rs != rd:
            parent[max(rs, rd)] = min(rs, rd)

    return np.array([find(i) for i in range(n)], dtype=np.int64)


def assemble_blocks(n: int, edges: Sequence[Edge]) -> list[Block]:
    """Deterministically stitch scored successor edges into blocks.

    Edges are considered best-first (score descending, then smaller dst,
    then smaller src) and accepted while they keep out-degree and
    in-degree at most one.  Any remaining cycle is opened by deleting its
    lowest-scoring edge (tie: the one leaving the smallest unit index).
    Every unit lands in exactly one block; unlinked units become
    singleton blocks, and blocks are listed by ascending head unit.
    """
    order = sorted(range(len(edges)), key=lambda k: (-edges[k].score, edges[k].dst, edges[k].src))
    succ: dict[int, int] = {}
    pred: dict[int, int] = {}
    score_of: dict[int, float] = {}
    for k in order:
        e = edges[k]
        if e.src == e.dst or not (0 <= e.src < n and 0 <= e.dst < n):
            raise ValueError(f"bad edge {e!r} for {n} units")
        if e.src in succ or e.dst in pred:
            continue
        succ[e.src] = e.dst
        pred[e.dst] = e.src
        score_of[e.src] = e.score

    # With degrees capped at one, every component is a chain or an
    # isolated simple cycle; walk each component once and open cycles.
    visited: set[int] = set()
    for start in range(n):
        if start in visited:
            continue
        path: list[int] = []
        pos: dict[int, int] = {}
        u: int | None = start
        while u is not None and u not in visited and u not in pos:
            pos[u] = len(path)
            path.append(u)
            u = succ.get(u)
        if u is not None and u in pos:
            cycle = path[pos[u]:]
            weakest = min(cycle, key=lambda s: (score_of[s], s))
            dropped_dst = succ.pop(weakest)
            pred.pop(dropped_dst)
        visited.update(path)

    blocks = []
    for head in range(n):
        if head in pred:
            continue
        chain = [head]
        nxt = succ.get(head)
        while nxt is not None:
            chain.append(nxt)
            nxt = succ.get(nxt)
        blocks.append(Block(tuple(chain)))
    return blocks


def blocks_to_lists(blocks: Sequence[Block]) -> list[list[int]]:
    return [list(b.units) for b in blocks]


def successor_map(blocks: Sequence[Sequence[int]], n: int) -> np.ndarray:
    """Reading-order successor per unit; ``n`` marks end-of-block."""
    out = np.full(n, n, dtype=np.int64)
    for blk in blocks:
        units = list(blk.units) if isinstance(blk, Block) else list(blk)
        for a, b in zip(units, units[1:]):
            out[a] = b
    return out
