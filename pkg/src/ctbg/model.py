"""The relation transformer: node and edge queries decoded side by side.

Nodes are the text units (one query per input box).  Edge queries are
successor proposals (src, dst) seeded from the layer-0 relation scores.
Each decoder layer refreshes both query sets, re-scores all relations,
classifies the live proposals, and repairs the proposal set; the final
scores are stitched into blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .attention import DeformableCrossAttention, MultiHeadSelfAttention, relation_aware_mask
from .graph import Block, Box, Edge, assemble_blocks, boxes_to_array
from .nn import FeedForward, LayerNorm, Linear, MLP, Module, uniform_param
from .synth import Scene


@dataclass(frozen=True)
class ModelConfig:
    """Desk-scale defaults; the full-scale variant used on real document
    corpora is heads=8, dim=256, ffn_dim=1024 with the same structure."""

    dim: int = 32
    heads: int = 4
    levels: int = 2
    points: int = 4
    ffn_dim: int = 128
    layers: int = 3
    top_k: int = 3
    prune_threshold: float = 0.5
    accept_threshold: float = 0.5
    dynamic_refine: bool = True
    cross_first: bool = True
    relation_mask: bool = True
    raster_base: int = 64
    in_channels: int = 4

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("dim must divide evenly into heads")
        if self.layers < 1 or self.top_k < 1 or self.levels < 1:
            raise ValueError("layers, top_k, and levels must be positive")


@dataclass(frozen=True)
class EdgeProposal:
    src: int
    dst: int
    born_layer: int
    class_score: float  # latest classifier score; 0.0 until first classified


@dataclass
class DecoderState:
    """Live decoder content after a layer: embeddings plus the proposal set."""

    layer: int
    node_emb: Tensor
    edge_emb: Tensor | None
    pairs: list[tuple[int, int]]
    born: list[int]
    scores: list[float]
    edge_centers: np.ndarray
    edge_sizes: np.ndarray

    def proposals(self) -> list[EdgeProposal]:
        return [
            EdgeProposal(s, d, b, sc)
            for (s, d), b, sc in zip(self.pairs, self.born, self.scores)
        ]


@dataclass
class ForwardResult:
    relation_scores: list[Tensor]  # length layers+1, each [n, n+1]
    edge_logit_records: list[tuple[Tensor | None, list[tuple[int, int]]]]
    proposal_history: list[list[tuple[int, int]]]
    edges: list[Edge]
    blocks: list[Block]
    state: DecoderState

    def prediction(self) -> dict:
        return {
            "blocks": [list(b.units) for b in self.blocks],
            "edges": [[e.src, e.dst, round(float(e.score), 6)] for e in self.edges],
        }


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def top_k_successors(scores_row: np.ndarray, src: int, k: int) -> list[int]:
    """Best k destination columns for one source, excluding self and the
    end-of-block column; ties go to the smaller index."""
    n = scores_row.shape[0] - 1
    cand = [j for j in range(n) if j != src]
    cand.sort(key=lambda j: (-scores_row[j], j))
    return cand[:k]


class RelationHead(Module):
    """Bilinear successor scores [n, n+1]: column j is "j follows i",
    the extra column is "i ends its block".  The diagonal is forced to
    -inf since a unit cannot follow itself."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.src = Linear(dim, dim, rng)
        self.dst = Linear(dim, dim, rng)
        self.pair = uniform_param(rng, dim, (dim, dim))
        self.end = uniform_param(rng, dim, (dim, 1))
        self.scale = 1.0 / np.sqrt(dim)

    def __call__(self, x: Tensor) -> Tensor:
        s = self.src(x)
        t = self.dst(x)
        pair = ad.mul(ad.matmul(ad.matmul(s, self.pair), ad.transpose(t)), self.scale)
        end = ad.mul(ad.matmul(s, self.end), self.scale)
        scores = ad.concat([pair, end], axis=1)  # [n, n+1]
        n = x.shape[0]
        diag = np.zeros((n, n + 1), dtype=scores.data.dtype)
        diag[np.arange(n), np.arange(n)] = -np.inf
        return ad.add(scores, diag)


class DualDecoderLayer(Module):
    """One decoder layer: both query sets gather scene evidence through
    deformable cross-attention and exchange context through
    self-attention, then pass through a feed-forward block.

    ``cross_first`` puts cross-attention ahead of self-attention (the
    content-aware ordering); the vanilla ordering runs self-attention
    first.  Node self-attention takes the relation-aware mask; edge
    self-attention is never masked."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, h = cfg.dim, cfg.heads
        self.node_cross = DeformableCrossAttention(d, h, cfg.levels, cfg.points, cfg.in_channels, rng)
        self.node_self = MultiHeadSelfAttention(d, h, rng)
        self.node_ffn = FeedForward(d, cfg.ffn_dim, rng)
        self.node_norm_cross = LayerNorm(d)
        self.node_norm_self = LayerNorm(d)
        self.node_norm_ffn = LayerNorm(d)
        self.edge_cross = DeformableCrossAttention(d, h, cfg.levels, cfg.points, cfg.in_channels, rng)
        self.edge_self = MultiHeadSelfAttention(d, h, rng)
        self.edge_ffn = FeedForward(d, cfg.ffn_dim, rng)
        self.edge_norm_cross = LayerNorm(d)
        self.edge_norm_self = LayerNorm(d)
        self.edge_norm_ffn = LayerNorm(d)

    @staticmethod
    def _path(x, cross_fn, norm_cross, self_fn, norm_self, ffn, norm_ffn, cross_first):
        if cross_first:
            x = norm_cross(ad.add(x, cross_fn(x)))
            x = norm_self(ad.add(x, self_fn(x)))
        else:
            x = norm_self(ad.add(x, self_fn(x)))
            x = norm_cross(ad.add(x, cross_fn(x)))
        return norm_ffn(ad.add(x, ffn(x)))

    def __call__(
        self,
        node_x: Tensor,
        node_centers: np.ndarray,
        node_sizes: np.ndarray,
        edge_x: Tensor | None,
        edge_centers: np.ndarray,
        edge_sizes: np.ndarray,
        maps: list[np.ndarray],
        mask: np.ndarray | None,
        cross_first: bool,
    ):
        node_out = self._path(
            node_x,
            lambda t: self.node_cross(t, node_centers, node_sizes, maps),
            self.node_norm_cross,
            lambda t: self.node_self(t, mask=mask),
            self.node_norm_self,
            self.node_ffn,
            self.node_norm_ffn,
            cross_first,
        )
        if edge_x is None or edge_x.shape[0] == 0:
            return node_out, edge_x
        edge_out = self._path(
            edge_x,
            lambda t: self.edge_cross(t, edge_centers, edge_sizes, maps),
            self.edge_norm_cross,
            lambda t: self.edge_self(t),
            self.edge_norm_self,
            self.edge_ffn,
            self.edge_norm_ffn,
            cross_first,
        )
        return node_out, edge_out


class RelationTransformer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.dim
        geo_feats = 8 + cfg.levels * cfg.in_channels
        self.encoder = MLP(geo_feats, d, d, rng)
        self.layers = [DualDecoderLayer(cfg, rng) for _ in range(cfg.layers)]
        self.relation_heads = [RelationHead(d, rng) for _ in range(cfg.layers + 1)]
        self.edge_classifiers = [MLP(d, d, 1, rng) for _ in range(cfg.layers)]
        self.edge_init = [Linear(2 * d, d, rng) for _ in range(cfg.layers + 1)]

    # -- stages ---------------------------------------------------------

    def encode_nodes(self, box_arr: np.ndarray, centers: np.ndarray,
                     sizes: np.ndarray, maps: list[np.ndarray]) -> Tensor:
        dt = ad.default_dtype()
        geo = np.concatenate([box_arr, centers, sizes], axis=1)
        pieces = [geo]
        for fmap in maps:
            Hl, Wl = fmap.shape[1], fmap.shape[2]
            pix = centers * np.array([Wl, Hl]) - 0.5
            pieces.append(ad.sample_levels(fmap, pix))
        feats = np.concatenate(pieces, axis=1).astype(dt)
        return self.encoder(Tensor(feats))

    def init_edge_queries(self, node_emb: Tensor, pairs: list[tuple[int, int]], layer: int) -> Tensor:
        src = ad.gather_rows(node_emb, [p[0] for p in pairs])
        dst = ad.gather_rows(node_emb, [p[1] for p in pairs])
        return self.edge_init[layer](ad.concat([src, dst], axis=1))

    @staticmethod
    def _edge_refs(box_arr: np.ndarray, pairs: list[tuple[int, int]]):
        if not pairs:
            return np.zeros((0, 2)), np.zeros((0, 2))
        idx = np.array(pairs, dtype=np.int64)
        a = box_arr[idx[:, 0]]
        b = box_arr[idx[:, 1]]
        lo = np.minimum(a[:, :2], b[:, :2])
        hi = np.maximum(a[:, 2:], b[:, 2:])
        return 0.5 * (lo + hi), hi - lo

    def refine_edges(
        self,
        state: DecoderState,
        relation_scores: Tensor,
        box_arr: np.ndarray,
        n: int,
    ) -> DecoderState:
        """Prune low-scoring proposals, then re-seed any source left with
        none from the current relation scores.  Identity when dynamic
        refinement is disabled."""
        cfg = self.cfg
        layer = state.layer
        if not cfg.dynamic_refine:
            return state

        keep = [i for i, sc in enumerate(state.scores) if sc >= cfg.prune_threshold]
        pairs = [state.pairs[i] for i in keep]
        born = [state.born[i] for i in keep]
        scores = [state.scores[i] for i in keep]

        covered = {p[0] for p in pairs}
        fresh: list[tuple[int, int]] = []
        sdata = relation_scores.data
        for i in range(n):
            if i in covered:
                continue
            for j in top_k_successors(sdata[i], i, cfg.top_k):
                fresh.append((i, j))

        parts = []
        if keep and state.edge_emb is not None:
            parts.append(ad.gather_rows(state.edge_emb, keep))
        if fresh:
            parts.append(self.init_edge_queries(state.node_emb, fresh, layer))
            pairs = pairs + fresh
            born = born + [layer] * len(fresh)
            scores = scores + [0.0] * len(fresh)
        edge_emb = ad.concat(parts, axis=0) if parts else None

        centers, sizes = self._edge_refs(box_arr, pairs)
        return DecoderState(
            layer=layer,
            node_emb=state.node_emb,
            edge_emb=edge_emb,
            pairs=pairs,
            born=born,
            scores=scores,
            edge_centers=centers,
            edge_sizes=sizes,
        )

    def finalize_edges(self, state: DecoderState, final_scores: Tensor) -> list[Edge]:
        """At most one successor per source: among surviving proposals
        that were actually classified (born before the terminal layer)
        and clear the acceptance threshold, keep the best per source."""
        cfg = self.cfg
        terminal = cfg.layers
        sdata = final_scores.data
        best: dict[int, tuple] = {}
        for (s, d), b, sc in zip(state.pairs, state.born, state.scores):
            if b >= terminal or sc < cfg.accept_threshold:
                continue
            key = (sc, sdata[s, d], -d)
            if s not in best or key > best[s][0]:
                best[s] = (key, Edge(s, d, float(sc)))
        return [best[s][1] for s in sorted(best)]

    # -- full pass ------------------------------------------------------

    def forward(self, boxes: list[Box], maps: list[np.ndarray]) -> ForwardResult:
        cfg = self.cfg
        n = len(boxes)
        if n == 0:
            raise ValueError("a scene needs at least one unit")
        box_arr = boxes_to_array(boxes)
        centers = 0.5 * (box_arr[:, :2] + box_arr[:, 2:])
        sizes = box_arr[:, 2:] - box_arr[:, :2]

        x = self.encode_nodes(box_arr, centers, sizes, maps)
        s0 = self.relation_heads[0](x)
        pairs = [(i, j) for i in range(n) for j in top_k_successors(s0.data[i], i, cfg.top_k)]
        edge_emb = self.init_edge_queries(x, pairs, 0) if pairs else None
        ecenters, esizes = self._edge_refs(box_arr, pairs)
        state = DecoderState(
            layer=0,
            node_emb=x,
            edge_emb=edge_emb,
            pairs=pairs,
            born=[0] * len(pairs),
            scores=[0.0] * len(pairs),
            edge_centers=ecenters,
            edge_sizes=esizes,
        )

        relation_scores = [s0]
        records: list[tuple[Tensor | None, list[tuple[int, int]]]] = []
        history = [list(pairs)]

        for li, layer in enumerate(self.layers):
            mask = relation_aware_mask(n, state.pairs) if cfg.relation_mask else None
            node_x, edge_x = layer(
                state.node_emb,
                centers,
                sizes,
                state.edge_emb,
                state.edge_centers,
                state.edge_sizes,
                maps,
                mask,
                cfg.cross_first,
            )
            state.node_emb = node_x
            state.edge_emb = edge_x
            state.layer = li + 1

            s_l = self.relation_heads[li + 1](node_x)
            relation_scores.append(s_l)

            if edge_x is not None and edge_x.shape[0] > 0:
                logits = ad.reshape(self.edge_classifiers[li](edge_x), (edge_x.shape[0],))
                records.append((logits, list(state.pairs)))
                state.scores = [float(v) for v in _sigmoid(logits.data)]
            else:
                records.append((None, []))

            state = self.refine_edges(state, s_l, box_arr, n)
            history.append(list(state.pairs))

        edges = self.finalize_edges(state, relation_scores[-1])
        blocks = assemble_blocks(n, edges)
        return ForwardResult(
            relation_scores=relation_scores,
            edge_logit_records=records,
            proposal_history=history,
            edges=edges,
            blocks=blocks,
            state=state,
        )

    def forward_scene(self, scene: Scene) -> ForwardResult:
        maps = scene.features(self.cfg.raster_base, self.cfg.levels)
        return self.forward(scene.units, maps)
