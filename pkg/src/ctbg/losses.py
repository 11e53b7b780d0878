"""Training losses: successor cross entropy plus proposal classification.

Each relation score matrix (layer 0 through the terminal layer) pays a
softmax cross entropy against the ground-truth successor of every unit,
where the extra class means "ends its block".  Each decoder layer's live
proposals pay a binary cross entropy against whether they are real
successor pairs.  Ground-truth pairs missing from the proposal set add
no edge term; the relation term is what pulls them back in.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ForwardResult


def edge_labels(pairs: list[tuple[int, int]], successors: np.ndarray) -> np.ndarray:
    return np.array([1.0 if successors[s] == d else 0.0 for s, d in pairs])


def relation_loss(scores: Tensor, successors: np.ndarray) -> Tensor:
    return ad.softmax_cross_entropy(scores, successors)


def proposal_loss(logits: Tensor, pairs: list[tuple[int, int]], successors: np.ndarray) -> Tensor:
    return ad.bce_with_logits(logits, edge_labels(pairs, successors))


def scene_loss(result: ForwardResult, successors: np.ndarray) -> tuple[Tensor, dict[str, float]]:
    """Total loss for one scene plus float components for logging."""
    total: Tensor | None = None
    rel_final = 0.0
    for scores in result.relation_scores:
        term = relation_loss(scores, successors)
        rel_final = float(term.data)
        total = term if total is None else ad.add(total, term)
    edge_final = 0.0
    for logits, pairs in result.edge_logit_records:
        if logits is None:
            continue
        term = proposal_loss(logits, pairs, successors)
        edge_final = float(term.data)
        total = term if total is None else ad.add(total, term)
    return total, {"rel_final": rel_final, "edge_final": edge_final}
