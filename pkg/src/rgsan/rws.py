"""Rule-guided target selection and the training objective."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional, Sequence

import torch

from .text import DependencyTree

SUBJECT_RELATIONS = frozenset({"nsubj", "compound"})
RELATIVE_PRONOUNS = frozenset({"which", "that"})
PLACEHOLDER_WORDS = frozenset({"there", "this", "it", "object"})
COLLECTIVE_WORDS = frozenset({"set", "sets", "color", "shape"})
COLLECTIVE_RELATIONS = frozenset({"compound", "nmod", "dep"})

BCE_EPS = 1e-7
DICE_SMOOTH = 1.0


def _edge_order(e):
    return (e.tail, e.head)


def select_target_index(tree: DependencyTree) -> int:
    """Walk from the root to the token naming the referred object.

    Three rule stages, each applied at most once and in order; when a stage
    finds no matching edge the index is left unchanged.
    """
    edges = sorted(tree.edges, key=_edge_order)
    i = tree.root

    if tree.tokens[i] not in RELATIVE_PRONOUNS:
        for e in edges:
            if e.head == i and e.relation in SUBJECT_RELATIONS:
                i = e.tail
                break

    if tree.tokens[i] in PLACEHOLDER_WORDS:
        for e in edges:
            if e.head == i:
                i = e.tail
                break

    if tree.tokens[i] in COLLECTIVE_WORDS:
        for e in edges:
            if e.relation in COLLECTIVE_RELATIONS and i in (e.head, e.tail):
                # move across the edge to its other endpoint
                i = e.tail if e.head == i else e.head
                break
    return i


def select_root_index(tree: DependencyTree) -> int:
    return tree.root


@dataclass(frozen=True)
class LossWeights:
    bce: float = 1.0
    dice: float = 1.0
    pos: float = 0.5
    score: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v >= 0 and v < float("inf")):
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {v}")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(*(getattr(self, f.name) * factor for f in fields(self)))


@dataclass
class LossBundle:
    bce: torch.Tensor
    dice: torch.Tensor
    pos: torch.Tensor
    score: torch.Tensor
    total: torch.Tensor

    def items(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}.items()


@dataclass
class Prediction:
    response_map: torch.Tensor
    mask: torch.Tensor
    score: torch.Tensor
    target_index: int
    target_position: torch.Tensor


def _check_lengths(M, Y):
    if M.shape != Y.shape:
        raise ValueError(f"response map {tuple(M.shape)} and target {tuple(Y.shape)} differ in shape")


def _masked_mean(x, valid):
    if valid is None:
        return x.mean(-1)
    valid = valid.to(x.dtype)
    return (x * valid).sum(-1) / valid.sum(-1).clamp(min=1)


def response_map(kernel: torch.Tensor, S: torch.Tensor):
    """Sigmoid response of one kernel (..., D) against superpoints (..., N_s, D)."""
    logits = (S @ kernel.unsqueeze(-1)).squeeze(-1)
    M = torch.sigmoid(logits)
    return M, M > 0.5


def bce_loss(M: torch.Tensor, Y: torch.Tensor, valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    _check_lengths(M, Y)
    m = M.clamp(BCE_EPS, 1 - BCE_EPS)
    y = Y.to(m.dtype)
    per = -(y * m.log() + (1 - y) * (1 - m).log())
    return _masked_mean(per, valid)


def dice_loss(M: torch.Tensor, Y: torch.Tensor, valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    _check_lengths(M, Y)
    y = Y.to(M.dtype)
    m = M
    if valid is not None:
        v = valid.to(M.dtype)
        m, y = m * v, y * v
    inter = (m * y).sum(-1)
    return 1 - (2 * inter + DICE_SMOOTH) / (m.sum(-1) + y.sum(-1) + DICE_SMOOTH)


def position_loss(P_tgt: torch.Tensor, P_gt: torch.Tensor) -> torch.Tensor:
    return (P_tgt - P_gt).abs().mean(-1)


def mask_iou(mask: torch.Tensor, Y: torch.Tensor, valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    mask, Y = mask.bool(), Y.bool()
    if valid is not None:
        mask, Y = mask & valid, Y & valid
    inter = (mask & Y).sum(-1).double()
    union = (mask | Y).sum(-1).double()
    return torch.where(union > 0, inter / union.clamp(min=1), torch.ones_like(union))


def score_loss(score: torch.Tensor, M: torch.Tensor, mask: torch.Tensor, Y: torch.Tensor,
               valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Squared error between the predicted mask-quality score and the realized IoU."""
    iou = mask_iou(mask, Y, valid).to(score.dtype)
    return (score - iou) ** 2


def total_loss(bce, dice, pos, score, weights: LossWeights) -> LossBundle:
    total = weights.bce * bce + weights.dice * dice + weights.pos * pos + weights.score * score
    return LossBundle(bce, dice, pos, score, total)


def average_bundles(bundles: Sequence[LossBundle]) -> LossBundle:
    """Average per-round bundles (deep supervision); sums run in round order."""
    n = len(bundles)
    if n == 0:
        raise ValueError("no loss bundles to average")

    def avg(name):
        acc = getattr(bundles[0], name)
        for b in bundles[1:]:
            acc = acc + getattr(b, name)
        return acc / n

    return LossBundle(*(avg(f.name) for f in fields(LossBundle)))
