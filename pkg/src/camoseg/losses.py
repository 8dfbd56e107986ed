"""Mask and embedding losses, the matching cost, and minimum-cost bipartite matching."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch.nn import functional as F

from .errors import DomainError, ShapeError


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def bce_loss(pred_logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy in the stable logit form."""
    _same_shape(pred_logits, gt)
    x, g = pred_logits, gt.to(pred_logits.dtype)
    return (x.clamp(min=0) - x * g + torch.log1p(torch.exp(-x.abs()))).mean()


def dice_loss(pred_probs: torch.Tensor, gt: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    _same_shape(pred_probs, gt)
    if not smooth > 0:
        raise DomainError("dice smoothing must be positive")
    g = gt.to(pred_probs.dtype)
    inter = (pred_probs * g).sum()
    return 1.0 - (2.0 * inter + smooth) / (pred_probs.sum() + g.sum() + smooth)


def classification_loss(embeddings: torch.Tensor, text_matrix: torch.Tensor, labels: torch.Tensor,
                        tau: torch.Tensor | float) -> torch.Tensor:
    """Mean cross-entropy of softmax(z T^T / tau) against the labels."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    num_classes = text_matrix.shape[0]
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise DomainError(f"labels must lie in [0, {num_classes})")
    if labels.numel() == 0:
        return embeddings.sum() * 0.0
    logits = embeddings @ text_matrix.T / tau
    return -torch.log_softmax(logits, dim=-1).gather(1, labels[:, None]).mean()


# ---------------------------------------------------------------- matching

@dataclass
class MatchAssignment:
    pairs: list[tuple[int, int]]
    unmatched_predictions: list[int]
    cost: float = 0.0

    @property
    def pred_indices(self) -> list[int]:
        return [p for p, _ in self.pairs]

    @property
    def gt_indices(self) -> list[int]:
        return [g for _, g in self.pairs]


def _solve(cost: np.ndarray) -> tuple[float, np.ndarray]:
    """Shortest-augmenting-path Kuhn-Munkres for rows <= cols.

    Returns the optimal total and ``col_of_row``.
    """
    n, m = cost.shape
    INF = math.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    row_of_col = np.zeros(m + 1, dtype=np.int64)  # 1-based rows, 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        row_of_col[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of_col[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[row_of_col[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if row_of_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of_col[j0] = row_of_col[j1]
            j0 = j1
    col_of_row = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if row_of_col[j]:
            col_of_row[row_of_col[j] - 1] = j - 1
    total = math.fsum(cost[np.arange(n), col_of_row].tolist())
    return total, col_of_row


def _optimum(cost: np.ndarray) -> tuple[float, list[tuple[int, int]]]:
    """Optimal matching of size min(P, G) for any rectangular matrix."""
    p, g = cost.shape
    if p == 0 or g == 0:
        return 0.0, []
    if p <= g:
        total, cols = _solve(cost)
        return total, [(i, int(c)) for i, c in enumerate(cols)]
    total, rows = _solve(cost.T)
    return total, sorted((int(r), j) for j, r in enumerate(rows))


def _constrained_optimum(cost, fixed_cost, rows, cols, need) -> float:
    if need == 0:
        return fixed_cost
    if min(len(rows), len(cols)) < need:
        return math.inf
    return fixed_cost + _optimum(cost[np.ix_(rows, cols)])[0]


def hungarian_match(cost, tie_break: bool = True) -> MatchAssignment:
    """Minimum-cost assignment of size min(P, G).

    With ``tie_break`` the lexicographically smallest pair list among all
    optimal assignments is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError("cost must be a 2-D matrix")
    if np.isnan(cost).any():
        raise DomainError("cost matrix contains NaN")
    if not np.isfinite(cost).all():
        raise DomainError("cost matrix contains infinite entries")
    p, g = cost.shape
    best, pairs = _optimum(cost)
    if tie_break and pairs:
        tol = 1e-9 * max(1.0, abs(best))
        k = min(p, g)
        chosen: list[tuple[int, int]] = []
        fixed = 0.0
        free_cols = list(range(g))
        next_row = 0
        while len(chosen) < k:
            found = False
            for i in range(next_row, p):
                later_rows = list(range(i + 1, p))
                for j in free_cols:
                    cols = [c for c in free_cols if c != j]
                    total = _constrained_optimum(cost, fixed + cost[i, j], later_rows, cols, k - len(chosen) - 1)
                    if total <= best + tol:
                        chosen.append((i, j))
                        fixed += cost[i, j]
                        free_cols = cols
                        next_row = i + 1
                        found = True
                        break
                if found:
                    break
            if not found:  # numerical corner: fall back to the solver's answer
                chosen = pairs
                break
        pairs = chosen
    matched = {i for i, _ in pairs}
    # correctly rounded, so equal-cost assignments report identical totals
    total = math.fsum(float(cost[i, j]) for i, j in pairs)
    return MatchAssignment(pairs, [i for i in range(p) if i not in matched], total)


# ------------------------------------------------------------ cost matrix

def downsample_masks(x: torch.Tensor, factor: int = 4) -> torch.Tensor:
    if factor == 1:
        return x
    return F.avg_pool2d(x.unsqueeze(0), factor).squeeze(0)


def pairwise_bce(logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """(P, G) matrix of mean BCE between every prediction and every target."""
    x = logits.flatten(1)
    g = gt.flatten(1).to(x.dtype)
    pos = x.clamp(min=0) + torch.log1p(torch.exp(-x.abs()))
    return (pos.sum(1, keepdim=True) - x @ g.T) / x.shape[1]


def pairwise_dice(probs: torch.Tensor, gt: torch.Tensor, smooth: float) -> torch.Tensor:
    p = probs.flatten(1)
    g = gt.flatten(1).to(p.dtype)
    return 1.0 - (2.0 * p @ g.T + smooth) / (p.sum(1)[:, None] + g.sum(1)[None, :] + smooth)


def class_log_probs(embeddings: torch.Tensor, text_matrix: torch.Tensor, tau) -> torch.Tensor:
    return torch.log_softmax(embeddings @ text_matrix.T / tau, dim=-1)


@torch.no_grad()
def build_cost_matrix(mask_logits: torch.Tensor, embeddings: torch.Tensor, gt_masks: torch.Tensor,
                      gt_labels, text_matrix: torch.Tensor, tau, alpha: float = 0.4,
                      smooth: float = 1.0, factor: int = 4) -> np.ndarray:
    """cost(i, j) = alpha * bce + dice + ce(i, label_j), masks compared at 1/``factor`` resolution."""
    if gt_masks.shape[0] == 0:
        raise ShapeError("cost matrix needs at least one ground-truth instance")
    x = downsample_masks(mask_logits.to(torch.float64), factor)
    g = downsample_masks(gt_masks.to(torch.float64), factor)
    labels = torch.as_tensor(gt_labels, dtype=torch.long)
    ce = -class_log_probs(embeddings.to(torch.float64), text_matrix.to(torch.float64), tau)[:, labels]
    cost = alpha * pairwise_bce(x, g) + pairwise_dice(torch.sigmoid(x), g, smooth) + ce
    return cost.numpy()


# ------------------------------------------------------------ total loss

@dataclass
class LossBreakdown:
    bce: torch.Tensor
    dice: torch.Tensor
    ce: torch.Tensor
    total: torch.Tensor
    alpha: float = 0.4
    extras: dict = field(default_factory=dict)

    def as_floats(self) -> dict[str, float]:
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in ("bce", "dice", "ce", "total")}


def combine(bce, dice, ce, alpha: float = 0.4) -> LossBreakdown:
    return LossBreakdown(bce, dice, ce, alpha * bce + dice + ce, alpha)


def total_loss(mask_logits: torch.Tensor, embeddings: torch.Tensor, gt_masks: torch.Tensor, gt_labels,
               text_matrix: torch.Tensor, tau, assignment: MatchAssignment, *, alpha: float = 0.4,
               noobj_weight: float = 0.1, smooth: float = 1.0,
               confidence_logits: torch.Tensor | None = None) -> LossBreakdown:
    """Loss for one image.

    ``text_matrix`` carries the no-object embedding as its last row. Matched
    predictions get mask BCE + dice and category CE; unmatched ones get a
    no-object CE weighted by ``noobj_weight``. When confidence logits are
    given, an existence BCE (matched -> 1, unmatched -> 0, same weighting) is
    added to the CE term.
    """
    zero = mask_logits.sum() * 0.0
    labels = torch.as_tensor(gt_labels, dtype=torch.long)
    pi = torch.as_tensor(assignment.pred_indices, dtype=torch.long)
    gi = torch.as_tensor(assignment.gt_indices, dtype=torch.long)
    un = torch.as_tensor(assignment.unmatched_predictions, dtype=torch.long)
    noobj = text_matrix.shape[0] - 1
    if len(pi):
        bce = torch.stack([bce_loss(mask_logits[i], gt_masks[j]) for i, j in assignment.pairs]).mean()
        dice = torch.stack([dice_loss(torch.sigmoid(mask_logits[i]), gt_masks[j], smooth)
                            for i, j in assignment.pairs]).mean()
        ce = classification_loss(embeddings[pi], text_matrix, labels[gi], tau)
    else:
        bce = dice = ce = zero
    if len(un):
        ce = ce + noobj_weight * classification_loss(embeddings[un], text_matrix,
                                                     torch.full((len(un),), noobj), tau)
    if confidence_logits is not None:
        if len(pi):
            ce = ce + F.binary_cross_entropy_with_logits(confidence_logits[pi], torch.ones(len(pi), dtype=confidence_logits.dtype))
        if len(un):
            ce = ce + noobj_weight * F.binary_cross_entropy_with_logits(
                confidence_logits[un], torch.zeros(len(un), dtype=confidence_logits.dtype))
    return combine(bce, dice, ce, alpha)
