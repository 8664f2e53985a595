"""
Bipartite matching of predicted moments to ground-truth spans.

Costs follow the usual set-prediction recipe: -p(foreground) plus the L1 and GIoU
span costs, weighted like the corresponding losses.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .corpus import MomentSpan
from .errors import DegenerateSpan, EmptyMatrix
from .losses import BaseLossConfig, giou_1d

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MomentPrediction:
    span: Tuple[float, float]  # normalized (center, width)
    class_probs: Tuple[float, float]  # (foreground, background)

    def __post_init__(self):
        object.__setattr__(self, "span", tuple(float(x) for x in self.span))
        object.__setattr__(self, "class_probs", tuple(float(x) for x in self.class_probs))
        if any(not 0.0 <= p <= 1.0 for p in self.class_probs) or abs(sum(self.class_probs) - 1.0) > 1e-9:
            raise ValueError(f"class probabilities {self.class_probs} are not a distribution")

    @property
    def foreground(self) -> float:
        return self.class_probs[0]

    def bounds(self) -> Tuple[float, float]:
        center, width = self.span
        return center - width / 2.0, center + width / 2.0


@dataclass
class Assignment:
    pairs: List[Tuple[int, int]] = field(default_factory=list)
    total_cost: float = 0.0

    def __post_init__(self):
        preds = [p for p, _ in self.pairs]
        gts = [g for _, g in self.pairs]
        if len(set(preds)) != len(preds) or len(set(gts)) != len(gts):
            raise ValueError(f"Assignment {self.pairs} is not one-to-one")

    @property
    def matched_predictions(self) -> List[int]:
        return [p for p, _ in self.pairs]


def _normalized(gt, duration: Optional[float]) -> Tuple[float, float]:
    if isinstance(gt, MomentSpan):
        if duration is None:
            raise ValueError("A duration is needed to normalize a MomentSpan in seconds")
        return gt.to_normalized(duration)
    center, width = gt
    return float(center), float(width)


def match_cost(
    preds: Sequence[MomentPrediction],
    gts: Sequence,
    cfg: BaseLossConfig = BaseLossConfig(),
    duration: Optional[float] = None,
) -> np.ndarray:
    """N_pred x N_gt matrix of lambda_cls*(-p_fg) + lambda_L1*L1 + lambda_GIoU*(1 - GIoU)."""
    if not preds or not gts:
        raise EmptyMatrix(f"Cannot match {len(preds)} predictions against {len(gts)} ground truths")
    targets = [_normalized(gt, duration) for gt in gts]
    for center, width in [p.span for p in preds] + targets:
        if width <= 0:
            raise DegenerateSpan(f"Span (center={center}, width={width}) has no extent")

    cost = np.zeros((len(preds), len(targets)))
    for i, pred in enumerate(preds):
        for j, (center, width) in enumerate(targets):
            l1 = abs(pred.span[0] - center) + abs(pred.span[1] - width)
            giou = giou_1d(pred.bounds(), (center - width / 2.0, center + width / 2.0))
            cost[i, j] = -cfg.lambda_cls * pred.foreground + cfg.lambda_l1 * l1 + cfg.lambda_giou * (1.0 - giou)
    return cost


def _optimum(cost: np.ndarray) -> Tuple[float, int]:
    if cost.shape[0] == 0 or cost.shape[1] == 0:
        return 0.0, 0
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum()), len(rows)


def solve(cost) -> Assignment:
    """
    Minimum-cost one-to-one assignment with min(N_pred, N_gt) pairs.

    Among optimal assignments the lexicographically smallest pair list wins: rows are
    fixed in order, each to the smallest column that still admits an optimal completion.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise EmptyMatrix(f"Cost matrix must be a non-empty 2-D array, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("Cost matrix has non-finite entries")

    n_rows, n_cols = cost.shape
    size = min(n_rows, n_cols)
    best, _ = _optimum(cost)
    tol = 1e-9 * (1.0 + abs(best))

    pairs: List[Tuple[int, int]] = []
    fixed = 0.0
    free_cols = list(range(n_cols))
    for row in range(n_rows):
        if len(pairs) == size:
            break
        rest_rows = list(range(row + 1, n_rows))
        needed = size - len(pairs) - 1
        chosen = None
        for col in free_cols:
            rest_cols = [c for c in free_cols if c != col]
            sub_cost, sub_size = _optimum(cost[np.ix_(rest_rows, rest_cols)])
            if sub_size != needed:
                continue
            if fixed + cost[row, col] + sub_cost <= best + tol:
                chosen = col
                break
        if chosen is None:
            continue  # row stays unmatched
        pairs.append((row, chosen))
        fixed += cost[row, chosen]
        free_cols.remove(chosen)

    return Assignment(pairs=pairs, total_cost=float(sum(cost[r, c] for r, c in pairs)))


def match(
    preds: Sequence[MomentPrediction],
    gts: Sequence,
    cfg: BaseLossConfig = BaseLossConfig(),
    duration: Optional[float] = None,
) -> Assignment:
    return solve(match_cost(preds, gts, cfg, duration))
