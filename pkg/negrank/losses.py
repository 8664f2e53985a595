"""
Saliency ranking losses with analytic gradients.

Coarse ranking works on raw (logit-scale) saliency; fine ranking and the
negative-pair loss work on logistic-squashed saliency because the NLL distance
needs values in (0, 1). Every loss returns a LossReport whose gradients are
taken with respect to the raw inputs. Hinge kinks (argument exactly 0) get a
zero subgradient.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.special import expit, logsumexp

from .corpus import ClipSpan
from .errors import DegenerateSpan, EmptySpan, LengthMismatch, NoOutsideClips, NonFiniteTerm

logger = logging.getLogger(__name__)

EPS = 1e-7

ROLES = ("S_p", "S_hn1", "S_hn2", "S_hn3", "S_n")


# ---------------------------------------------------------------------------
# Data types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SaliencyTrack:
    """Per-clip saliency for one (video, query) pair."""
    raw: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=np.float64).reshape(-1)
        if raw.size < 1:
            raise LengthMismatch("A saliency track needs at least one clip")
        object.__setattr__(self, "raw", raw)

    @property
    def T(self) -> int:
        return self.raw.shape[0]

    @property
    def squashed(self) -> np.ndarray:
        return np.clip(expit(self.raw), EPS, 1.0 - EPS)

    def squash_grad(self) -> np.ndarray:
        """d squashed / d raw, zero where the clamp is active."""
        s = expit(self.raw)
        inside = (s > EPS) & (s < 1.0 - EPS)
        return np.where(inside, s * (1.0 - s), 0.0)


@dataclass
class LossReport:
    """
    Scalar loss terms, their weights, and per-term gradients keyed by input name.
    total is always sum(weights[k] * terms[k]).
    """
    terms: Dict[str, float] = field(default_factory=dict)
    weights: Dict[str, float] = field(default_factory=dict)
    term_grads: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)
    notes: Dict[str, Any] = field(default_factory=dict)

    def add(self, name: str, value: float, grads: Optional[Dict[str, np.ndarray]] = None, weight: float = 1.0):
        self.terms[name] = float(value)
        self.weights[name] = float(weight)
        self.term_grads[name] = dict(grads or {})

    @property
    def total(self) -> float:
        return float(sum(self.weights[name] * value for name, value in self.terms.items()))

    @property
    def grads(self) -> Dict[str, np.ndarray]:
        merged: Dict[str, np.ndarray] = {}
        for name, grads in self.term_grads.items():
            weight = self.weights[name]
            if weight == 0.0:
                continue
            for key, grad in grads.items():
                if key in merged:
                    merged[key] = merged[key] + weight * grad
                else:
                    merged[key] = weight * np.asarray(grad, dtype=np.float64)
        return merged

    def debug_row(self) -> Dict[str, float]:
        """Per-term scalars plus gradient norms, one flat row for the ablation dump."""
        row = {f"term.{name}": value for name, value in self.terms.items()}
        row["total"] = self.total
        for key, grad in self.grads.items():
            row[f"grad_norm.{key}"] = float(np.linalg.norm(grad))
        return row


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

class CoarseConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    h1: float = Field(1.0, ge=0, description="Intra margin (inside vs outside the span)")
    h2: float = Field(2.0, ge=0, description="Inter margin (positive vs easy negative query)")
    q: int = Field(8, ge=1, description="Top-k pooling factor")
    use_intra: bool = True
    use_inter: bool = True


class FineMode(str, Enum):
    RELATIVE = "relative"
    ABSOLUTE = "absolute"


class FineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    m0: float = Field(0.25, ge=0)
    m1: float = Field(0.25, ge=0)
    m2: float = Field(0.25, ge=0)
    m3: float = Field(0.25, ge=0)
    mode: FineMode = FineMode.RELATIVE
    terms: Tuple[bool, bool, bool, bool] = (True, True, True, True)
    detach_observation: bool = False

    @property
    def margins(self) -> Tuple[float, float, float, float]:
        return (self.m0, self.m1, self.m2, self.m3)


class BaseVariant(str, Enum):
    MOMENT_DETR = "moment_detr"
    QD_DETR = "qd_detr"


class BaseLossConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lambda_l1: float = Field(10.0, ge=0)
    lambda_giou: float = Field(1.0, ge=0)
    lambda_cls: float = Field(4.0, ge=0)
    lambda_neg: float = Field(1.0, ge=0)
    lambda_cont: float = Field(1.0, ge=0)
    lambda_sal: float = Field(1.0, ge=0)
    background_weight: float = Field(0.1, ge=0, description="Down-weighting of the background class term")
    saliency_margin: float = Field(0.2, ge=0)
    tau: float = Field(0.5, gt=0)
    max_rank: int = Field(1, ge=1)
    variant: BaseVariant = BaseVariant.QD_DETR

    @field_validator("variant", mode="before")
    @classmethod
    def _lower(cls, value):
        return value.lower() if isinstance(value, str) else value


# ---------------------------------------------------------------------------
# Pooling helpers
# ---------------------------------------------------------------------------

def _as_raw(track) -> np.ndarray:
    if isinstance(track, SaliencyTrack):
        return track.raw
    return np.asarray(track, dtype=np.float64).reshape(-1)


def _check_span(span: ClipSpan, T: int) -> None:
    if span.length < 1 or span.start < 0 or span.end > T:
        raise EmptySpan(f"Clip span [{span.start}, {span.end}) is empty or outside [0, {T})")


def top_k_indices(raw: np.ndarray, span: ClipSpan, q: int) -> np.ndarray:
    """Indices of the k largest in-span scores (descending, ties to the earlier clip)."""
    _check_span(span, raw.shape[0])
    k = max(1, span.length // q)
    inside = raw[span.start:span.end]
    order = np.argsort(-inside, kind="stable")[:k]
    return order + span.start


def pooled_pos(track, span: ClipSpan, q: int = 8) -> Tuple[float, int]:
    """Top-k mean of in-span raw scores with k = max(1, floor(T+/q))."""
    raw = _as_raw(track)
    idx = top_k_indices(raw, span, q)
    return float(raw[idx].mean()), int(idx.size)


def _argmax_outside(raw: np.ndarray, span: ClipSpan) -> int:
    _check_span(span, raw.shape[0])
    mask = np.ones(raw.shape[0], dtype=bool)
    mask[span.start:span.end] = False
    if not mask.any():
        raise NoOutsideClips(f"Span [{span.start}, {span.end}) covers the whole video")
    outside = np.flatnonzero(mask)
    return int(outside[np.argmax(raw[outside])])


def max_outside(track, span: ClipSpan) -> float:
    raw = _as_raw(track)
    return float(raw[_argmax_outside(raw, span)])


def _hinge(value: float) -> Tuple[float, float]:
    """(max(0, value), d/dvalue) with a zero subgradient at the kink."""
    if value > 0.0:
        return value, 1.0
    return 0.0, 0.0


# ---------------------------------------------------------------------------
# Coarse-grained ranking
# ---------------------------------------------------------------------------

def coarse_loss(S_p, S_n, span: ClipSpan, cfg: CoarseConfig = CoarseConfig()) -> LossReport:
    """
    intra = max(0, h1 + S-_p - S+_p), inter = max(0, h2 + S+_n - S+_p) on raw scores.
    The intra term is skipped (and noted) when the span covers the whole video.
    """
    raw_p, raw_n = _as_raw(S_p), _as_raw(S_n)
    if raw_p.shape != raw_n.shape:
        raise LengthMismatch(f"S_p has {raw_p.size} clips, S_n has {raw_n.size}")
    T = raw_p.shape[0]
    idx_p = top_k_indices(raw_p, span, cfg.q)
    pos_p = raw_p[idx_p].mean()
    k = idx_p.size

    report = LossReport()
    report.notes["k"] = int(k)

    if cfg.use_intra:
        try:
            out_idx = _argmax_outside(raw_p, span)
        except NoOutsideClips:
            report.notes["intra_skipped"] = True
        else:
            value, slope = _hinge(cfg.h1 + raw_p[out_idx] - pos_p)
            grad = np.zeros(T)
            if slope:
                grad[out_idx] += 1.0
                grad[idx_p] -= 1.0 / k
            report.add("intra", value, {"S_p": grad})

    if cfg.use_inter:
        idx_n = top_k_indices(raw_n, span, cfg.q)
        value, slope = _hinge(cfg.h2 + raw_n[idx_n].mean() - pos_p)
        grad_p, grad_n = np.zeros(T), np.zeros(T)
        if slope:
            grad_n[idx_n] += 1.0 / k
            grad_p[idx_p] -= 1.0 / k
        report.add("inter", value, {"S_p": grad_p, "S_n": grad_n})
    return report


# ---------------------------------------------------------------------------
# Fine-grained ranking
# ---------------------------------------------------------------------------

def pseudo_label(span: ClipSpan, T: int) -> np.ndarray:
    _check_span(span, T)
    y = np.zeros(T)
    y[span.start:span.end] = 1.0
    return y


def nll_distance(y, y_hat) -> float:
    """d(y, y_hat) = -(1/T) sum y_i log y_hat_i; clips with y_i = 0 contribute nothing."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if y.shape != y_hat.shape:
        raise LengthMismatch(f"observation has {y.size} clips, prediction has {y_hat.size}")
    active = y != 0.0
    return float(-(y[active] * np.log(y_hat[active])).sum() / y.size)


def _nll_grads(y: np.ndarray, y_hat: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    T = y.size
    return -np.log(y_hat) / T, -y / y_hat / T


def fine_loss(S_p, S_hn1, S_hn2, S_hn3, S_n, span: ClipSpan, cfg: FineConfig = FineConfig()) -> LossReport:
    """
    Four hinges over NLL distances between squashed tracks.

    relative: m_i + d_i - d_{i+1};  absolute: constraints 3 and 4 use d_1 as anchor.
    d_0 = d(Y, S_p) and d_i = d(S_p, S^i) for the hard negatives then the easy one.
    """
    tracks = [t if isinstance(t, SaliencyTrack) else SaliencyTrack(t) for t in (S_p, S_hn1, S_hn2, S_hn3, S_n)]
    T = tracks[0].T
    if any(t.T != T for t in tracks):
        raise LengthMismatch("All five saliency tracks must have the same length")
    y = pseudo_label(span, T)
    squashed = [t.squashed for t in tracks]
    p = squashed[0]

    # distances and their partials wrt (observation, prediction)
    d = [nll_distance(y, p)]
    partials = [(None, _nll_grads(y, p)[1])]
    for other in squashed[1:]:
        d.append(nll_distance(p, other))
        partials.append(_nll_grads(p, other))

    if cfg.mode is FineMode.RELATIVE:
        pairs = [(0, 1), (1, 2), (2, 3), (3, 4)]
    else:
        pairs = [(0, 1), (1, 2), (1, 3), (1, 4)]

    report = LossReport()
    report.notes["distances"] = [float(x) for x in d]
    for term_index, ((lo, hi), margin, enabled) in enumerate(zip(pairs, cfg.margins, cfg.terms), start=1):
        if not enabled:
            continue
        value, slope = _hinge(margin + d[lo] - d[hi])
        squashed_grads = [np.zeros(T) for _ in range(5)]
        if slope:
            for dist_index, sign in ((lo, 1.0), (hi, -1.0)):
                obs_grad, pred_grad = partials[dist_index]
                if dist_index == 0:
                    squashed_grads[0] += sign * pred_grad
                else:
                    squashed_grads[dist_index] += sign * pred_grad
                    if not cfg.detach_observation:
                        squashed_grads[0] += sign * obs_grad
        raw_grads = {
            role: grad * track.squash_grad()
            for role, grad, track in zip(ROLES, squashed_grads, tracks)
        }
        report.add(f"fr{term_index}", value, raw_grads)
    return report


# ---------------------------------------------------------------------------
# Base (DETR-style) losses
# ---------------------------------------------------------------------------

def _span_bounds(span) -> Tuple[float, float]:
    if hasattr(span, "start") and hasattr(span, "end"):
        return float(span.start), float(span.end)
    start, end = span
    return float(start), float(end)


def giou_1d(a, b) -> float:
    """Generalized IoU of two intervals given as (start, end) or MomentSpan."""
    s1, e1 = _span_bounds(a)
    s2, e2 = _span_bounds(b)
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    union = (e1 - s1) + (e2 - s2) - inter
    hull = max(e1, e2) - min(s1, s2)
    return inter / union - (hull - union) / hull


def _giou_grad_pred(pred: Tuple[float, float], gt: Tuple[float, float]) -> Tuple[float, np.ndarray]:
    """GIoU and its gradient wrt the predicted (start, end)."""
    s1, e1 = pred
    s2, e2 = gt
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    union = (e1 - s1) + (e2 - s2) - inter
    hull = max(e1, e2) - min(s1, s2)

    d_inter = np.zeros(2)
    if inter > 0.0:
        d_inter[0] = -1.0 if s1 > s2 else 0.0
        d_inter[1] = 1.0 if e1 < e2 else 0.0
    d_union = np.array([-1.0, 1.0]) - d_inter
    d_hull = np.array([-1.0 if s1 < s2 else 0.0, 1.0 if e1 > e2 else 0.0])

    # giou = inter/union - 1 + union/hull
    value = inter / union - 1.0 + union / hull
    grad = d_inter / union - inter / union ** 2 * d_union + d_union / hull - union / hull ** 2 * d_hull
    return value, grad


def _to_bounds(center: float, width: float) -> Tuple[float, float]:
    return center - width / 2.0, center + width / 2.0


def span_loss(m, m_hat, cfg: BaseLossConfig = BaseLossConfig()) -> LossReport:
    """
    lambda_L1 * (|d center| + |d width|) + lambda_GIoU * (1 - GIoU) on normalized spans.
    Gradients are reported for the prediction as a (center, width) vector.
    """
    c, w = (float(x) for x in m)
    c_hat, w_hat = (float(x) for x in m_hat)
    if w <= 0 or w_hat <= 0:
        raise DegenerateSpan(f"Span widths must be positive, got {w} and {w_hat}")

    delta = np.array([c_hat - c, w_hat - w])
    l1_grad = np.sign(delta)

    giou, bound_grad = _giou_grad_pred(_to_bounds(c_hat, w_hat), _to_bounds(c, w))
    # (start, end) = (c - w/2, c + w/2)
    giou_grad = np.array([bound_grad[0] + bound_grad[1], 0.5 * (bound_grad[1] - bound_grad[0])])

    report = LossReport()
    report.add("l1", float(np.abs(delta).sum()), {"span": l1_grad}, weight=cfg.lambda_l1)
    report.add("giou", 1.0 - giou, {"span": -giou_grad}, weight=cfg.lambda_giou)
    return report


def neg_pair_loss(S_neg) -> LossReport:
    """Mean over clips of -log(1 - s_t) on the squashed track of an unrelated query."""
    track = S_neg if isinstance(S_neg, SaliencyTrack) else SaliencyTrack(S_neg)
    s = track.squashed
    value = float(-np.log1p(-s).mean())
    grad_squashed = 1.0 / (1.0 - s) / track.T
    report = LossReport()
    report.add("neg", value, {"S_n": grad_squashed * track.squash_grad()})
    return report


def contrastive_rank_loss(track, ranks, tau: float = 0.5, max_rank: int = 1) -> LossReport:
    """
    sum over r of -log(sum_{rank>=r} e^{S/tau} / sum_all e^{S/tau}).
    Levels whose positive or negative side is empty are skipped and counted.
    """
    raw = _as_raw(track)
    ranks = np.asarray(ranks).reshape(-1)
    if ranks.shape != raw.shape:
        raise LengthMismatch(f"{ranks.size} ranks for {raw.size} clips")
    logits = raw / tau
    p_all = np.exp(logits - logsumexp(logits))

    report = LossReport()
    skipped = []
    for r in range(1, max_rank + 1):
        pos = ranks >= r
        if pos.all() or not pos.any():
            skipped.append(r)
            continue
        value = float(logsumexp(logits) - logsumexp(logits[pos]))
        p_pos = np.zeros_like(raw)
        p_pos[pos] = np.exp(logits[pos] - logsumexp(logits[pos]))
        report.add(f"rank{r}", value, {"S_p": (p_all - p_pos) / tau})
    if skipped:
        logger.debug(f"Contrastive rank levels skipped: {skipped}")
    report.add("skipped_levels", float(len(skipped)), weight=0.0)
    report.notes["skipped_levels"] = skipped
    return report


def saliency_hinge(track, span: ClipSpan, margin: float = 0.2) -> LossReport:
    """
    Clip-level saliency loss of the moment-retrieval baseline:
    max(0, margin + mean outside - mean inside) on raw scores.
    """
    raw = _as_raw(track)
    _check_span(span, raw.shape[0])
    mask = np.zeros(raw.shape[0], dtype=bool)
    mask[span.start:span.end] = True
    report = LossReport()
    if mask.all():
        report.notes["saliency_skipped"] = True
        report.add("saliency", 0.0, {"S_p": np.zeros_like(raw)})
        return report
    value, slope = _hinge(margin + raw[~mask].mean() - raw[mask].mean())
    grad = np.zeros_like(raw)
    if slope:
        grad[~mask] = 1.0 / (~mask).sum()
        grad[mask] = -1.0 / mask.sum()
    report.add("saliency", value, {"S_p": grad})
    return report


def classification_nll(probs: np.ndarray, matched: Sequence[int], cfg: BaseLossConfig = BaseLossConfig()) -> LossReport:
    """
    -log p(c_i) summed over the N moment queries: foreground for matched queries,
    background (down-weighted) for the rest. probs is N x 2 with column 0 = foreground.
    """
    probs = np.asarray(probs, dtype=np.float64)
    target = np.ones(probs.shape[0], dtype=int)
    target[list(matched)] = 0
    weight = np.where(target == 0, 1.0, cfg.background_weight)
    chosen = np.clip(probs[np.arange(probs.shape[0]), target], EPS, 1.0)
    value = float(-(weight * np.log(chosen)).sum())
    grad = np.zeros_like(probs)
    grad[np.arange(probs.shape[0]), target] = -weight / chosen
    report = LossReport()
    report.add("cls", value, {"cls_probs": grad})
    return report


def base_loss(
    spans: np.ndarray,
    probs: np.ndarray,
    gt_span: Tuple[float, float],
    pairs: Sequence[Tuple[int, int]],
    S_p,
    S_n,
    span: ClipSpan,
    cfg: BaseLossConfig = BaseLossConfig(),
) -> Dict[str, LossReport]:
    """
    Named parts of the DETR-style base objective for one sample with one ground truth.
    moment_detr: cls + span + neg + saliency; qd_detr adds the contrastive rank loss.
    The assignment `pairs` is treated as fixed.
    """
    spans = np.asarray(spans, dtype=np.float64)
    parts: Dict[str, LossReport] = {}

    span_report = LossReport()
    l1_total, giou_total = 0.0, 0.0
    l1_grad, giou_grad = np.zeros_like(spans), np.zeros_like(spans)
    for pred_index, _ in pairs:
        single = span_loss(gt_span, spans[pred_index], cfg)
        l1_total += single.terms["l1"]
        giou_total += single.terms["giou"]
        l1_grad[pred_index] += single.term_grads["l1"]["span"]
        giou_grad[pred_index] += single.term_grads["giou"]["span"]
    span_report.add("l1", l1_total, {"spans": l1_grad}, weight=cfg.lambda_l1)
    span_report.add("giou", giou_total, {"spans": giou_grad}, weight=cfg.lambda_giou)
    parts["span"] = span_report

    cls_report = classification_nll(probs, [p for p, _ in pairs], cfg)
    cls_report.weights["cls"] = cfg.lambda_cls
    parts["cls"] = cls_report

    neg_report = neg_pair_loss(S_n)
    neg_report.weights["neg"] = cfg.lambda_neg
    parts["neg"] = neg_report

    sal_report = saliency_hinge(S_p, span, cfg.saliency_margin)
    sal_report.weights["saliency"] = cfg.lambda_sal
    parts["saliency"] = sal_report

    if cfg.variant is BaseVariant.QD_DETR:
        T = _as_raw(S_p).shape[0]
        cont_report = contrastive_rank_loss(S_p, pseudo_label(span, T).astype(int), cfg.tau, cfg.max_rank)
        for name in list(cont_report.weights):
            cont_report.weights[name] *= cfg.lambda_cont
        parts["cont"] = cont_report
    return parts


# ---------------------------------------------------------------------------
# Overall objective
# ---------------------------------------------------------------------------

def combine(
    base_terms: Mapping[str, LossReport],
    L_cr: Optional[LossReport],
    L_fr: Optional[LossReport],
    alpha: float = 1.0,
    beta: float = 1.0,
    replace_saliency: bool = False,
) -> LossReport:
    """
    L = L_base + alpha * L_cr + beta * L_fr.

    With replace_saliency the base saliency part is dropped and the coarse intra term
    takes its place inside L_base (weight 1), leaving only inter under alpha.
    """
    combined = LossReport()

    def merge(prefix: str, report: LossReport, scale: float, only: Optional[set] = None, skip: Optional[set] = None):
        for name, value in report.terms.items():
            if only is not None and name not in only:
                continue
            if skip is not None and name in skip:
                continue
            if not math.isfinite(value):
                raise NonFiniteTerm(f"{prefix}.{name} = {value}")
            combined.add(f"{prefix}.{name}", value, report.term_grads.get(name), weight=scale * report.weights[name])

    for part, report in base_terms.items():
        if replace_saliency and part == "saliency":
            continue
        merge(f"base.{part}", report, 1.0)

    if L_cr is not None:
        if replace_saliency:
            merge("base.intra", L_cr, 1.0, only={"intra"})
            merge("cr", L_cr, alpha, skip={"intra"})
        else:
            merge("cr", L_cr, alpha)
    if L_fr is not None:
        merge("fr", L_fr, beta)
    combined.notes["alpha"] = alpha
    combined.notes["beta"] = beta
    combined.notes["replace_saliency"] = replace_saliency
    return combined


class ObjectiveConfig(BaseModel):
    """Which parts of the overall objective are active and how they are weighted."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    base: BaseLossConfig = BaseLossConfig()
    coarse: CoarseConfig = CoarseConfig()
    fine: FineConfig = FineConfig()
    alpha: float = Field(1.0, ge=0)
    beta: float = Field(1.0, ge=0)
    use_coarse: bool = True
    use_fine: bool = True
    replace_saliency: bool = False


def objective(
    spans: np.ndarray,
    probs: np.ndarray,
    gt_span: Tuple[float, float],
    pairs: Sequence[Tuple[int, int]],
    tracks: Mapping[str, np.ndarray],
    span: ClipSpan,
    cfg: ObjectiveConfig = ObjectiveConfig(),
) -> LossReport:
    """Full objective for one sample; `tracks` holds raw saliency for every role in ROLES."""
    missing = [role for role in ROLES if role not in tracks]
    if missing:
        raise LengthMismatch(f"Missing saliency tracks for {missing}")
    parts = base_loss(spans, probs, gt_span, pairs, tracks["S_p"], tracks["S_n"], span, cfg.base)
    L_cr = coarse_loss(tracks["S_p"], tracks["S_n"], span, cfg.coarse) if cfg.use_coarse else None
    L_fr = fine_loss(*(tracks[role] for role in ROLES), span, cfg.fine) if cfg.use_fine else None
    return combine(parts, L_cr, L_fr, cfg.alpha, cfg.beta, replace_saliency=cfg.replace_saliency)
