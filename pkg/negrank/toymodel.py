"""
A small differentiable scorer with hand-written backpropagation.

For clip features x (T x d_v) and a query with mean token embedding e:

    H      = tanh([x_t; e] W_s + b_s)            shared hidden clip states
    sal_t  = H_t . u_s + c_s                      raw saliency
    A      = softmax_t(Q H^T)                     one attention row per moment query
    P      = A H                                  pooled hidden states
    span   = logistic([P; e] W_span + b_span)     normalized (center, width)
    cls    = softmax([P; e] W_cls + b_cls)        (foreground, background)

All five query roles of a sample (positive, three hard negatives, easy negative) go
through the model together as a leading batch axis.
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit, softmax

from .corpus import ClipSpan
from .errors import BatchTooSmall, DivergedLoss, IoFailure, MissingFile, NonFiniteGradient, NonFiniteTerm, ShapeMismatch, UnknownToken
from .losses import ROLES, LossReport, ObjectiveConfig, SaliencyTrack, objective
from .matcher import MomentPrediction, match_cost, solve
from .negforge import sample_easy_negative

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PARAM_NAMES = ("token_table", "W_s", "b_s", "u_s", "c_s", "queries", "W_span", "b_span", "W_cls", "b_cls")


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    d_v: int = Field(32, ge=1, description="Clip feature size")
    d_e: int = Field(32, ge=1, description="Token embedding size")
    d_h: int = Field(64, ge=1, description="Hidden size")
    n_queries: int = Field(5, ge=1, description="Moment queries per video")


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lr: float = Field(0.05, ge=0)
    epochs: int = Field(30, ge=0)
    batch: int = Field(32, ge=2)
    clip_norm: Optional[float] = Field(10.0, gt=0, description="Global gradient-norm clip; None disables")
    seed: int = 0


class Vocabulary:
    def __init__(self, words: Sequence[str]):
        self.words = list(words)
        self._index = {word: i for i, word in enumerate(self.words)}
        if len(self._index) != len(self.words):
            raise ValueError("Vocabulary words must be unique")

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def encode(self, tokens: Sequence[str]) -> List[int]:
        ids = []
        for token in tokens:
            if token not in self._index:
                raise UnknownToken(f"Token {token!r} is not in the vocabulary")
            ids.append(self._index[token])
        return ids


@dataclass
class ModelParams:
    token_table: np.ndarray
    W_s: np.ndarray
    b_s: np.ndarray
    u_s: np.ndarray
    c_s: np.ndarray
    queries: np.ndarray
    W_span: np.ndarray
    b_span: np.ndarray
    W_cls: np.ndarray
    b_cls: np.ndarray

    @classmethod
    def init(cls, cfg: ModelConfig, vocab_size: int, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        d_z, d_g = cfg.d_v + cfg.d_e, cfg.d_h + cfg.d_e
        return cls(
            token_table=rng.normal(0.0, 1.0, (vocab_size, cfg.d_e)),
            W_s=rng.normal(0.0, 1.0 / math.sqrt(d_z), (d_z, cfg.d_h)),
            b_s=np.zeros(cfg.d_h),
            u_s=rng.normal(0.0, 1.0 / math.sqrt(cfg.d_h), cfg.d_h),
            c_s=np.zeros(1),
            queries=rng.normal(0.0, 1.0, (cfg.n_queries, cfg.d_h)),
            W_span=rng.normal(0.0, 1.0 / math.sqrt(d_g), (d_g, 2)),
            b_span=np.zeros(2),
            W_cls=rng.normal(0.0, 1.0 / math.sqrt(d_g), (d_g, 2)),
            b_cls=np.zeros(2),
        )

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def is_finite(self) -> bool:
        return all(np.isfinite(array).all() for array in self.arrays().values())

    def copy(self) -> "ModelParams":
        return ModelParams(**{name: array.copy() for name, array in self.arrays().items()})

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> "ModelParams":
        return ModelParams(**{name: array - lr * grads[name] for name, array in self.arrays().items()})

    @property
    def d_v(self) -> int:
        return self.W_s.shape[0] - self.d_e

    @property
    def d_e(self) -> int:
        return self.token_table.shape[1]

    @property
    def n_queries(self) -> int:
        return self.queries.shape[0]


@dataclass
class _Cache:
    """Activations of one forward pass over M query roles sharing one video."""
    ids: List[List[int]]
    Z: np.ndarray       # M x T x (d_v + d_e)
    H: np.ndarray       # M x T x d_h
    sal: np.ndarray     # M x T
    A: np.ndarray       # M x N x T
    G: np.ndarray       # M x N x (d_h + d_e)
    span: np.ndarray    # M x N x 2
    cls: np.ndarray     # M x N x 2


@dataclass
class ForwardOutput:
    saliency: SaliencyTrack
    spans: List[MomentPrediction]
    cache: _Cache = field(repr=False)


def _check_inputs(params: ModelParams, x: np.ndarray, role_ids: Sequence[Sequence[int]]) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.d_v:
        raise ShapeMismatch(f"Clip features must be T x {params.d_v}, got {x.shape}")
    if x.shape[0] < 2:
        raise ShapeMismatch(f"Need at least 2 clips, got {x.shape[0]}")
    vocab_size = params.token_table.shape[0]
    for ids in role_ids:
        if len(ids) == 0:
            raise ShapeMismatch("A query needs at least one token")
        for token_id in ids:
            if not 0 <= int(token_id) < vocab_size:
                raise UnknownToken(f"Token id {token_id} outside vocabulary of size {vocab_size}")
    return x


def forward_roles(params: ModelParams, x, role_ids: Sequence[Sequence[int]]) -> _Cache:
    x = _check_inputs(params, x, role_ids)
    M, (T, _) = len(role_ids), x.shape
    N = params.n_queries

    E = np.stack([params.token_table[list(ids)].mean(axis=0) for ids in role_ids])
    Z = np.concatenate([np.broadcast_to(x, (M,) + x.shape), np.broadcast_to(E[:, None, :], (M, T, params.d_e))], axis=2)
    H = np.tanh(Z @ params.W_s + params.b_s)
    sal = H @ params.u_s + params.c_s[0]
    A = softmax(np.einsum("nh,mth->mnt", params.queries, H), axis=2)
    P = np.einsum("mnt,mth->mnh", A, H)
    G = np.concatenate([P, np.broadcast_to(E[:, None, :], (M, N, params.d_e))], axis=2)
    span = expit(G @ params.W_span + params.b_span)
    cls = softmax(G @ params.W_cls + params.b_cls, axis=2)
    return _Cache(ids=[list(ids) for ids in role_ids], Z=Z, H=H, sal=sal, A=A, G=G, span=span, cls=cls)


def forward(params: ModelParams, clip_features, token_ids: Sequence[int]) -> ForwardOutput:
    cache = forward_roles(params, clip_features, [token_ids])
    spans = [
        MomentPrediction(span=tuple(cache.span[0, j]), class_probs=tuple(cache.cls[0, j]))
        for j in range(params.n_queries)
    ]
    return ForwardOutput(saliency=SaliencyTrack(cache.sal[0]), spans=spans, cache=cache)


def backward_roles(
    params: ModelParams,
    cache: _Cache,
    d_sal: np.ndarray,
    d_span: Optional[np.ndarray] = None,
    d_cls: Optional[np.ndarray] = None,
) -> Dict[str, np.ndarray]:
    """Reverse pass: gradients of a scalar loss given its gradients wrt the outputs."""
    d_h, d_e = params.W_s.shape[1], params.d_e
    M, T = cache.sal.shape
    N = params.n_queries
    d_span = np.zeros((M, N, 2)) if d_span is None else d_span
    d_cls = np.zeros((M, N, 2)) if d_cls is None else d_cls

    # heads
    d_a_span = d_span * cache.span * (1.0 - cache.span)
    d_a_cls = cache.cls * (d_cls - (d_cls * cache.cls).sum(axis=2, keepdims=True))
    grads = {
        "W_span": np.einsum("mng,mnk->gk", cache.G, d_a_span),
        "b_span": d_a_span.sum(axis=(0, 1)),
        "W_cls": np.einsum("mng,mnk->gk", cache.G, d_a_cls),
        "b_cls": d_a_cls.sum(axis=(0, 1)),
    }
    dG = d_a_span @ params.W_span.T + d_a_cls @ params.W_cls.T
    dP, dE = dG[:, :, :d_h], dG[:, :, d_h:].sum(axis=1)

    # attention pooling
    dA = np.einsum("mnh,mth->mnt", dP, cache.H)
    dH = np.einsum("mnt,mnh->mth", cache.A, dP)
    d_logits = cache.A * (dA - (dA * cache.A).sum(axis=2, keepdims=True))
    grads["queries"] = np.einsum("mnt,mth->nh", d_logits, cache.H)
    dH += np.einsum("mnt,nh->mth", d_logits, params.queries)

    # saliency head
    grads["u_s"] = np.einsum("mth,mt->h", cache.H, d_sal)
    grads["c_s"] = np.array([d_sal.sum()])
    dH += d_sal[:, :, None] * params.u_s

    # shared hidden layer
    d_pre = dH * (1.0 - cache.H ** 2)
    grads["W_s"] = np.einsum("mtz,mth->zh", cache.Z, d_pre)
    grads["b_s"] = d_pre.sum(axis=(0, 1))
    dZ = d_pre @ params.W_s.T
    dE = dE + dZ[:, :, params.d_v:].sum(axis=1)

    table = np.zeros_like(params.token_table)
    for m, ids in enumerate(cache.ids):
        np.add.at(table, ids, dE[m] / len(ids))
    grads["token_table"] = table

    for name, grad in grads.items():
        if not np.isfinite(grad).all():
            raise NonFiniteGradient(f"Gradient of {name} has non-finite entries")
    return grads


# ---------------------------------------------------------------------------
# Training examples and the batch objective
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingExample:
    """One video with token ids for the positive and hard negatives (plus the easy negative once attached)."""
    sample_id: str
    features: np.ndarray
    span: ClipSpan
    roles: Tuple[Tuple[int, ...], ...]

    @property
    def T(self) -> int:
        return self.features.shape[0]

    @property
    def gt(self) -> Tuple[float, float]:
        """Normalized (center, width) of the clip span."""
        return (self.span.start + self.span.end) / 2.0 / self.T, self.span.length / self.T

    def with_easy(self, easy_ids: Sequence[int]) -> "TrainingExample":
        return replace(self, roles=tuple(self.roles[:4]) + (tuple(easy_ids),))


def tree_sum(items: List):
    """Pairwise reduction in a fixed order."""
    if not items:
        raise ValueError("Nothing to sum")
    while len(items) > 1:
        paired = [_add(items[i], items[i + 1]) for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            paired.append(items[-1])
        items = paired
    return items[0]


def _add(a, b):
    if isinstance(a, dict):
        return {key: a[key] + b[key] for key in a}
    return a + b


def sample_objective(
    params: ModelParams,
    example: TrainingExample,
    cfg: ObjectiveConfig,
    pairs: Optional[Sequence[Tuple[int, int]]] = None,
) -> Tuple[LossReport, Dict[str, np.ndarray], List[Tuple[int, int]]]:
    """Loss report, parameter gradients and the (fixed) matching for one example."""
    if len(example.roles) != len(ROLES):
        raise ShapeMismatch(f"Example {example.sample_id} has {len(example.roles)} roles, expected {len(ROLES)}")
    cache = forward_roles(params, example.features, example.roles)
    if not (np.isfinite(cache.sal).all() and np.isfinite(cache.span).all() and np.isfinite(cache.cls).all()):
        raise NonFiniteTerm(f"Forward pass of {example.sample_id} produced non-finite outputs")
    spans, probs = cache.span[0], cache.cls[0]
    if pairs is None:
        preds = [MomentPrediction(span=tuple(spans[j]), class_probs=tuple(probs[j])) for j in range(len(spans))]
        pairs = solve(match_cost(preds, [example.gt], cfg.base)).pairs

    tracks = {role: cache.sal[m] for m, role in enumerate(ROLES)}
    report = objective(spans, probs, example.gt, pairs, tracks, example.span, cfg)
    output_grads = report.grads

    M, T = cache.sal.shape
    d_sal = np.stack([output_grads.get(role, np.zeros(T)) for role in ROLES])
    d_span = np.zeros_like(cache.span)
    d_cls = np.zeros_like(cache.cls)
    if "spans" in output_grads:
        d_span[0] = output_grads["spans"]
    if "cls_probs" in output_grads:
        d_cls[0] = output_grads["cls_probs"]
    return report, backward_roles(params, cache, d_sal, d_span, d_cls), list(pairs)


def batch_objective(
    params: ModelParams,
    examples: Sequence[TrainingExample],
    cfg: ObjectiveConfig,
    assignments: Optional[Sequence[Sequence[Tuple[int, int]]]] = None,
) -> Tuple[float, Dict[str, float], Dict[str, np.ndarray], List[List[Tuple[int, int]]]]:
    """Mean objective over the batch, mean terms, mean gradients and the matchings used."""
    totals, terms, grads, used = [], [], [], []
    for i, example in enumerate(examples):
        report, sample_grads, pairs = sample_objective(params, example, cfg, None if assignments is None else assignments[i])
        if not math.isfinite(report.total):
            raise NonFiniteTerm(f"Objective of {example.sample_id} is {report.total}")
        if logger.isEnabledFor(logging.DEBUG):
            logger.debug(f"{example.sample_id}: {report.debug_row()}")
        totals.append(report.total)
        terms.append({name: value for name, value in report.terms.items()})
        grads.append(sample_grads)
        used.append(pairs)
    scale = 1.0 / len(examples)
    mean_grads = {name: grad * scale for name, grad in tree_sum(grads).items()}
    names = sorted({name for row in terms for name in row})
    mean_terms = {name: float(np.mean([row.get(name, 0.0) for row in terms])) for name in names}
    return float(np.mean(totals)), mean_terms, mean_grads, used


def backward(params: ModelParams, batch: Sequence[TrainingExample], loss_cfg: ObjectiveConfig = ObjectiveConfig()) -> Dict[str, np.ndarray]:
    """Mean parameter gradients of the objective over a batch, with each matching held fixed."""
    return batch_objective(params, batch, loss_cfg)[2]


def gradient_check(
    params: ModelParams,
    examples: Sequence[TrainingExample],
    cfg: ObjectiveConfig,
    eps: float = 1e-5,
) -> Dict[str, float]:
    """Relative error between analytic and central-difference gradients, per parameter array."""
    _, _, analytic, assignments = batch_objective(params, examples, cfg)
    errors = {}
    for name in PARAM_NAMES:
        array = getattr(params, name)
        numeric = np.zeros_like(array)
        for index in np.ndindex(array.shape):
            original = array[index]
            array[index] = original + eps
            plus = batch_objective(params, examples, cfg, assignments)[0]
            array[index] = original - eps
            minus = batch_objective(params, examples, cfg, assignments)[0]
            array[index] = original
            numeric[index] = (plus - minus) / (2.0 * eps)
        denom = np.linalg.norm(analytic[name]) + np.linalg.norm(numeric)
        errors[name] = float(np.linalg.norm(analytic[name] - numeric) / denom) if denom > 0 else 0.0
    return errors


def predict(params: ModelParams, clip_features, token_ids: Sequence[int]) -> List[MomentPrediction]:
    """Moment predictions ranked by foreground probability (ties keep query order)."""
    spans = forward(params, clip_features, token_ids).spans
    order = sorted(range(len(spans)), key=lambda j: -spans[j].foreground)
    return [spans[j] for j in order]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: Union[str, Path], params: ModelParams, vocab: Vocabulary, model_cfg: ModelConfig) -> Path:
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as handle:
            np.savez(
                handle,
                format_version=np.array(CHECKPOINT_VERSION),
                vocab=np.array(vocab.words, dtype=str),
                model_config=np.array(model_cfg.model_dump_json()),
                **params.arrays(),
            )
    except OSError as e:
        raise IoFailure(f"Cannot write checkpoint {path}: {e}") from e
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[ModelParams, Vocabulary, ModelConfig]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"Unsupported checkpoint version {version}")
        params = ModelParams(**{name: data[name].copy() for name in PARAM_NAMES})
        vocab = Vocabulary([str(word) for word in data["vocab"]])
        model_cfg = ModelConfig.model_validate_json(str(data["model_config"]))
    return params, vocab, model_cfg


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    checkpoint: Path
    trace: Path
    history: List[dict]


def _batches(order: np.ndarray, size: int) -> List[List[int]]:
    batches = [list(order[i:i + size]) for i in range(0, len(order), size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2].extend(batches.pop())
    return batches


def _diverged(
    out_dir: Path,
    last_good: Optional[ModelParams],
    vocab: Vocabulary,
    model_cfg: ModelConfig,
    message: str,
) -> DivergedLoss:
    checkpoint = None
    if last_good is not None:
        checkpoint = str(save_checkpoint(out_dir / "last_good.npz", last_good, vocab, model_cfg))
    logger.error(f"Training diverged: {message}")
    return DivergedLoss(message, checkpoint=checkpoint)


def _clip(grads: Dict[str, np.ndarray], max_norm: Optional[float]) -> Tuple[Dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        grads = {name: g * (max_norm / norm) for name, g in grads.items()}
    return grads, norm


def train(
    examples: Sequence[TrainingExample],
    vocab: Vocabulary,
    out_dir: Union[str, Path],
    model_cfg: ModelConfig = ModelConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    objective_cfg: ObjectiveConfig = ObjectiveConfig(),
    eval_fn: Optional[Callable[[ModelParams, int], Dict[str, float]]] = None,
    params: Optional[ModelParams] = None,
) -> TrainResult:
    """
    Seeded plain gradient descent over examples carrying (positive, hn1, hn2, hn3) ids.

    Easy negatives are re-drawn from each mini-batch. One trace record per epoch holds the
    mean of every loss term plus whatever `eval_fn` returns. A non-finite loss, gradient or
    parameter stores the last finite parameters and raises DivergedLoss.
    """
    if len(examples) < 2:
        raise BatchTooSmall(f"Training needs at least 2 examples, got {len(examples)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace_path = out_dir / "trace.jsonl"
    params = params.copy() if params is not None else ModelParams.init(model_cfg, len(vocab), train_cfg.seed)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 1]))
    last_good = params if params.is_finite() else None

    history = []
    with trace_path.open("w", encoding="utf-8", newline="\n") as trace:
        for epoch in range(1, train_cfg.epochs + 1):
            epoch_totals, epoch_terms, epoch_norms = [], [], []
            for batch_no, indices in enumerate(_batches(shuffle_rng.permutation(len(examples)), train_cfg.batch)):
                batch_ids = [examples[i].sample_id for i in indices]
                batch = []
                for position, i in enumerate(indices):
                    easy_id = sample_easy_negative(batch_ids, position, np.random.SeedSequence([train_cfg.seed, epoch, batch_no, position]))
                    batch.append(examples[i].with_easy(examples[indices[batch_ids.index(easy_id)]].roles[0]))
                try:
                    total, terms, grads, _ = batch_objective(params, batch, objective_cfg)
                except (NonFiniteGradient, NonFiniteTerm) as e:
                    raise _diverged(out_dir, last_good, vocab, model_cfg,
                                    f"non-finite loss in epoch {epoch}, batch {batch_no}: {e}") from e
                grads, norm = _clip(grads, train_cfg.clip_norm)
                params = params.step(grads, train_cfg.lr)
                if not params.is_finite():
                    raise _diverged(out_dir, last_good, vocab, model_cfg,
                                    f"non-finite parameters after epoch {epoch}, batch {batch_no}")
                last_good = params
                epoch_totals.append(total)
                epoch_terms.append(terms)
                epoch_norms.append(norm)

            names = sorted({name for row in epoch_terms for name in row})
            record = {
                "epoch": epoch,
                "total": float(np.mean(epoch_totals)),
                "terms": {name: float(np.mean([row.get(name, 0.0) for row in epoch_terms])) for name in names},
                "grad_norm": float(np.mean(epoch_norms)),
            }
            if eval_fn is not None:
                record["metrics"] = eval_fn(params, epoch)
            trace.write(json.dumps(record, sort_keys=True) + "\n")
            history.append(record)
            logger.info(f"Epoch {epoch}/{train_cfg.epochs}: loss {record['total']:.4f}, grad norm {record['grad_norm']:.3f}")

    checkpoint = save_checkpoint(out_dir / "model.npz", params, vocab, model_cfg)
    return TrainResult(params=params, checkpoint=checkpoint, trace=trace_path, history=history)
