"""
Metrics, saliency-ordering diagnostics and the ablation harness.

IoU, recall and mIoU follow the usual temporal-grounding definitions: a query counts
as recalled when one of its top-n spans overlaps the ground truth with IoU strictly
above the threshold.
"""

import asyncio
import itertools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator

from .config import RunConfig, build_config, to_flat
from .corpus import Filler, MomentSpan, Split
from .errors import ConfigError, EmptyGrid, EmptyPredictions, MissingTrack, NegrankError
from .losses import ROLES, pooled_pos
from .matcher import MomentPrediction
from .llm_client import ChatEndpoint, LlmFiller, PromptConfig, bundled_template
from .negforge import LexiconFiller, NegativeFiller, NegativeHierarchy, forge
from .synthgen import TEST_SPLITS, SyntheticCorpus, SyntheticSample, load_corpus
from .tagger import PrimitiveDictionary, build_dictionary, tokenize
from .toymodel import ModelParams, TrainingExample, TrainResult, Vocabulary, forward_roles, predict, train

logger = logging.getLogger(__name__)

Bounds = Tuple[float, float]


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _bounds(span) -> Bounds:
    if isinstance(span, MomentSpan):
        return span.start, span.end
    start, end = span
    return float(start), float(end)


def iou_1d(a, b) -> float:
    (s1, e1), (s2, e2) = _bounds(a), _bounds(b)
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    union = max(e1, e2) - min(s1, s2)
    return inter / union if union > 0 else 0.0


def recall_at(preds: Sequence[Sequence], gts: Sequence, n: int = 1, m: float = 0.5) -> float:
    """Fraction of queries with a top-n prediction whose IoU exceeds m."""
    if not preds or len(preds) != len(gts):
        raise EmptyPredictions(f"Got {len(preds)} prediction lists for {len(gts)} ground truths")
    hits = 0
    for i, (ranked, gt) in enumerate(zip(preds, gts)):
        if not ranked:
            raise EmptyPredictions(f"Query {i} has no predictions")
        hits += any(iou_1d(span, gt) > m for span in ranked[:n])
    return hits / len(preds)


def mean_iou(top1: Sequence, gts: Sequence) -> float:
    if not top1 or len(top1) != len(gts):
        raise EmptyPredictions(f"Got {len(top1)} predictions for {len(gts)} ground truths")
    return float(np.mean([iou_1d(p, g) for p, g in zip(top1, gts)]))


def _check_records(records: Sequence[Mapping[str, float]]) -> None:
    if not records:
        raise EmptyPredictions("No pooled saliency records")
    for i, record in enumerate(records):
        for role in ROLES:
            if role not in record:
                raise MissingTrack(f"Record {i} has no pooled value for {role}")


def ordering_accuracy(records: Sequence[Mapping[str, float]]) -> float:
    """Share of records with pooled S_p > S_hn1 > S_hn2 > S_hn3 > S_n; ties break the order."""
    _check_records(records)
    ordered = sum(all(r[a] > r[b] for a, b in zip(ROLES, ROLES[1:])) for r in records)
    return ordered / len(records)


def hierarchy_violation_rate(records: Sequence[Mapping[str, float]]) -> float:
    """Share of adjacent role pairs, over all records, that are not strictly ordered."""
    _check_records(records)
    pairs = list(zip(ROLES, ROLES[1:]))
    violations = sum(not r[a] > r[b] for r in records for a, b in pairs)
    return violations / (len(records) * len(pairs))


def pooled_record(tracks: Mapping[str, np.ndarray], span, q: int = 8) -> Dict[str, float]:
    """Top-k pooled in-span saliency for each role, the same pooling the coarse loss uses."""
    return {role: pooled_pos(tracks[role], span, q)[0] for role in ROLES}


class EvalReport(BaseModel):
    splits: Dict[str, Dict[str, float]] = Field(default_factory=dict)
    composition_miou: Dict[str, float] = Field(default_factory=dict)
    fingerprint: str
    seed: int

    @field_validator("splits")
    @classmethod
    def _rates(cls, value):
        for split, metrics in value.items():
            for name, rate in metrics.items():
                if not 0.0 <= rate <= 1.0:
                    raise ValueError(f"{split}.{name} = {rate} is not a rate")
        return value


# ---------------------------------------------------------------------------
# Evaluation of a trained scorer
# ---------------------------------------------------------------------------

def build_examples(
    samples: Sequence[SyntheticSample],
    hierarchies: Sequence[NegativeHierarchy],
    vocab: Vocabulary,
) -> List[TrainingExample]:
    by_id = {h.query_id: h for h in hierarchies}
    examples = []
    for sample in samples:
        texts = by_id[sample.query.query_id].texts()
        examples.append(TrainingExample(
            sample_id=sample.sample_id,
            features=sample.features,
            span=sample.span,
            roles=tuple(tuple(vocab.encode(tokenize(text))) for text in texts),
        ))
    return examples


def attach_easy(examples: Sequence[TrainingExample], hierarchies: Sequence[NegativeHierarchy]) -> List[TrainingExample]:
    """Attach the easy negative each hierarchy drew from its own split."""
    by_id = {e.sample_id: e for e in examples}
    easy = {h.query_id: h.easy for h in hierarchies}
    return [e.with_easy(by_id[easy[e.sample_id]].roles[0]) for e in examples]


def _clip_bounds(prediction: MomentPrediction, T: int) -> Bounds:
    start, end = prediction.bounds()
    return start * T, end * T


def split_metrics(params: ModelParams, examples: Sequence[TrainingExample], cfg: RunConfig) -> Tuple[Dict[str, float], List[float]]:
    """Metrics for one split, plus each example's top-1 IoU."""
    ranked, gts, records = [], [], []
    for example in _as_five(examples):
        ranked.append([_clip_bounds(p, example.T) for p in predict(params, example.features, example.roles[0])])
        gts.append((float(example.span.start), float(example.span.end)))
        cache = forward_roles(params, example.features, example.roles)
        records.append(pooled_record({role: cache.sal[i] for i, role in enumerate(ROLES)}, example.span, cfg.loss.q))

    metrics = {f"R{cfg.eval.top_n}@{m}": recall_at(ranked, gts, cfg.eval.top_n, m) for m in cfg.eval.iou_thresholds}
    ious = [iou_1d(r[0], g) for r, g in zip(ranked, gts)]
    metrics["mIoU"] = float(np.mean(ious))
    metrics["ordering_accuracy"] = ordering_accuracy(records)
    metrics["hierarchy_violation_rate"] = hierarchy_violation_rate(records)
    return metrics, ious


def _as_five(examples: Sequence[TrainingExample]) -> Sequence[TrainingExample]:
    for example in examples:
        if len(example.roles) != len(ROLES):
            raise ValueError(f"Example {example.sample_id} carries no easy negative")
    return examples


def evaluate(
    params: ModelParams,
    corpus: SyntheticCorpus,
    hierarchies: Mapping[Split, Sequence[NegativeHierarchy]],
    vocab: Vocabulary,
    cfg: RunConfig,
    seed: int,
    splits: Sequence[Split] = TEST_SPLITS,
) -> EvalReport:
    results: Dict[str, Dict[str, float]] = {}
    composition: Dict[str, float] = {}
    for split in splits:
        samples = corpus.samples.get(split, [])
        if not samples or split not in hierarchies:
            continue
        examples = attach_easy(build_examples(samples, hierarchies[split], vocab), hierarchies[split])
        metrics, ious = split_metrics(params, examples, cfg)
        results[split.value] = metrics
        if split is Split.NOVEL_COMPOSITION:
            by_type: Dict[str, List[float]] = {}
            for sample, iou in zip(samples, ious):
                by_type.setdefault(sample.composition_type, []).append(iou)
            composition = {name: float(np.mean(v)) for name, v in sorted(by_type.items())}
        logger.info(f"{split.value}: " + ", ".join(f"{k} {v:.3f}" for k, v in metrics.items()))
    return EvalReport(splits=results, composition_miou=composition, fingerprint=cfg.fingerprint(), seed=seed)


def plot_data(
    params: ModelParams,
    example: TrainingExample,
    texts: Sequence[str],
) -> Dict[str, Any]:
    """Per-clip raw saliency of the five query roles for one sample."""
    cache = forward_roles(params, example.features, example.roles)
    return {
        "sample_id": example.sample_id,
        "T": example.T,
        "span": [example.span.start, example.span.end],
        "queries": dict(zip(ROLES, texts)),
        "tracks": {role: [float(v) for v in cache.sal[i]] for i, role in enumerate(ROLES)},
    }


# ---------------------------------------------------------------------------
# Pipeline: forge -> train -> evaluate
# ---------------------------------------------------------------------------

def train_dictionary(corpus: SyntheticCorpus) -> PrimitiveDictionary:
    return build_dictionary([s.query for s in corpus.samples[Split.TRAIN]])


def make_filler(cfg: RunConfig, dictionary: PrimitiveDictionary, endpoint: Optional[ChatEndpoint] = None) -> NegativeFiller:
    if cfg.forge.filler is not Filler.LLM:
        return LexiconFiller(dictionary, weighted=cfg.forge.weighted)
    if endpoint is None:
        raise ConfigError("forge.filler", "the llm filler needs an endpoint")
    prompt = PromptConfig(
        template=bundled_template(cfg.llm.prompt_version),
        dict_subset_size=cfg.llm.subset_size,
        temperature=cfg.llm.temperature,
        max_retries=cfg.llm.max_retries,
        model=cfg.llm.model,
    )
    return LlmFiller(dictionary, prompt, endpoint)


def open_endpoint(cfg: RunConfig, transport=None) -> ChatEndpoint:
    """Endpoint for the llm section; the API key comes from the environment unless a transport is injected."""
    kwargs = dict(
        model=cfg.llm.model,
        timeout=cfg.llm.timeout,
        backoff_attempts=cfg.llm.backoff_attempts,
        backoff_base=cfg.llm.backoff_base,
        transport=transport,
    )
    if transport is not None:
        return ChatEndpoint(cfg.llm.endpoint, **kwargs)
    return ChatEndpoint.from_env(cfg.llm.endpoint, cfg.llm.api_key_env, **kwargs)


async def forge_splits(
    corpus: SyntheticCorpus,
    cfg: RunConfig,
    seed: int,
    cache_path: Optional[Path] = None,
    endpoint: Optional[ChatEndpoint] = None,
    splits: Optional[Sequence[Split]] = None,
) -> Dict[Split, List[NegativeHierarchy]]:
    """Hierarchies for every split, filled from the train-split dictionary."""
    filler = make_filler(cfg, train_dictionary(corpus), endpoint)
    hierarchies = {}
    for split, samples in corpus.samples.items():
        if len(samples) < 2 or (splits is not None and split not in splits):
            continue
        hierarchies[split] = await forge(
            [s.query for s in samples],
            filler,
            ratios=cfg.forge.ratios,
            seed=seed,
            cache_path=cache_path,
            excluded_classes=cfg.forge.excluded_classes,
            max_in_flight=cfg.forge.max_in_flight,
        )
    return hierarchies


def prepare_hierarchies(
    corpus: SyntheticCorpus,
    cfg: RunConfig,
    seed: int,
    cache_path: Optional[Path] = None,
    splits: Optional[Sequence[Split]] = None,
) -> Dict[Split, List[NegativeHierarchy]]:
    async def _run():
        if cfg.forge.filler is not Filler.LLM:
            return await forge_splits(corpus, cfg, seed, cache_path, splits=splits)
        async with open_endpoint(cfg) as endpoint:
            return await forge_splits(corpus, cfg, seed, cache_path, endpoint, splits)

    return asyncio.run(_run())


def run_pipeline(
    cfg: RunConfig,
    corpus: SyntheticCorpus,
    seed: int,
    out_dir: Union[str, Path],
    hierarchies: Optional[Mapping[Split, Sequence[NegativeHierarchy]]] = None,
) -> Tuple[EvalReport, TrainResult]:
    """Train one scorer on the train split and evaluate it on every test split."""
    out_dir = Path(out_dir)
    if hierarchies is None:
        cache = Path(cfg.forge.cache) if cfg.forge.cache else out_dir / "negatives.jsonl"
        hierarchies = prepare_hierarchies(corpus, cfg, seed, cache)

    vocab = Vocabulary(corpus.vocabulary())
    train_examples = build_examples(corpus.samples[Split.TRAIN], hierarchies[Split.TRAIN], vocab)
    monitor_split = Split(cfg.eval.split)
    monitor = []
    if corpus.samples.get(monitor_split):
        monitor = attach_easy(
            build_examples(corpus.samples[monitor_split], hierarchies[monitor_split], vocab),
            hierarchies[monitor_split],
        )

    def eval_fn(params: ModelParams, epoch: int) -> Dict[str, float]:
        if not monitor:
            return {}
        metrics, _ = split_metrics(params, monitor, cfg)
        return {"mIoU": metrics["mIoU"], "ordering_accuracy": metrics["ordering_accuracy"]}

    result = train(
        train_examples,
        vocab,
        out_dir,
        model_cfg=cfg.train.model_config_for(corpus.config.d_v),
        train_cfg=cfg.train.train_config(seed),
        objective_cfg=cfg.loss.objective(),
        eval_fn=eval_fn,
    )
    report = evaluate(result.params, corpus, hierarchies, vocab, cfg, seed)
    (out_dir / "report.json").write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return report, result


# ---------------------------------------------------------------------------
# Ablation harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationCell:
    """One row of an ablation table: a label and the config keys it overrides."""
    label: str
    overrides: Dict[str, str] = field(default_factory=dict)


def _cell(label: str, **overrides) -> AblationCell:
    return AblationCell(label, {key.replace("__", "."): value for key, value in overrides.items()})


_BASE_ONLY = dict(loss__use_coarse="false", loss__use_fine="false")
_FINE_ONLY = dict(loss__use_coarse="false", loss__use_fine="true")
_FULL = dict(loss__use_coarse="true", loss__use_fine="true", loss__use_intra="true", loss__use_inter="true")


def _fine_rows() -> List[AblationCell]:
    rows = [_cell("base", **_BASE_ONLY)]
    for terms in ("1,0,0,0", "1,1,0,0", "1,1,1,0", "1,1,1,1"):
        flags = ", ".join("true" if bit == "1" else "false" for bit in terms.split(","))
        rows.append(_cell(f"fr[{terms}]", **_FINE_ONLY, loss__fine_terms=flags))
    for terms in ("1,1,0,0", "1,1,1,0", "1,1,0,1", "1,1,1,1"):
        flags = ", ".join("true" if bit == "1" else "false" for bit in terms.split(","))
        rows.append(_cell(f"fr[{terms}]+cr", **_FULL, loss__fine_terms=flags))
    return rows


PRESETS: Dict[str, List[AblationCell]] = {
    "coarse": [
        _cell("base", **_BASE_ONLY),
        _cell("base+intra*", loss__use_coarse="true", loss__use_intra="true", loss__use_inter="false",
              loss__replace_saliency="true", loss__use_fine="false"),
        _cell("base+inter", loss__use_coarse="true", loss__use_intra="false", loss__use_inter="true",
              loss__use_fine="false"),
        _cell("base+both", loss__use_coarse="true", loss__use_intra="true", loss__use_inter="true",
              loss__replace_saliency="true", loss__use_fine="false"),
    ],
    "fine": _fine_rows(),
    "modes": [
        _cell("relative", **_FULL, loss__mode="relative", loss__margins="0.25, 0.25, 0.25, 0.25"),
        _cell("absolute", **_FULL, loss__mode="absolute", loss__margins="0.1, 0.3, 0.5, 0.7"),
    ],
    "coarse_margins": [
        _cell(f"h1={h1},h2={h2}", **_FULL, loss__h1=h1, loss__h2=h2)
        for h1, h2 in (("0.2", "1.0"), ("0.5", "1.0"), ("1.0", "1.0"), ("1.0", "2.0"))
    ],
    "fine_margins": [
        _cell(f"m={margins}", **_FULL, loss__margins=margins)
        for margins in (
            "0.1, 0.1, 0.1, 0.1", "0.2, 0.2, 0.2, 0.2", "0.25, 0.25, 0.25, 0.25", "0.5, 0.5, 0.5, 0.5",
            "0.05, 0.05, 0.15, 0.25", "0.05, 0.1, 0.15, 0.2", "0.1, 0.3, 0.5, 0.7", "0.25, 0.5, 0.75, 1.0",
        )
    ],
    "q": [_cell(f"q={q}", **_FULL, loss__q=q) for q in ("1", "4", "8", "16")],
    "ratios": [
        _cell(f"r={ratios}", **_FULL, forge__ratios=ratios)
        for ratios in ("0.1, 0.3, 0.5", "0.25, 0.5, 0.75", "0.3, 0.6, 0.9")
    ],
    "weights": [
        _cell(f"alpha={a},beta={b}", **_FULL, loss__alpha=a, loss__beta=b)
        for a, b in itertools.product(("0.5", "1.0", "2.0"), repeat=2)
    ],
    "classes": [
        _cell("all primitives", **_FULL, forge__excluded_classes=""),
        _cell("w/o prep+adv", **_FULL, forge__excluded_classes="PREP, ADV"),
    ],
    "filler": [
        _cell("lexicon", **_FULL, forge__filler="lexicon"),
        _cell("llm", **_FULL, forge__filler="llm"),
    ],
}


def resolve_grid(grid: Union[str, Sequence[AblationCell]]) -> List[AblationCell]:
    if isinstance(grid, str):
        cells: List[AblationCell] = []
        for name in (part.strip() for part in grid.split(",") if part.strip()):
            if name not in PRESETS:
                raise ConfigError("ablate.grid", f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
            cells.extend(PRESETS[name])
        return cells
    return list(grid)


def _cell_config(base_cfg: RunConfig, cell: AblationCell) -> RunConfig:
    flat = to_flat(base_cfg)
    flat.update(cell.overrides)
    return build_config(flat)


def _skip_reason(cfg: RunConfig) -> Optional[str]:
    if cfg.forge.filler is Filler.LLM and not os.getenv(cfg.llm.api_key_env):
        return f"llm filler needs ${cfg.llm.api_key_env}"
    return None


def _init_worker() -> None:
    logging.basicConfig(
        level=logging.WARNING,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )


def _run_cell(task: Tuple[int, AblationCell, Dict[str, str], str, int, str]) -> Dict[str, Any]:
    """Worker entry point; must stay importable at module level for the process pool."""
    index, cell, flat, corpus_dir, seed, out_root = task
    outcome: Dict[str, Any] = {"index": index, "label": cell.label, "seed": seed}
    try:
        cfg = build_config(flat)
        corpus = load_corpus(corpus_dir)
        out_dir = Path(out_root) / f"cell{index:02d}-seed{seed}"
        report, _ = run_pipeline(cfg, corpus, seed, out_dir)
        outcome["report"] = report.model_dump(mode="json")
    except (NegrankError, ValueError, ArithmeticError, OSError) as e:
        outcome["error"] = f"{type(e).__name__}: {e}"
    return outcome


@dataclass
class AblationTable:
    rows: List[Dict[str, Any]]
    seeds: Tuple[int, ...]

    def to_json(self) -> str:
        return json.dumps({"seeds": list(self.seeds), "rows": self.rows}, indent=2, sort_keys=True) + "\n"

    def render(self) -> str:
        columns = sorted({
            f"{split}/{metric}"
            for row in self.rows
            for split, metrics in row.get("mean", {}).items()
            for metric in metrics
        })
        width = max([len("config")] + [len(row["label"]) for row in self.rows])
        lines = [" | ".join([f"{'config':<{width}}"] + [f"{c:>32}" for c in columns])]
        lines.append("-" * len(lines[0]))
        for row in self.rows:
            cells = [f"{row['label']:<{width}}"]
            for column in columns:
                split, metric = column.split("/", 1)
                mean = row.get("mean", {}).get(split, {}).get(metric)
                std = row.get("std", {}).get(split, {}).get(metric)
                cells.append(f"{_missing(row) if mean is None else f'{100 * mean:.2f} ± {100 * std:.2f}':>32}")
            lines.append(" | ".join(cells))
        return "\n".join(lines) + "\n"


def _missing(row: Dict[str, Any]) -> str:
    return "SKIPPED" if "skipped" in row else "FAILED"


def _aggregate(cell: AblationCell, outcomes: Sequence[Dict[str, Any]]) -> Dict[str, Any]:
    row: Dict[str, Any] = {"label": cell.label, "overrides": dict(sorted(cell.overrides.items()))}
    failures = {str(o["seed"]): o["error"] for o in outcomes if "error" in o}
    reports = [o["report"] for o in outcomes if "report" in o]
    if failures:
        row["failed"] = failures
        return row
    mean: Dict[str, Dict[str, float]] = {}
    std: Dict[str, Dict[str, float]] = {}
    for split in reports[0]["splits"]:
        mean[split], std[split] = {}, {}
        for metric in reports[0]["splits"][split]:
            values = np.array([r["splits"][split][metric] for r in reports])
            mean[split][metric] = float(values.mean())
            std[split][metric] = float(values.std())
    row["mean"], row["std"] = mean, std
    return row


def ablate(
    grid: Union[str, Sequence[AblationCell]],
    corpus_dir: Union[str, Path],
    seeds: Sequence[int],
    base_cfg: RunConfig,
    out_dir: Union[str, Path],
    workers: int = 1,
) -> AblationTable:
    """
    Train and evaluate every (cell, seed) pair and aggregate mean and std over seeds.

    A cell whose run raises is marked failed in the table; the other cells continue.
    LLM-filler cells are skipped when no API key is configured.
    """
    cells = resolve_grid(grid)
    if not cells:
        raise EmptyGrid("Ablation grid has no cells")
    if not seeds:
        raise EmptyGrid("Ablation needs at least one seed")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    tasks = []
    skipped: Dict[int, str] = {}
    for index, cell in enumerate(cells):
        cfg = _cell_config(base_cfg, cell)
        reason = _skip_reason(cfg)
        if reason is not None:
            logger.warning(f"Skipping ablation cell {cell.label!r}: {reason}")
            skipped[index] = reason
            continue
        flat = to_flat(cfg)
        for seed in seeds:
            tasks.append((index, cell, flat, str(corpus_dir), int(seed), str(out_dir)))
    logger.info(f"Ablation: {len(cells)} cells x {len(seeds)} seeds with {workers} worker(s)")

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker) as pool:
            outcomes = list(pool.map(_run_cell, tasks))
    else:
        outcomes = [_run_cell(task) for task in tasks]

    rows = []
    for index, cell in enumerate(cells):
        if index in skipped:
            rows.append({"label": cell.label, "overrides": dict(sorted(cell.overrides.items())), "skipped": skipped[index]})
            continue
        cell_outcomes = sorted((o for o in outcomes if o["index"] == index), key=lambda o: o["seed"])
        row = _aggregate(cell, cell_outcomes)
        if "failed" in row:
            logger.error(f"Ablation cell {cell.label!r} failed: {row['failed']}")
        else:
            logger.info(f"Ablation cell {cell.label!r} done")
        rows.append(row)

    table = AblationTable(rows=rows, seeds=tuple(int(s) for s in seeds))
    (out_dir / "ablation.json").write_text(table.to_json(), encoding="utf-8")
    (out_dir / "ablation.txt").write_text(table.render(), encoding="utf-8")
    return table
