"""
Hierarchical hard-negative construction.

A query's primitive tokens are masked progressively (VERB -> NOUN -> ADJ -> PREP -> ADV,
left to right inside a class, the subject last) and each masked slot is refilled with
a same-class word. Three increasing ratios give three nested levels hn1 < hn2 < hn3;
an easy negative is another query of the same batch.
"""

import asyncio
import logging
import zlib
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from typing_extensions import override

from .corpus import Filler, NegativeLevel, NegativeRecord, load_negatives, save_negatives
from .errors import BadRatios, BatchTooSmall, ExhaustedClass, NoPrimitives
from .tagger import PRIMITIVE_CLASSES, PrimitiveClass, PrimitiveDictionary, TaggedQuery

logger = logging.getLogger(__name__)

LEVELS: Tuple[NegativeLevel, ...] = (NegativeLevel.HN1, NegativeLevel.HN2, NegativeLevel.HN3)


@dataclass(frozen=True)
class MaskPlan:
    query_id: str
    ratio: float
    masked_positions: Tuple[int, ...]
    masked_classes: Tuple[PrimitiveClass, ...]
    level: NegativeLevel = NegativeLevel.HN1

    def __post_init__(self):
        if len(self.masked_positions) != len(self.masked_classes):
            raise ValueError("masked_positions and masked_classes must be parallel")

    @property
    def count(self) -> int:
        return len(self.masked_positions)

    def class_at(self, position: int) -> PrimitiveClass:
        return self.masked_classes[self.masked_positions.index(position)]


def mask_count(ratio: float, primitives: int) -> int:
    """max(1, round(ratio * P)) with half-up rounding."""
    scaled = (Decimal(str(ratio)) * primitives).quantize(Decimal(1), rounding=ROUND_HALF_UP)
    return max(1, int(scaled))


def _maskable_order(q: TaggedQuery, excluded_classes: Iterable[PrimitiveClass] = ()) -> List[int]:
    excluded = {PrimitiveClass(c) for c in excluded_classes}
    order = []
    for cls in PRIMITIVE_CLASSES:
        if cls in excluded:
            continue
        order.extend(i for i, tag in enumerate(q.tags) if tag is cls and i != q.subject_index)
    return order


def plan_masks(
    q: TaggedQuery,
    ratio: float,
    excluded_classes: Iterable[PrimitiveClass] = (),
    level: NegativeLevel = NegativeLevel.HN1,
) -> MaskPlan:
    order = _maskable_order(q, excluded_classes)
    if order:
        positions = order[: mask_count(ratio, len(order))]
    elif q.subject_index is not None:
        # only the subject is left
        positions = [q.subject_index]
    else:
        raise NoPrimitives(f"Query {q.query_id!r} has no maskable primitive token")
    return MaskPlan(
        query_id=q.query_id,
        ratio=float(ratio),
        masked_positions=tuple(positions),
        masked_classes=tuple(q.tags[i] for i in positions),
        level=level,
    )


def check_ratios(ratios: Sequence[float]) -> Tuple[float, float, float]:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != len(LEVELS):
        raise BadRatios(f"Expected {len(LEVELS)} masking ratios, got {len(ratios)}")
    if any(not 0.0 < r < 1.0 for r in ratios):
        raise BadRatios(f"Masking ratios must lie in (0, 1): {ratios}")
    if any(b <= a for a, b in zip(ratios, ratios[1:])):
        raise BadRatios(f"Masking ratios must be strictly increasing: {ratios}")
    return ratios


def build_hierarchy(
    q: TaggedQuery,
    ratios: Sequence[float] = (0.25, 0.5, 0.75),
    excluded_classes: Iterable[PrimitiveClass] = (),
) -> Tuple[MaskPlan, MaskPlan, MaskPlan]:
    ratios = check_ratios(ratios)
    excluded = tuple(excluded_classes)
    return tuple(
        plan_masks(q, ratio, excluded, level)
        for ratio, level in zip(ratios, LEVELS)
    )


def level_seed(seed: int, query_id: str, level: NegativeLevel) -> np.random.SeedSequence:
    """Independent stream per (query, level) derived from one base seed."""
    return np.random.SeedSequence([int(seed), zlib.crc32(query_id.encode("utf-8")), LEVELS.index(level)])


def _replace(q: TaggedQuery, replacements: Dict[int, str]) -> str:
    tokens = list(q.tokens)
    for position, word in replacements.items():
        tokens[position] = word
    return " ".join(tokens)


def fill_lexicon(
    plan: MaskPlan,
    q: TaggedQuery,
    dictionary: PrimitiveDictionary,
    seed,
    weighted: bool = False,
) -> NegativeRecord:
    """
    Replace every masked token with a different same-class dictionary word.
    Sampling is uniform unless `weighted`, in which case it follows dictionary counts.
    """
    rng = np.random.default_rng(seed)
    replacements = {}
    for position in sorted(plan.masked_positions):
        cls = plan.class_at(position)
        original = q.tokens[position]
        counts = dictionary.counts(cls)
        candidates = [word for word in dictionary.candidates(cls) if word != original]
        if not candidates:
            raise ExhaustedClass(cls.value)
        if weighted:
            freq = np.array([counts[word] for word in candidates], dtype=np.float64)
            choice = rng.choice(len(candidates), p=freq / freq.sum())
        else:
            choice = rng.integers(len(candidates))
        replacements[position] = candidates[int(choice)]

    return NegativeRecord(
        query_id=q.query_id,
        level=plan.level,
        masked_positions=sorted(plan.masked_positions),
        negative_text=_replace(q, replacements),
        filler=Filler.LEXICON,
        replacements=replacements,
    )


def sample_easy_negative(batch: Sequence[str], index: int, seed) -> str:
    if len(batch) < 2:
        raise BatchTooSmall(f"An easy negative needs a batch of at least 2, got {len(batch)}")
    others = [query_id for i, query_id in enumerate(batch) if i != index]
    rng = np.random.default_rng(seed)
    return others[int(rng.integers(len(others)))]


@dataclass(frozen=True)
class NegativeHierarchy:
    positive: TaggedQuery
    hn: Tuple[NegativeRecord, NegativeRecord, NegativeRecord]
    easy: str

    def __post_init__(self):
        if self.easy == self.positive.query_id:
            raise ValueError(f"Easy negative of {self.easy!r} is the query itself")
        for inner, outer in zip(self.hn, self.hn[1:]):
            if not set(inner.masked_positions) <= set(outer.masked_positions):
                raise ValueError(f"Negatives of {self.positive.query_id!r} are not nested")

    @property
    def query_id(self) -> str:
        return self.positive.query_id

    def texts(self) -> Tuple[str, str, str, str]:
        """(positive, hn1, hn2, hn3) query texts."""
        return (self.positive.text,) + tuple(record.negative_text for record in self.hn)


# ---------------------------------------------------------------------------
# Fillers and the batch driver
# ---------------------------------------------------------------------------

class NegativeFiller:
    """Turns one mask plan into a negative record."""

    filler = Filler.LEXICON

    async def fill(self, plan: MaskPlan, q: TaggedQuery, seed) -> NegativeRecord:
        raise NotImplementedError


class LexiconFiller(NegativeFiller):
    filler = Filler.LEXICON

    def __init__(self, dictionary: PrimitiveDictionary, weighted: bool = False):
        self.dictionary = dictionary
        self.weighted = weighted

    @override
    async def fill(self, plan: MaskPlan, q: TaggedQuery, seed) -> NegativeRecord:
        return fill_lexicon(plan, q, self.dictionary, seed, weighted=self.weighted)


def _cache_hit(record: NegativeRecord, q: TaggedQuery, plan: MaskPlan) -> bool:
    """A cached record is reusable only if it masks the same slots of this very query."""
    if record.masked_positions != sorted(plan.masked_positions):
        return False
    tokens = record.negative_text.split()
    if len(tokens) != len(q.tokens):
        return False
    masked = set(plan.masked_positions)
    return all(new == old for i, (new, old) in enumerate(zip(tokens, q.tokens)) if i not in masked)


async def forge(
    queries: Sequence[TaggedQuery],
    filler: NegativeFiller,
    ratios: Sequence[float] = (0.25, 0.5, 0.75),
    seed: int = 0,
    cache_path: Optional[Union[str, Path]] = None,
    excluded_classes: Iterable[PrimitiveClass] = (),
    max_in_flight: int = 4,
) -> List[NegativeHierarchy]:
    """
    Build a negative hierarchy for every query, reusing cached records.

    Fills for distinct queries run concurrently up to `max_in_flight`; new records are
    appended to the cache one query at a time. Cached records that no longer match their
    query are regenerated and replaced in the cache file.
    """
    if len(queries) < 2:
        raise BatchTooSmall("Forging needs at least two queries for easy negatives")
    ratios = check_ratios(ratios)
    excluded = tuple(excluded_classes)
    cache: Dict[Tuple[str, str, str], NegativeRecord] = {}
    if cache_path is not None and Path(cache_path).is_file():
        cache = {record.key: record for record in load_negatives(cache_path)}
        logger.info(f"Negative cache {cache_path}: {len(cache)} records")

    semaphore = asyncio.Semaphore(max_in_flight)
    cache_lock = asyncio.Lock()
    stats = {"hits": 0, "misses": 0, "fallbacks": 0}
    stale: Dict[Tuple[str, str, str], NegativeRecord] = {}
    batch_ids = [q.query_id for q in queries]

    async def forge_one(index: int, q: TaggedQuery) -> NegativeHierarchy:
        plans = build_hierarchy(q, ratios, excluded)
        records, fresh = [], []
        async with semaphore:
            for plan in plans:
                cached = cache.get((q.query_id, plan.level.value, filler.filler.value))
                if cached is not None and _cache_hit(cached, q, plan):
                    stats["hits"] += 1
                    records.append(cached)
                    continue
                if cached is not None:
                    logger.warning(f"Stale cache entry for {q.query_id}/{plan.level.value}, regenerating")
                record = await filler.fill(plan, q, level_seed(seed, q.query_id, plan.level))
                stats["misses"] += 1
                stats["fallbacks"] += int(record.fallback)
                records.append(record)
                if cached is None:
                    fresh.append(record)
                else:
                    stale[record.key] = record
        if cache_path is not None and fresh:
            async with cache_lock:
                await asyncio.to_thread(save_negatives, fresh, cache_path, True)
        easy = sample_easy_negative(batch_ids, index, np.random.SeedSequence([int(seed), index]))
        return NegativeHierarchy(positive=q, hn=tuple(records), easy=easy)

    hierarchies = await asyncio.gather(*(forge_one(i, q) for i, q in enumerate(queries)))
    if cache_path is not None and stale:
        kept = [stale.pop(record.key, record) for record in load_negatives(cache_path)]
        save_negatives(kept + list(stale.values()), cache_path)
        logger.info(f"Replaced stale entries in {cache_path}")
    logger.info(
        f"Forged {len(hierarchies)} hierarchies with {filler.filler.value} filler "
        f"(cache hits {stats['hits']}, misses {stats['misses']}, fallbacks {stats['fallbacks']})"
    )
    return list(hierarchies)


def forge_lexicon(
    queries: Sequence[TaggedQuery],
    dictionary: PrimitiveDictionary,
    ratios: Sequence[float] = (0.25, 0.5, 0.75),
    seed: int = 0,
    cache_path: Optional[Union[str, Path]] = None,
    weighted: bool = False,
    excluded_classes: Iterable[PrimitiveClass] = (),
) -> List[NegativeHierarchy]:
    return asyncio.run(forge(
        queries,
        LexiconFiller(dictionary, weighted=weighted),
        ratios=ratios,
        seed=seed,
        cache_path=cache_path,
        excluded_classes=excluded_classes,
    ))
