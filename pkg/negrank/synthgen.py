"""
Synthetic compositional grounding corpus with a known semantic oracle.

Every sample is one event rendered as
"person <adverb> <verb> the <adjective> <object_noun> <preposition> the <second_noun>";
in-span clips carry the sum of the event's word embeddings plus Gaussian noise,
outside clips carry distractor events. Held-out word pairs and held-out words give the
novel_composition and novel_word splits.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .corpus import Annotation, ClipSpan, Split, load_annotations, save_annotations
from .errors import BadWeights, InsufficientVocab, IoFailure, MissingFile
from .tagger import PRIMITIVE_CLASSES, PrimitiveClass, TaggedQuery, TagLexicon

logger = logging.getLogger(__name__)

SLOTS = ("verb", "object_noun", "adjective", "preposition", "second_noun", "adverb")
SLOT_CLASS = {
    "verb": PrimitiveClass.VERB,
    "object_noun": PrimitiveClass.NOUN,
    "adjective": PrimitiveClass.ADJ,
    "preposition": PrimitiveClass.PREP,
    "second_noun": PrimitiveClass.NOUN,
    "adverb": PrimitiveClass.ADV,
}
# token position of each slot in the rendered template
SLOT_POSITION = {"adverb": 1, "verb": 2, "adjective": 4, "object_noun": 5, "preposition": 6, "second_noun": 8}
COMPOSITION_TYPES = {
    "verb-noun": ("verb", "object_noun"),
    "adj-noun": ("adjective", "object_noun"),
    "verb-adv": ("verb", "adverb"),
    "prep-noun": ("preposition", "second_noun"),
    "noun-noun": ("object_noun", "second_noun"),
}
TEST_SPLITS = (Split.TEST_TRIVIAL, Split.NOVEL_COMPOSITION, Split.NOVEL_WORD)

FEATURES_FILE = "features_{split}.npy"
ANNOTATIONS_FILE = "annotations.jsonl"
SIDECAR_FILE = "synth.json"
EMBEDDINGS_FILE = "word_embeddings.npy"


class SynthConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    vocab_per_class: int = Field(12, description="Words per primitive class (nouns serve both noun slots)")
    novel_words_per_class: int = Field(2, ge=1, description="Words per class kept out of train")
    holdout_fraction: float = Field(0.2, gt=0, lt=0.5, description="Share of seen word pairs held out per composition type")
    composition_types: Tuple[str, ...] = ("verb-noun",)
    n_train: int = Field(500, ge=2)
    n_test: int = Field(100, ge=1, description="Samples per test split")
    T: int = Field(32, ge=4, description="Clips per video")
    d_v: int = Field(32, ge=1)
    noise_sigma: float = Field(0.3, ge=0)
    min_span: int = Field(4, ge=1)
    max_span: int = Field(12, ge=1)
    n_distractors: int = Field(2, ge=1)
    clip_len: float = Field(2.0, gt=0, description="Seconds per clip")

    @field_validator("composition_types", mode="before")
    @classmethod
    def _known_types(cls, value):
        if value is None:
            value = []
        if isinstance(value, str):
            value = [part.strip() for part in value.split(",") if part.strip()]
        unknown = [name for name in value if name not in COMPOSITION_TYPES]
        if unknown or not value:
            raise ValueError(f"composition types must be a non-empty subset of {sorted(COMPOSITION_TYPES)}")
        return tuple(value)


@dataclass(frozen=True)
class EventTuple:
    verb: int
    object_noun: int
    adjective: int
    preposition: int
    second_noun: int
    adverb: int

    def slot(self, name: str) -> int:
        return getattr(self, name)


@dataclass
class SyntheticSample:
    sample_id: str
    split: Split
    features: np.ndarray
    span: ClipSpan
    query: TaggedQuery
    event: EventTuple
    distractors: List[EventTuple]
    composition_type: Optional[str] = None


@dataclass
class SyntheticCorpus:
    config: SynthConfig
    seed: int
    vocab: Dict[PrimitiveClass, List[str]]
    held_out_words: Dict[PrimitiveClass, List[str]]
    held_out_pairs: Dict[str, List[Tuple[int, int]]]
    embeddings: Dict[str, np.ndarray]
    samples: Dict[Split, List[SyntheticSample]] = field(default_factory=dict)

    def word(self, slot: str, index: int) -> str:
        return self.vocab[SLOT_CLASS[slot]][index]

    def words(self, event: EventTuple) -> Dict[str, str]:
        return {slot: self.word(slot, event.slot(slot)) for slot in SLOTS}

    def event_embedding(self, event: EventTuple) -> np.ndarray:
        return sum(self.embeddings[word] for word in self.words(event).values())

    def vocabulary(self) -> List[str]:
        """Every token any rendered query can contain, in a fixed order."""
        words = ["person", "the"]
        for cls in PRIMITIVE_CLASSES:
            words.extend(w for w in self.vocab[cls] if w not in words)
        return words

    def parse_event(self, tokens: Sequence[str]) -> EventTuple:
        """Recover the event of a template-shaped query (e.g. a forged negative)."""
        return EventTuple(**{
            slot: self.vocab[SLOT_CLASS[slot]].index(tokens[SLOT_POSITION[slot]])
            for slot in SLOTS
        })

    def all_samples(self) -> List[SyntheticSample]:
        return [sample for split in Split for sample in self.samples.get(split, [])]


def render_query(words: Mapping[str, str], query_id: str) -> TaggedQuery:
    tokens = (
        "person", words["adverb"], words["verb"], "the", words["adjective"],
        words["object_noun"], words["preposition"], "the", words["second_noun"],
    )
    tags = (
        PrimitiveClass.NOUN, PrimitiveClass.ADV, PrimitiveClass.VERB, PrimitiveClass.OTHER, PrimitiveClass.ADJ,
        PrimitiveClass.NOUN, PrimitiveClass.PREP, PrimitiveClass.OTHER, PrimitiveClass.NOUN,
    )
    return TaggedQuery(query_id=query_id, tokens=tokens, tags=tags, subject_index=0)


def render_features(
    event_embedding: np.ndarray,
    distractor_embeddings: Sequence[np.ndarray],
    span: ClipSpan,
    T: int,
    sigma: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """In-span clips: event embedding + noise; outside clips cycle through the distractors in runs."""
    d_v = event_embedding.shape[0]
    base = np.empty((T, d_v))
    outside = [t for t in range(T) if not span.start <= t < span.end]
    run = max(1, -(-len(outside) // len(distractor_embeddings)))
    for k, t in enumerate(outside):
        base[t] = distractor_embeddings[min(k // run, len(distractor_embeddings) - 1)]
    base[span.start:span.end] = event_embedding
    return base + rng.normal(0.0, sigma, (T, d_v))


def semantic_overlap(q1: EventTuple, q2: EventTuple, weights: Optional[Mapping] = None) -> float:
    """
    Weighted share of primitive classes on which two events agree. The noun weight is
    split evenly between the object and second noun slots.
    """
    if weights is None:
        weights = {cls: 1.0 / len(PRIMITIVE_CLASSES) for cls in PRIMITIVE_CLASSES}
    weights = {PrimitiveClass(k): float(v) for k, v in weights.items()}
    if set(weights) != set(PRIMITIVE_CLASSES) or any(w < 0 for w in weights.values()):
        raise BadWeights(f"Weights must be nonnegative over {[c.value for c in PRIMITIVE_CLASSES]}")
    if abs(sum(weights.values()) - 1.0) > 1e-9:
        raise BadWeights(f"Weights sum to {sum(weights.values())}, expected 1")

    agreement = {cls: [] for cls in PRIMITIVE_CLASSES}
    for slot in SLOTS:
        agreement[SLOT_CLASS[slot]].append(float(q1.slot(slot) == q2.slot(slot)))
    return float(sum(weights[cls] * np.mean(agreement[cls]) for cls in PRIMITIVE_CLASSES))


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _word_banks(lexicon: TagLexicon, cfg: SynthConfig, rng: np.random.Generator) -> Dict[PrimitiveClass, List[str]]:
    by_class: Dict[PrimitiveClass, List[str]] = {cls: [] for cls in PRIMITIVE_CLASSES}
    for word, cls in lexicon.entries().items():
        if cls in by_class:
            by_class[cls].append(word)
    verbs = set(by_class[PrimitiveClass.VERB])
    pools = {
        # third-person forms only, to fit the template
        PrimitiveClass.VERB: sorted(
            w for w in verbs
            if any(w in (b + "s", b + "es", b[:-1] + "ies") for b in verbs if b != w)
        ),
        PrimitiveClass.NOUN: sorted(w for w in by_class[PrimitiveClass.NOUN] if w != "person"),
        PrimitiveClass.ADJ: sorted(by_class[PrimitiveClass.ADJ]),
        PrimitiveClass.PREP: sorted(by_class[PrimitiveClass.PREP]),
        PrimitiveClass.ADV: sorted(w for w in by_class[PrimitiveClass.ADV] if w.endswith("ly")),
    }
    banks = {}
    for cls in PRIMITIVE_CLASSES:
        pool = pools[cls]
        if cfg.vocab_per_class < 4 or cfg.vocab_per_class > len(pool):
            raise InsufficientVocab(
                f"{cls.value}: need between 4 and {len(pool)} words per class, got {cfg.vocab_per_class}"
            )
        if cfg.novel_words_per_class > cfg.vocab_per_class - 3:
            raise InsufficientVocab(f"{cls.value}: too many novel words for a vocabulary of {cfg.vocab_per_class}")
        picked = sorted(int(i) for i in rng.choice(len(pool), size=cfg.vocab_per_class, replace=False))
        banks[cls] = [pool[i] for i in picked]
    return banks


class _Sampler:
    """Event sampling under the held-out constraints."""

    def __init__(self, cfg: SynthConfig, seen: Dict[PrimitiveClass, List[int]], held_out_pairs: Dict[str, set]):
        self.cfg = cfg
        self.seen = seen
        self.held_out_pairs = held_out_pairs

    def random_event(self, rng: np.random.Generator, fixed: Optional[Dict[str, int]] = None) -> EventTuple:
        values = dict(fixed or {})
        for slot in SLOTS:
            if slot in values:
                continue
            choices = self.seen[SLOT_CLASS[slot]]
            while True:
                value = choices[int(rng.integers(len(choices)))]
                if slot == "second_noun" and value == values.get("object_noun"):
                    continue
                if slot == "object_noun" and value == values.get("second_noun"):
                    continue
                break
            values[slot] = value
        return EventTuple(**values)

    def pairs_of(self, event: EventTuple) -> Dict[str, Tuple[int, int]]:
        return {name: (event.slot(a), event.slot(b)) for name, (a, b) in COMPOSITION_TYPES.items()}

    def held_out_in(self, event: EventTuple) -> List[str]:
        pairs = self.pairs_of(event)
        return [name for name in self.cfg.composition_types if pairs[name] in self.held_out_pairs[name]]


def _held_out_pairs(cfg: SynthConfig, seen: Dict[PrimitiveClass, List[int]], rng: np.random.Generator) -> Dict[str, List[Tuple[int, int]]]:
    held = {}
    for name in cfg.composition_types:
        a, b = COMPOSITION_TYPES[name]
        candidates = [
            (x, y) for x, y in product(seen[SLOT_CLASS[a]], seen[SLOT_CLASS[b]])
            if not (SLOT_CLASS[a] is SLOT_CLASS[b] and x == y)
        ]
        count = max(1, int(round(cfg.holdout_fraction * len(candidates))))
        picked = sorted(int(i) for i in rng.choice(len(candidates), size=count, replace=False))
        held[name] = [candidates[i] for i in picked]
    return held


def _random_span(cfg: SynthConfig, rng: np.random.Generator) -> ClipSpan:
    longest = min(cfg.max_span, cfg.T - 1)
    shortest = min(cfg.min_span, longest)
    length = int(rng.integers(shortest, longest + 1))
    start = int(rng.integers(0, cfg.T - length + 1))
    return ClipSpan(start, start + length)


def gen_corpus(cfg: SynthConfig = SynthConfig(), seed: int = 0, lexicon: Optional[TagLexicon] = None) -> SyntheticCorpus:
    """Seeded corpus with train / test_trivial / novel_composition / novel_word splits."""
    lexicon = lexicon or TagLexicon.bundled()
    root = np.random.SeedSequence([int(seed), 0])
    setup_rng = np.random.default_rng(root)

    banks = _word_banks(lexicon, cfg, setup_rng)
    novel: Dict[PrimitiveClass, List[int]] = {}
    seen: Dict[PrimitiveClass, List[int]] = {}
    for cls in PRIMITIVE_CLASSES:
        held = sorted(int(i) for i in setup_rng.choice(cfg.vocab_per_class, size=cfg.novel_words_per_class, replace=False))
        novel[cls] = held
        seen[cls] = [i for i in range(cfg.vocab_per_class) if i not in held]
    held_pairs = _held_out_pairs(cfg, seen, setup_rng)
    sampler = _Sampler(cfg, seen, {name: set(pairs) for name, pairs in held_pairs.items()})

    all_words = sorted({word for words in banks.values() for word in words})
    embeddings = {word: setup_rng.normal(0.0, 1.0 / np.sqrt(len(SLOTS)), cfg.d_v) for word in all_words}

    corpus = SyntheticCorpus(
        config=cfg,
        seed=int(seed),
        vocab=banks,
        held_out_words={cls: [banks[cls][i] for i in novel[cls]] for cls in PRIMITIVE_CLASSES},
        held_out_pairs=held_pairs,
        embeddings=embeddings,
    )

    train_pairs = {name: set() for name in COMPOSITION_TYPES}
    for split_index, split in enumerate(Split):
        count = cfg.n_train if split is Split.TRAIN else cfg.n_test
        samples = []
        for i in range(count):
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), split_index + 1, i]))
            composition_type = None
            if split is Split.TRAIN:
                event = sampler.random_event(rng)
                while sampler.held_out_in(event):
                    event = sampler.random_event(rng)
                for name, pair in sampler.pairs_of(event).items():
                    train_pairs[name].add(pair)
            elif split is Split.TEST_TRIVIAL:
                event = _trivial_event(sampler, rng, train_pairs, cfg, corpus)
            elif split is Split.NOVEL_COMPOSITION:
                composition_type = cfg.composition_types[i % len(cfg.composition_types)]
                event = _novel_composition_event(sampler, rng, composition_type, held_pairs[composition_type])
            else:
                event = _novel_word_event(sampler, rng, novel)
            samples.append(_make_sample(corpus, split, i, event, composition_type, sampler, rng))
        corpus.samples[split] = samples
        logger.info(f"Generated {len(samples)} {split.value} samples")
    return corpus


def _trivial_event(sampler: _Sampler, rng, train_pairs, cfg: SynthConfig, corpus: SyntheticCorpus) -> EventTuple:
    for _ in range(1000):
        event = sampler.random_event(rng)
        pairs = sampler.pairs_of(event)
        if all(pairs[name] in train_pairs[name] for name in cfg.composition_types):
            return event
    train = corpus.samples[Split.TRAIN]
    return train[int(rng.integers(len(train)))].event


def _novel_composition_event(sampler: _Sampler, rng, composition_type: str, pairs: List[Tuple[int, int]]) -> EventTuple:
    a, b = COMPOSITION_TYPES[composition_type]
    x, y = pairs[int(rng.integers(len(pairs)))]
    for _ in range(1000):
        event = sampler.random_event(rng, fixed={a: x, b: y})
        if sampler.held_out_in(event) == [composition_type]:
            return event
    return sampler.random_event(rng, fixed={a: x, b: y})


def _novel_word_event(sampler: _Sampler, rng, novel: Dict[PrimitiveClass, List[int]]) -> EventTuple:
    slot = SLOTS[int(rng.integers(len(SLOTS)))]
    choices = novel[SLOT_CLASS[slot]]
    return sampler.random_event(rng, fixed={slot: choices[int(rng.integers(len(choices)))]})


def _make_sample(corpus: SyntheticCorpus, split: Split, index: int, event: EventTuple, composition_type, sampler: _Sampler, rng) -> SyntheticSample:
    cfg = corpus.config
    sample_id = f"{split.value}_{index:05d}"
    span = _random_span(cfg, rng)
    distractors = [sampler.random_event(rng) for _ in range(cfg.n_distractors)]
    features = render_features(
        corpus.event_embedding(event),
        [corpus.event_embedding(d) for d in distractors],
        span, cfg.T, cfg.noise_sigma, rng,
    )
    return SyntheticSample(
        sample_id=sample_id,
        split=split,
        features=features,
        span=span,
        query=render_query(corpus.words(event), sample_id),
        event=event,
        distractors=distractors,
        composition_type=composition_type,
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def write_corpus(corpus: SyntheticCorpus, out_dir: Union[str, Path]) -> Path:
    """Annotations + per-split feature arrays + a JSON sidecar with events and vocabularies."""
    out_dir = Path(out_dir)
    cfg = corpus.config
    duration = cfg.T * cfg.clip_len
    annotations = [
        Annotation(
            video_id=sample.sample_id,
            duration_s=duration,
            span=sample.span.to_seconds(cfg.clip_len),
            query_text=sample.query.text,
            split=sample.split,
            query_id=sample.sample_id,
        )
        for sample in corpus.all_samples()
    ]
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_annotations(annotations, out_dir / ANNOTATIONS_FILE)
        for split, samples in corpus.samples.items():
            stacked = np.stack([s.features for s in samples]) if samples else np.zeros((0, cfg.T, cfg.d_v))
            np.save(out_dir / FEATURES_FILE.format(split=split.value), stacked, allow_pickle=False)
        words = sorted(corpus.embeddings)
        np.save(out_dir / EMBEDDINGS_FILE, np.stack([corpus.embeddings[w] for w in words]), allow_pickle=False)

        sidecar = {
            "config": cfg.model_dump(mode="json"),
            "seed": corpus.seed,
            "vocab": {cls.value: corpus.vocab[cls] for cls in PRIMITIVE_CLASSES},
            "held_out_words": {cls.value: corpus.held_out_words[cls] for cls in PRIMITIVE_CLASSES},
            "held_out_pairs": {name: [list(p) for p in pairs] for name, pairs in corpus.held_out_pairs.items()},
            "embedding_words": words,
            "samples": [
                {
                    "sample_id": s.sample_id,
                    "split": s.split.value,
                    "span": [s.span.start, s.span.end],
                    "event": asdict(s.event),
                    "distractors": [asdict(d) for d in s.distractors],
                    "composition_type": s.composition_type,
                }
                for s in corpus.all_samples()
            ],
        }
        (out_dir / SIDECAR_FILE).write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"Cannot write corpus to {out_dir}: {e}") from e
    logger.info(f"Wrote synthetic corpus ({len(annotations)} samples) to {out_dir}")
    return out_dir


def load_corpus(corpus_dir: Union[str, Path]) -> SyntheticCorpus:
    corpus_dir = Path(corpus_dir)
    sidecar_path = corpus_dir / SIDECAR_FILE
    if not sidecar_path.is_file():
        raise MissingFile(sidecar_path)
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    annotations = {a.query_id: a for a in load_annotations(corpus_dir / ANNOTATIONS_FILE)}
    vectors = np.load(corpus_dir / EMBEDDINGS_FILE, allow_pickle=False)

    corpus = SyntheticCorpus(
        config=SynthConfig.model_validate(sidecar["config"]),
        seed=int(sidecar["seed"]),
        vocab={PrimitiveClass(k): list(v) for k, v in sidecar["vocab"].items()},
        held_out_words={PrimitiveClass(k): list(v) for k, v in sidecar["held_out_words"].items()},
        held_out_pairs={k: [tuple(p) for p in v] for k, v in sidecar["held_out_pairs"].items()},
        embeddings={word: vectors[i] for i, word in enumerate(sidecar["embedding_words"])},
    )
    features = {}
    for split in Split:
        path = corpus_dir / FEATURES_FILE.format(split=split.value)
        if not path.is_file():
            raise MissingFile(path)
        features[split] = np.load(path, allow_pickle=False)

    counters = {split: 0 for split in Split}
    for record in sidecar["samples"]:
        split = Split(record["split"])
        annotation = annotations[record["sample_id"]]
        sample = SyntheticSample(
            sample_id=record["sample_id"],
            split=split,
            features=features[split][counters[split]],
            span=ClipSpan(*record["span"]),
            query=render_query(corpus.words(EventTuple(**record["event"])), record["sample_id"]),
            event=EventTuple(**record["event"]),
            distractors=[EventTuple(**d) for d in record["distractors"]],
            composition_type=record["composition_type"],
        )
        if sample.query.text != annotation.query_text:
            raise ValueError(f"Sidecar and annotations disagree on {sample.sample_id}")
        corpus.samples.setdefault(split, []).append(sample)
        counters[split] += 1
    return corpus
