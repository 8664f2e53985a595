"""
Primitive tagging of query sentences and the training-set primitive dictionary.

The tagger is a bundled word -> class lexicon plus a few deterministic suffix rules,
so tagging is reproducible without an external NLP toolkit.
"""

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .errors import EmptyCorpus, EmptyQuery, MalformedRecord, MissingFile

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[a-z0-9']+")

# Closed-class prepositions; always PREP even when missing from the lexicon file.
PREPOSITIONS = frozenset({
    "about", "above", "across", "after", "against", "along", "among", "around", "at",
    "before", "behind", "below", "beneath", "beside", "between", "by", "down", "from",
    "in", "inside", "into", "near", "of", "off", "on", "onto", "out", "outside", "over",
    "through", "to", "toward", "towards", "under", "up", "upon", "with", "within", "without",
})


class PrimitiveClass(str, Enum):
    VERB = "VERB"
    NOUN = "NOUN"
    ADJ = "ADJ"
    PREP = "PREP"
    ADV = "ADV"
    OTHER = "OTHER"


# Linguistic importance order, also the order classes are stored in.
PRIMITIVE_CLASSES: Tuple[PrimitiveClass, ...] = (
    PrimitiveClass.VERB,
    PrimitiveClass.NOUN,
    PrimitiveClass.ADJ,
    PrimitiveClass.PREP,
    PrimitiveClass.ADV,
)


def tokenize(text: str) -> List[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class TaggedQuery:
    query_id: str
    tokens: Tuple[str, ...]
    tags: Tuple[PrimitiveClass, ...]
    subject_index: Optional[int] = None

    def __post_init__(self):
        if len(self.tokens) != len(self.tags):
            raise ValueError(f"{len(self.tokens)} tokens but {len(self.tags)} tags")
        if self.subject_index is not None and self.tags[self.subject_index] is not PrimitiveClass.NOUN:
            raise ValueError(f"subject index {self.subject_index} does not point at a NOUN")

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def primitive_positions(self) -> List[int]:
        return [i for i, tag in enumerate(self.tags) if tag is not PrimitiveClass.OTHER]


class TagLexicon:
    """Immutable word -> primitive class table with suffix fallbacks."""

    def __init__(self, entries: Dict[str, PrimitiveClass]):
        self._entries = dict(entries)

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "TagLexicon":
        entries = {}
        for line_no, line in enumerate(lines, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise MalformedRecord(line_no, "expected 'word<TAB>class'")
            word, tag = parts[0].strip().lower(), parts[1].strip().upper()
            try:
                entries[word] = PrimitiveClass(tag)
            except ValueError as e:
                raise MalformedRecord(line_no, f"unknown class {tag!r}") from e
        return cls(entries)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TagLexicon":
        path = Path(path)
        if not path.is_file():
            raise MissingFile(path)
        with path.open("r", encoding="utf-8") as handle:
            return cls.from_lines(handle)

    @classmethod
    def bundled(cls) -> "TagLexicon":
        text = resources.files("negrank").joinpath("data/lexicon.tsv").read_text(encoding="utf-8")
        return cls.from_lines(text.splitlines())

    def __contains__(self, word: str) -> bool:
        return word in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self) -> Dict[str, PrimitiveClass]:
        return dict(self._entries)

    def _is_verb_stem(self, stem: str) -> bool:
        return len(stem) >= 2 and self._entries.get(stem) is PrimitiveClass.VERB

    def _inflected_verb(self, word: str) -> bool:
        for suffix in ("ing", "ed"):
            if not word.endswith(suffix):
                continue
            stem = word[: -len(suffix)]
            candidates = [stem, stem + "e"]
            if len(stem) >= 2 and stem[-1] == stem[-2]:
                candidates.append(stem[:-1])  # sitting -> sit
            if suffix == "ed" and stem.endswith("i"):
                candidates.append(stem[:-1] + "y")  # tidied -> tidy
            if any(self._is_verb_stem(candidate) for candidate in candidates):
                return True
        return False

    def classify(self, word: str) -> PrimitiveClass:
        word = word.lower()
        if word in self._entries:
            return self._entries[word]
        if word in PREPOSITIONS:
            return PrimitiveClass.PREP
        if word.endswith("ly") and len(word) > 3:
            return PrimitiveClass.ADV
        if self._inflected_verb(word):
            return PrimitiveClass.VERB
        return PrimitiveClass.OTHER


def tag_query(text: str, lexicon: TagLexicon, query_id: str = "query") -> TaggedQuery:
    tokens = tokenize(text)
    if not tokens:
        raise EmptyQuery(f"Query {query_id!r} is empty after normalization")
    tags = tuple(lexicon.classify(token) for token in tokens)

    # subject: first NOUN preceding the first VERB
    subject_index = None
    for i, tag in enumerate(tags):
        if tag is PrimitiveClass.VERB:
            break
        if tag is PrimitiveClass.NOUN:
            subject_index = i
            break
    if subject_index is not None and PrimitiveClass.VERB not in tags[subject_index + 1:]:
        subject_index = None
    return TaggedQuery(query_id=query_id, tokens=tuple(tokens), tags=tags, subject_index=subject_index)


@dataclass
class PrimitiveDictionary:
    """Per-class word counts, ordered by descending count then word."""
    entries: Dict[PrimitiveClass, List[Tuple[str, int]]] = field(default_factory=dict)
    source_split: str = "train"

    def candidates(self, primitive_class: PrimitiveClass) -> List[str]:
        return [word for word, _ in self.entries.get(primitive_class, [])]

    def counts(self, primitive_class: PrimitiveClass) -> Dict[str, int]:
        return dict(self.entries.get(primitive_class, []))

    def total(self) -> int:
        return sum(count for words in self.entries.values() for _, count in words)

    def contains(self, word: str, primitive_class: PrimitiveClass) -> bool:
        return word in self.counts(primitive_class)

    def to_json(self) -> str:
        payload = {
            "source_split": self.source_split,
            "classes": {
                cls.value: [[word, count] for word, count in self.entries.get(cls, [])]
                for cls in PRIMITIVE_CLASSES
            },
        }
        return json.dumps(payload, indent=2, ensure_ascii=False) + "\n"

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PrimitiveDictionary":
        path = Path(path)
        if not path.is_file():
            raise MissingFile(path)
        payload = json.loads(path.read_text(encoding="utf-8"))
        entries = {
            PrimitiveClass(name): [(word, int(count)) for word, count in words]
            for name, words in payload["classes"].items()
        }
        return cls(entries=entries, source_split=payload.get("source_split", "train"))


def build_dictionary(queries: Sequence[TaggedQuery], source_split: str = "train") -> PrimitiveDictionary:
    if not queries:
        raise EmptyCorpus("Cannot build a primitive dictionary from zero queries")
    counters = {cls: Counter() for cls in PRIMITIVE_CLASSES}
    for query in queries:
        for token, tag in zip(query.tokens, query.tags):
            if tag is not PrimitiveClass.OTHER:
                counters[tag][token] += 1
    entries = {
        cls: sorted(counter.items(), key=lambda item: (-item[1], item[0]))
        for cls, counter in counters.items()
    }
    dictionary = PrimitiveDictionary(entries=entries, source_split=source_split)
    logger.info(f"Built primitive dictionary from {len(queries)} queries ({dictionary.total()} primitive tokens)")
    return dictionary
