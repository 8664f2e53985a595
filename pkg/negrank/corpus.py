"""
Grounding annotations, moment spans and the negative-query cache.

Both record files are UTF-8 JSON lines: one object per line, loaded fail-fast.
"""

import json
import logging
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_serializer, field_validator, model_validator

from .errors import DuplicateKey, IoFailure, MalformedRecord, MissingFile, SpanOutOfRange

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class Split(str, Enum):
    TRAIN = "train"
    TEST_TRIVIAL = "test_trivial"
    NOVEL_COMPOSITION = "novel_composition"
    NOVEL_WORD = "novel_word"


class NegativeLevel(str, Enum):
    HN1 = "hn1"
    HN2 = "hn2"
    HN3 = "hn3"


class Filler(str, Enum):
    LEXICON = "lexicon"
    LLM = "llm"


@dataclass(frozen=True)
class ClipSpan:
    """Half-open clip-index interval [start, end)."""
    start: int
    end: int

    def __post_init__(self):
        if self.start < 0 or self.end <= self.start:
            raise ValueError(f"Invalid clip span [{self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start

    def to_seconds(self, clip_len: float) -> "MomentSpan":
        return MomentSpan(start=self.start * clip_len, end=self.end * clip_len)


class MomentSpan(BaseModel):
    model_config = ConfigDict(frozen=True)

    start: float = Field(..., ge=0, description="Start time in seconds")
    end: float = Field(..., description="End time in seconds")

    @model_validator(mode="after")
    def _ordered(self):
        if not self.end > self.start:
            raise ValueError(f"span end {self.end} must exceed start {self.start}")
        return self

    @property
    def length(self) -> float:
        return self.end - self.start

    def to_normalized(self, duration: float) -> Tuple[float, float]:
        """(center, width) as fractions of the video duration."""
        center = (self.start + self.end) / 2.0 / duration
        width = (self.end - self.start) / duration
        return center, width

    @classmethod
    def from_normalized(cls, center: float, width: float, duration: float) -> "MomentSpan":
        start = (center - width / 2.0) * duration
        end = (center + width / 2.0) * duration
        return cls(start=max(0.0, start), end=end)

    def to_clip_span(self, clip_len: float, num_clips: Optional[int] = None) -> ClipSpan:
        """
        Clips whose centers (i + 0.5) * clip_len fall inside [start, end).
        """
        first = max(0, math.ceil(self.start / clip_len - 0.5))
        last = math.ceil(self.end / clip_len - 0.5)  # exclusive
        if num_clips is not None:
            last = min(last, num_clips)
        # guard float noise at the boundaries
        while first > 0 and (first - 1 + 0.5) * clip_len >= self.start:
            first -= 1
        while first < last and (first + 0.5) * clip_len < self.start:
            first += 1
        while last > first and (last - 1 + 0.5) * clip_len >= self.end:
            last -= 1
        if last <= first:
            raise ValueError(f"Span [{self.start}, {self.end}) covers no clip center at clip length {clip_len}")
        return ClipSpan(first, last)


class Annotation(BaseModel):
    model_config = ConfigDict(populate_by_name=True, use_enum_values=False)

    video_id: str = Field(..., min_length=1)
    duration_s: float = Field(..., gt=0)
    span: MomentSpan
    query_text: str = Field(..., alias="query", min_length=1)
    split: Split
    query_id: Optional[str] = None

    @field_validator("span", mode="before")
    @classmethod
    def _span_from_pair(cls, value):
        if isinstance(value, (list, tuple)):
            if len(value) != 2:
                raise ValueError("span must be a two-element array")
            return {"start": value[0], "end": value[1]}
        return value

    @field_validator("query_text")
    @classmethod
    def _non_blank(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("query must not be blank")
        return value

    @field_serializer("span")
    def _span_to_pair(self, span: MomentSpan):
        return [span.start, span.end]

    @model_validator(mode="after")
    def _span_within_video(self):
        if self.span.end > self.duration_s:
            raise ValueError(f"span end {self.span.end} exceeds duration {self.duration_s}")
        return self


class NegativeRecord(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    query_id: str
    level: NegativeLevel
    masked_positions: List[int]
    negative_text: str = Field(..., alias="text")
    filler: Filler
    model_id: Optional[str] = None
    fallback: bool = False
    replacements: Dict[int, str] = Field(default_factory=dict)
    created_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))

    @property
    def key(self) -> Tuple[str, str, str]:
        return (self.query_id, self.level.value, self.filler.value)

    def to_line(self) -> str:
        return json.dumps(self.model_dump(mode="json", by_alias=True), ensure_ascii=False)


def _raw_span_check(payload: dict, line_no: int) -> None:
    span = payload.get("span")
    duration = payload.get("duration_s")
    if not isinstance(span, (list, tuple)) or len(span) != 2:
        return  # shape problems are reported as MalformedRecord
    try:
        start, end = float(span[0]), float(span[1])
    except (TypeError, ValueError):
        return
    if not start < end:
        raise SpanOutOfRange(line_no, f"start {start} must be < end {end}")
    if start < 0:
        raise SpanOutOfRange(line_no, f"start {start} is negative")
    if isinstance(duration, (int, float)) and end > duration:
        raise SpanOutOfRange(line_no, f"end {end} exceeds duration {duration}")


def _iter_json_lines(path: PathLike):
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedRecord(line_no, f"invalid JSON ({e.msg})") from e
            if not isinstance(payload, dict):
                raise MalformedRecord(line_no, "record is not an object")
            yield line_no, payload


def _first_error(error: ValidationError) -> str:
    first = error.errors()[0]
    location = ".".join(str(part) for part in first.get("loc", ())) or "record"
    return f"{location}: {first.get('msg', 'invalid value')}"


def load_annotations(path: PathLike) -> List[Annotation]:
    """Load every annotation in file order; the first bad line rejects the file."""
    annotations = []
    for line_no, payload in _iter_json_lines(path):
        _raw_span_check(payload, line_no)
        try:
            annotation = Annotation.model_validate(payload)
        except ValidationError as e:
            raise MalformedRecord(line_no, _first_error(e)) from e
        if annotation.query_id is None:
            annotation = annotation.model_copy(update={"query_id": f"{annotation.video_id}_{line_no}"})
        annotations.append(annotation)
    logger.info(f"Loaded {len(annotations)} annotations from {path}")
    return annotations


def save_annotations(annotations: Iterable[Annotation], path: PathLike) -> int:
    path = Path(path)
    count = 0
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="\n") as handle:
            for annotation in annotations:
                payload = annotation.model_dump(mode="json", by_alias=True, exclude_none=True)
                handle.write(json.dumps(payload, ensure_ascii=False) + "\n")
                count += 1
    except OSError as e:
        raise IoFailure(f"Cannot write annotations to {path}: {e}") from e
    return count


def load_negatives(path: PathLike) -> List[NegativeRecord]:
    records = []
    for line_no, payload in _iter_json_lines(path):
        try:
            records.append(NegativeRecord.model_validate(payload))
        except ValidationError as e:
            raise MalformedRecord(line_no, _first_error(e)) from e
    return records


def save_negatives(
    records: Iterable[NegativeRecord],
    path: PathLike,
    append: bool = False,
    strict: bool = False,
) -> int:
    """
    Write negative records as JSON lines and return how many were written.

    In append mode records whose (query_id, level, filler) key is already on disk,
    or repeated within `records`, are skipped; with strict=True they raise DuplicateKey.
    """
    path = Path(path)
    seen = set()
    if append and path.is_file():
        seen = {record.key for record in load_negatives(path)}

    pending = []
    for record in records:
        if record.key in seen:
            if strict:
                raise DuplicateKey(record.key)
            logger.debug(f"Skipping duplicate negative {record.key}")
            continue
        seen.add(record.key)
        pending.append(record)

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("a" if append else "w", encoding="utf-8", newline="\n") as handle:
            for record in pending:
                handle.write(record.to_line() + "\n")
    except OSError as e:
        raise IoFailure(f"Cannot write negatives to {path}: {e}") from e
    return len(pending)
