"""
LLM-backed negative filling over an OpenAI-compatible chat-completions endpoint.
"""

import asyncio
import logging
import os
import re
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import httpx
import numpy as np
from pydantic import BaseModel, Field, field_validator
from typing_extensions import override

from .corpus import Filler, NegativeRecord
from .errors import AuthFailure, EndpointUnreachable, ExhaustedClass, ParseFailure
from .negforge import MaskPlan, NegativeFiller, NegativeHierarchy, fill_lexicon, forge
from .tagger import PrimitiveClass, PrimitiveDictionary, TaggedQuery, tokenize

logger = logging.getLogger(__name__)

PROMPT_SLOTS = ("{masked_query}", "{candidates}")
_ANSWER_RE = re.compile(r"^\s*answer\s*:\s*(.*)$", re.IGNORECASE)

RETRYABLE_STATUS = {429, 500, 502, 503, 504}


def bundled_template(version: str = "v1") -> str:
    return resources.files("negrank").joinpath(f"data/prompt_{version}.txt").read_text(encoding="utf-8")


class PromptConfig(BaseModel):
    template: str = Field(default_factory=bundled_template, description="Prompt with {masked_query} and {candidates}")
    dict_subset_size: int = Field(20, ge=1, description="Candidate words offered per masked slot")
    temperature: float = Field(0.7, ge=0)
    max_retries: int = Field(2, ge=0, le=10)
    model: str = "gpt-3.5-turbo"

    @field_validator("template")
    @classmethod
    def _slots_once(cls, value: str) -> str:
        for slot in PROMPT_SLOTS:
            if value.count(slot) != 1:
                raise ValueError(f"template must contain {slot} exactly once")
        return value


class ChatEndpoint:
    """
    Minimal async chat-completions client with exponential back-off.

    401/403 raise AuthFailure immediately; 429, 5xx and transport errors are retried
    `backoff_attempts` times before EndpointUnreachable.
    """

    def __init__(
        self,
        url: str,
        api_key: Optional[str] = None,
        model: str = "gpt-3.5-turbo",
        timeout: float = 30.0,
        backoff_attempts: int = 5,
        backoff_base: float = 0.5,
        transport: Optional[httpx.AsyncBaseTransport] = None,
    ):
        self.url = url
        self.api_key = api_key
        self.model = model
        self.backoff_attempts = backoff_attempts
        self.backoff_base = backoff_base
        self._client = httpx.AsyncClient(timeout=timeout, transport=transport)

    @classmethod
    def from_env(cls, url: str, api_key_env: str = "OPENAI_API_KEY", **kwargs) -> "ChatEndpoint":
        api_key = os.getenv(api_key_env)
        if not api_key:
            raise AuthFailure(f"Environment variable {api_key_env} is not set")
        return cls(url, api_key=api_key, **kwargs)

    async def __aenter__(self) -> "ChatEndpoint":
        return self

    async def __aexit__(self, *exc_info):
        await self.close()

    async def close(self):
        await self._client.aclose()

    async def complete(self, messages: List[Dict[str, str]], temperature: float = 0.0) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {"model": self.model, "messages": messages, "temperature": temperature}

        last_error = "no attempt made"
        for attempt in range(self.backoff_attempts):
            try:
                response = await self._client.post(self.url, headers=headers, json=payload)
            except httpx.TransportError as e:
                last_error = f"{type(e).__name__}: {e}"
            else:
                if response.status_code in (401, 403):
                    raise AuthFailure(f"Endpoint rejected credentials (HTTP {response.status_code})")
                if response.status_code in RETRYABLE_STATUS:
                    last_error = f"HTTP {response.status_code}"
                elif response.status_code >= 400:
                    raise EndpointUnreachable(f"Endpoint returned HTTP {response.status_code}: {response.text[:200]}")
                else:
                    try:
                        return response.json()["choices"][0]["message"]["content"]
                    except (ValueError, KeyError, IndexError, TypeError) as e:
                        raise ParseFailure(f"Unexpected chat-completions body: {e}") from e

            delay = self.backoff_base * (2 ** attempt)
            logger.warning(f"Chat endpoint attempt {attempt + 1}/{self.backoff_attempts} failed ({last_error}); retrying in {delay:.2f}s")
            await asyncio.sleep(delay)
        raise EndpointUnreachable(f"Chat endpoint {self.url} unreachable after {self.backoff_attempts} attempts ({last_error})")


def masked_query(q: TaggedQuery, plan: MaskPlan) -> Tuple[str, List[int]]:
    """Query text with [MASKn] placeholders, and the slot positions in sentence order."""
    positions = sorted(plan.masked_positions)
    tokens = list(q.tokens)
    for slot, position in enumerate(positions, start=1):
        tokens[position] = f"[MASK{slot}]"
    return " ".join(tokens), positions


def candidate_subsets(
    q: TaggedQuery,
    plan: MaskPlan,
    dictionary: PrimitiveDictionary,
    size: int,
    rng: np.random.Generator,
) -> List[List[str]]:
    subsets = []
    for position in sorted(plan.masked_positions):
        cls = plan.class_at(position)
        pool = [word for word in dictionary.candidates(cls) if word != q.tokens[position]]
        if not pool:
            raise ExhaustedClass(cls.value)
        picked = rng.choice(len(pool), size=min(size, len(pool)), replace=False)
        subsets.append([pool[i] for i in sorted(int(i) for i in picked)])
    return subsets


def render_prompt(cfg: PromptConfig, masked: str, plan: MaskPlan, positions: Sequence[int], subsets: Sequence[Sequence[str]]) -> str:
    lines = [
        f"MASK{slot} ({plan.class_at(position).value}): {', '.join(words)}"
        for slot, (position, words) in enumerate(zip(positions, subsets), start=1)
    ]
    return cfg.template.replace("{masked_query}", masked).replace("{candidates}", "\n".join(lines))


def parse_answer(content: str, slots: int) -> List[str]:
    """Words from the last 'ANSWER: w1 | w2' line; exactly one single token per slot."""
    answer = None
    for line in content.splitlines():
        match = _ANSWER_RE.match(line)
        if match:
            answer = match.group(1)
    if answer is None:
        raise ParseFailure("Response has no ANSWER line")
    words = []
    for part in answer.split("|"):
        tokens = tokenize(part)
        if len(tokens) != 1:
            raise ParseFailure(f"Expected one word per slot, got {part.strip()!r}")
        words.append(tokens[0])
    if len(words) != slots:
        raise ParseFailure(f"Expected {slots} words, got {len(words)}")
    return words


async def fill_llm(
    plan: MaskPlan,
    q: TaggedQuery,
    dictionary: PrimitiveDictionary,
    cfg: PromptConfig,
    endpoint: ChatEndpoint,
    seed=0,
) -> NegativeRecord:
    """
    Ask the endpoint to fill the masked slots from seeded dictionary subsets.

    Answers outside a slot's subset are retried `cfg.max_retries` times, after which
    the lexicon filler takes over and the record is flagged as a fallback.
    """
    rng = np.random.default_rng(seed)
    masked, positions = masked_query(q, plan)
    subsets = candidate_subsets(q, plan, dictionary, cfg.dict_subset_size, rng)
    messages = [{"role": "user", "content": render_prompt(cfg, masked, plan, positions, subsets)}]

    for attempt in range(cfg.max_retries + 1):
        try:
            content = await endpoint.complete(messages, temperature=cfg.temperature)
            words = parse_answer(content, len(positions))
            for word, allowed in zip(words, subsets):
                if word not in allowed:
                    raise ParseFailure(f"{word!r} is not among the offered candidates")
        except ParseFailure as e:
            logger.warning(f"LLM answer for {q.query_id}/{plan.level.value} rejected (attempt {attempt + 1}): {e}")
            continue
        replacements = dict(zip(positions, words))
        tokens = list(q.tokens)
        for position, word in replacements.items():
            tokens[position] = word
        return NegativeRecord(
            query_id=q.query_id,
            level=plan.level,
            masked_positions=positions,
            negative_text=" ".join(tokens),
            filler=Filler.LLM,
            model_id=endpoint.model,
            replacements=replacements,
        )

    logger.warning(f"Falling back to lexicon filling for {q.query_id}/{plan.level.value}")
    record = fill_lexicon(plan, q, dictionary, rng.integers(2 ** 32))
    return record.model_copy(update={"filler": Filler.LLM, "fallback": True, "model_id": endpoint.model})


class LlmFiller(NegativeFiller):
    filler = Filler.LLM

    def __init__(self, dictionary: PrimitiveDictionary, cfg: PromptConfig, endpoint: ChatEndpoint):
        self.dictionary = dictionary
        self.cfg = cfg
        self.endpoint = endpoint

    @override
    async def fill(self, plan: MaskPlan, q: TaggedQuery, seed) -> NegativeRecord:
        return await fill_llm(plan, q, self.dictionary, self.cfg, self.endpoint, seed)


async def forge_llm(
    queries: Sequence[TaggedQuery],
    dictionary: PrimitiveDictionary,
    endpoint: ChatEndpoint,
    cfg: Optional[PromptConfig] = None,
    ratios: Sequence[float] = (0.25, 0.5, 0.75),
    seed: int = 0,
    cache_path: Optional[Union[str, Path]] = None,
    excluded_classes: Iterable[PrimitiveClass] = (),
    max_in_flight: int = 4,
) -> List[NegativeHierarchy]:
    return await forge(
        queries,
        LlmFiller(dictionary, cfg or PromptConfig(), endpoint),
        ratios=ratios,
        seed=seed,
        cache_path=cache_path,
        excluded_classes=excluded_classes,
        max_in_flight=max_in_flight,
    )
