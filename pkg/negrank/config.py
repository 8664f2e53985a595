"""
Run configuration: documented defaults <- flat key-value file <- command-line overrides.

Config files hold one namespaced `section.key = value` per line; `#` starts a comment
and list values are comma separated, e.g.

    loss.h1 = 1.0
    forge.ratios = 0.25, 0.5, 0.75
    seeds = 0, 1, 2
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .corpus import Filler
from .errors import ConfigError
from .losses import BaseLossConfig, BaseVariant, CoarseConfig, FineConfig, FineMode, ObjectiveConfig
from .synthgen import SynthConfig
from .tagger import PrimitiveClass
from .toymodel import ModelConfig, TrainConfig

logger = logging.getLogger(__name__)


def _csv(value):
    if value is None:
        return []
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    return value


class ForgeSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ratios: Tuple[float, float, float] = (0.25, 0.5, 0.75)
    filler: Filler = Filler.LEXICON
    weighted: bool = Field(False, description="Frequency-weighted replacement sampling")
    excluded_classes: Tuple[PrimitiveClass, ...] = ()
    cache: Optional[str] = Field(None, description="Negative cache file; defaults to the run directory")
    max_in_flight: int = Field(4, ge=1)

    @field_validator("ratios", mode="before")
    @classmethod
    def _ratios(cls, value):
        return _csv(value)

    @field_validator("excluded_classes", mode="before")
    @classmethod
    def _classes(cls, value):
        value = _csv(value)
        return [v.upper() if isinstance(v, str) else v for v in value]


class LossSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    h1: float = Field(1.0, ge=0)
    h2: float = Field(2.0, ge=0)
    q: int = Field(8, ge=1)
    use_coarse: bool = True
    use_intra: bool = True
    use_inter: bool = True
    margins: Tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    mode: FineMode = FineMode.RELATIVE
    use_fine: bool = True
    fine_terms: Tuple[bool, bool, bool, bool] = (True, True, True, True)
    detach_observation: bool = False
    alpha: float = Field(1.0, ge=0)
    beta: float = Field(1.0, ge=0)
    replace_saliency: bool = False
    variant: BaseVariant = BaseVariant.QD_DETR
    lambda_l1: float = Field(10.0, ge=0)
    lambda_giou: float = Field(1.0, ge=0)
    lambda_cls: float = Field(4.0, ge=0)
    lambda_neg: float = Field(1.0, ge=0)
    lambda_cont: float = Field(1.0, ge=0)
    lambda_sal: float = Field(1.0, ge=0)
    tau: float = Field(0.5, gt=0)
    max_rank: int = Field(1, ge=1)

    @field_validator("margins", "fine_terms", mode="before")
    @classmethod
    def _lists(cls, value):
        return _csv(value)

    def objective(self) -> ObjectiveConfig:
        m0, m1, m2, m3 = self.margins
        return ObjectiveConfig(
            base=BaseLossConfig(
                lambda_l1=self.lambda_l1, lambda_giou=self.lambda_giou, lambda_cls=self.lambda_cls,
                lambda_neg=self.lambda_neg, lambda_cont=self.lambda_cont, lambda_sal=self.lambda_sal,
                tau=self.tau, max_rank=self.max_rank, variant=self.variant,
            ),
            coarse=CoarseConfig(h1=self.h1, h2=self.h2, q=self.q, use_intra=self.use_intra, use_inter=self.use_inter),
            fine=FineConfig(
                m0=m0, m1=m1, m2=m2, m3=m3, mode=self.mode,
                terms=self.fine_terms, detach_observation=self.detach_observation,
            ),
            alpha=self.alpha,
            beta=self.beta,
            use_coarse=self.use_coarse,
            use_fine=self.use_fine,
            replace_saliency=self.replace_saliency,
        )


class TrainSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(0.05, ge=0)
    epochs: int = Field(30, ge=0)
    batch: int = Field(32, ge=2)
    clip_norm: Optional[float] = Field(10.0, gt=0)
    d_e: int = Field(32, ge=1)
    d_h: int = Field(64, ge=1)
    n_queries: int = Field(5, ge=1)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(lr=self.lr, epochs=self.epochs, batch=self.batch, clip_norm=self.clip_norm, seed=seed)

    def model_config_for(self, d_v: int) -> ModelConfig:
        return ModelConfig(d_v=d_v, d_e=self.d_e, d_h=self.d_h, n_queries=self.n_queries)


class LlmSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-3.5-turbo"
    api_key_env: str = "OPENAI_API_KEY"
    subset_size: int = Field(20, ge=1)
    temperature: float = Field(0.7, ge=0)
    max_retries: int = Field(2, ge=0)
    backoff_attempts: int = Field(5, ge=1)
    backoff_base: float = Field(0.5, ge=0)
    timeout: float = Field(30.0, gt=0)
    prompt_version: str = "v1"


class EvalSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    iou_thresholds: Tuple[float, ...] = (0.5, 0.7)
    top_n: int = Field(1, ge=1)
    workers: int = Field(1, ge=1, description="Parallel ablation cells")
    split: str = "novel_composition"

    @field_validator("iou_thresholds", mode="before")
    @classmethod
    def _thresholds(cls, value):
        return _csv(value)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    forge: ForgeSection = ForgeSection()
    loss: LossSection = LossSection()
    train: TrainSection = TrainSection()
    synth: SynthConfig = SynthConfig()
    llm: LlmSection = LlmSection()
    eval: EvalSection = EvalSection()
    seeds: Tuple[int, ...] = (0,)

    @field_validator("seeds", mode="before")
    @classmethod
    def _seeds(cls, value):
        value = _csv(value)
        return [value] if isinstance(value, int) else value

    def fingerprint(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

    def run_dir(self, runs_root: Union[str, Path], subcommand: str, inputs: Iterable[Union[str, Path]] = ()) -> Path:
        """`<runs_root>/<subcommand>-<fingerprint>[-<input digest>]`."""
        name = f"{subcommand}-{self.fingerprint()}"
        inputs = [path for path in inputs if path is not None]
        if inputs:
            name += f"-{input_digest(inputs)}"
        return Path(runs_root) / name


def input_digest(paths: Iterable[Union[str, Path]]) -> str:
    """SHA-256 over the bytes of each input file, directories walked in sorted order."""
    digest = hashlib.sha256()
    for path in paths:
        path = Path(path)
        if path.is_dir():
            files = sorted(p for p in path.rglob("*") if p.is_file())
        else:
            files = [path] if path.is_file() else []
        digest.update(path.name.encode("utf-8"))
        for file in files:
            digest.update(file.relative_to(path).as_posix().encode("utf-8") if file != path else b"")
            digest.update(file.read_bytes())
    return digest.hexdigest()[:8]


def parse_config_lines(lines: Iterable[str]) -> Dict[str, str]:
    values = {}
    for line_no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}", "expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {line_no}", "empty key")
        values[key] = value
    return values


def _nest(flat: Mapping[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        if isinstance(value, str) and value.strip().lower() in ("", "none"):
            value = None
        parts = key.split(".")
        if len(parts) > 2:
            raise ConfigError(key, "keys are 'section.name' or 'seeds'")
        if len(parts) == 1:
            nested[key] = value
        else:
            section = nested.setdefault(parts[0], {})
            if not isinstance(section, dict):
                raise ConfigError(key, f"{parts[0]} is not a section")
            section[parts[1]] = value
    return nested


def build_config(flat: Mapping[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(_nest(flat))
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(part) for part in first.get("loc", ()) if not isinstance(part, int)) or "config"
        reason = "unknown key" if first.get("type") == "extra_forbidden" else first.get("msg", "invalid value")
        raise ConfigError(key, reason) from e


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    flat: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(str(path), "config file not found")
        flat.update(parse_config_lines(path.read_text(encoding="utf-8").splitlines()))
    flat.update(overrides or {})
    config = build_config(flat)
    logger.debug(f"Effective config {config.fingerprint()}: {config.model_dump(mode='json')}")
    return config


def to_flat(config: RunConfig) -> Dict[str, str]:
    """Inverse of the file format, used to write the effective config into run directories."""
    flat = {}
    for section, values in config.model_dump(mode="json").items():
        if isinstance(values, dict):
            for key, value in values.items():
                flat[f"{section}.{key}"] = _render(value)
        else:
            flat[section] = _render(values)
    return flat


def _render(value) -> str:
    if isinstance(value, (list, tuple)):
        return ", ".join(_render(v) for v in value)
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)
