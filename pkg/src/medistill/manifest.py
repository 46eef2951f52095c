"""Run configuration files and the self-contained manifests persisted with every run."""

from __future__ import annotations

import json
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from medistill import __version__
from medistill.config import ModelConfig
from medistill.data import GRAMMAR_VERSION
from medistill.distill import DistillPlan
from medistill.errors import ConfigurationError
from medistill.optim import OptimConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Strict):
    seed: int = 0
    n_train: int = Field(default=560, ge=2)
    n_eval: int = Field(default=64, ge=1)
    grammar_version: str = GRAMMAR_VERSION
    crop: bool = False

    @field_validator("grammar_version")
    @classmethod
    def _grammar(cls, v: str) -> str:
        if v != GRAMMAR_VERSION:
            raise ValueError(f"data.grammar_version={v!r} but this build generates {GRAMMAR_VERSION!r}")
        return v


class TrainConfig(_Strict):
    steps: int = Field(default=2000, ge=0)
    batch_size: int = Field(default=32, ge=2)
    momentum: float = Field(default=0.995, gt=0, lt=1)
    alpha_soft: float = Field(default=0.4, ge=0, le=1)
    label_smoothing: float = Field(default=0.1, ge=0, lt=1)
    prompt: list[str] = Field(default_factory=lambda: ["a"])
    log_every: int = Field(default=50, gt=0)
    # 0 evaluates only once, after the last step
    eval_every: int = Field(default=0, ge=0)
    itm_rerank: int = Field(default=16, ge=0)
    caption_max_len: int = Field(default=12, gt=0)


class InitStrategy(_Strict):
    vision: Literal["random", "proxy"] = "random"
    text: Literal["random", "proxy"] = "random"
    vision_checkpoint: Optional[str] = None
    text_checkpoint: Optional[str] = None

    @model_validator(mode="after")
    def _check(self):
        for side in ("vision", "text"):
            if getattr(self, side) == "proxy" and not getattr(self, f"{side}_checkpoint"):
                raise ValueError(f"init.{side}='proxy' requires init.{side}_checkpoint")
        return self


class ProxyConfig(_Strict):
    kind: Literal["vision", "text"] = "vision"
    steps: int = Field(default=400, ge=0)
    batch_size: int = Field(default=32, ge=2)
    lr: float = Field(default=1e-3, gt=0)


class GridConfig(_Strict):
    """Ablation axes; each value list defines one level per entry."""

    axes: dict[Literal["encoder_scale", "fusion_layers", "channels", "attention_kinds", "objectives", "init"],
               list[Any]] = Field(default_factory=dict)
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2])

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v: list[int]) -> list[int]:
        if len(v) < 3:
            raise ValueError(f"grid.seeds needs at least 3 seeds, got {len(v)}")
        return v


class RunManifest(_Strict):
    task: Literal["pretrain-teacher", "distill", "proxy-pretrain", "ablate", "eval"] = "pretrain-teacher"
    seed: int = 0
    mode: Literal["verify", "train"] = "train"
    model: ModelConfig
    teacher: Optional[ModelConfig] = None
    teacher_checkpoint: Optional[str] = None
    plan: DistillPlan = Field(default_factory=DistillPlan)
    data: DataConfig = Field(default_factory=DataConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    init: InitStrategy = Field(default_factory=InitStrategy)
    proxy: ProxyConfig = Field(default_factory=ProxyConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    code_version: str = __version__

    def to_dict(self) -> dict[str, Any]:
        return self.model_dump(mode="json")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def manifest_from_dict(data: dict[str, Any]) -> RunManifest:
    try:
        return RunManifest.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid configuration: {_format_errors(exc)}") from exc


def parse_config(path: str) -> RunManifest:
    """Read a JSON run configuration; unknown keys and violated constraints are errors."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read configuration {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    return manifest_from_dict(data)
