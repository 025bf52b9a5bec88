"""Run configuration: one JSON document holding every tunable.

Unknown keys are rejected and every violation is reported at once.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal

import pydantic
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ValidationError
from .model import ModelConfig
from .patterns import EncodingConfig, Thresholds
from .windowing import WindowConfig


class ConfigInvalid(ValidationError):
    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("invalid configuration:\n  " + "\n  ".join(violations))


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class WindowSection(_Section):
    ls: int = Field(60, ge=3, description="subtrajectory length L_s (s)")
    lf: int = Field(10, ge=2, description="segment length L_f (s); stride is L_f/2")

    @model_validator(mode="after")
    def _lf_below_ls(self):
        if self.lf >= self.ls:
            raise ValueError(f"lf ({self.lf}) must be < ls ({self.ls})")
        return self


class ThresholdSection(_Section):
    dv: float = Field(1.0, gt=0, description="speed change below which speed counts as constant (km/h)")
    db: float = Field(1.0, ge=0, description="bearing change above which a point is turning (deg)")


class EncodingSection(_Section):
    mode: Literal["MS", "ST", "FUSED"] = Field("FUSED", description="pattern type per segment")
    wrap_st_bearing: bool = Field(False, description="wrap the bearing difference inside transition intensity")
    scale_st_only: bool = Field(False, description="min-max scale only the ST columns")


class PrepSection(_Section):
    max_gap: int = Field(3, ge=1, description="largest sampling gap (s) filled by interpolation")
    min_trip_secs: int = Field(0, ge=0, description="drop gap-free runs shorter than this (s)")


class ModelSection(_Section):
    cell: Literal["gru", "lstm"] = Field("gru", description="recurrent cell kind")
    embedding_dim: int = Field(100, ge=1, description="driving-style embedding size")
    residual: bool = Field(True, description="skip connections around the first encoder/decoder blocks")
    decoder: bool = Field(True, description="reconstruction decoder (soft regularizer)")
    lam: float = Field(0.15, ge=0, le=1, description="reconstruction loss weight lambda")


class TrainingSection(_Section):
    batch_size: int = Field(256, ge=1, description="mini-batch size (capped at the training-set size)")
    max_iterations: int = Field(1500, ge=1, description="maximum mini-batch updates")
    val_fraction: float = Field(0.15, gt=0, lt=1, description="stratified hold-out for early stopping")
    patience: int = Field(100, ge=0, description="iterations without validation improvement before stopping")
    eval_every: int = Field(10, ge=1, description="iterations between validation checks")
    lr: float = Field(1e-3, gt=0, description="Adam learning rate")
    beta1: float = Field(0.9, ge=0, lt=1, description="Adam beta1")
    beta2: float = Field(0.999, ge=0, lt=1, description="Adam beta2")
    eps: float = Field(1e-8, gt=0, description="Adam epsilon")
    clip_norm: float = Field(5.0, ge=0, description="global gradient-norm clip (0 disables)")
    seed: int = Field(0, ge=0, description="master seed")


class EvaluationSection(_Section):
    folds: int = Field(5, ge=2, description="cross-validation folds")
    repeats: int = Field(5, ge=1, description="cross-validation repetitions")


class RunConfig(_Section):
    window: WindowSection = WindowSection()
    thresholds: ThresholdSection = ThresholdSection()
    encoding: EncodingSection = EncodingSection()
    prep: PrepSection = PrepSection()
    model: ModelSection = ModelSection()
    training: TrainingSection = TrainingSection()
    evaluation: EvaluationSection = EvaluationSection()

    def encoding_config(self) -> EncodingConfig:
        return EncodingConfig(
            WindowConfig(self.window.ls, self.window.lf),
            Thresholds(self.thresholds.dv, self.thresholds.db),
            self.encoding.mode,
            self.encoding.wrap_st_bearing,
        )

    def net_config(self, n_classes: int, seq_len: int, feature_dim: int) -> ModelConfig:
        m = self.model
        return ModelConfig(m.cell, m.embedding_dim, m.residual, m.decoder, m.lam, n_classes, seq_len, feature_dim)

    def train_config(self):
        from .train_eval import TrainConfig

        t = self.training
        return TrainConfig(
            batch_size=t.batch_size,
            max_iterations=t.max_iterations,
            val_fraction=t.val_fraction,
            patience=t.patience,
            eval_every=t.eval_every,
            seed=t.seed,
            lr=t.lr,
            beta1=t.beta1,
            beta2=t.beta2,
            eps=t.eps,
            clip_norm=t.clip_norm,
        )


def _violations(exc: pydantic.ValidationError) -> list[str]:
    out = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        out.append(f"{loc}: {err['msg']}")
    return out


def build_config(doc: dict[str, Any] | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Validate ``doc`` with dotted-key ``overrides`` (``"model.lam": 0.3``) applied."""
    merged = json.loads(json.dumps(doc or {}))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, name = key.partition(".")
        if not isinstance(merged.get(section, {}), dict):
            raise ConfigInvalid([f"{section}: must be an object"])
        merged.setdefault(section, {})[name] = value
    try:
        return RunConfig.model_validate(merged)
    except pydantic.ValidationError as exc:
        raise ConfigInvalid(_violations(exc)) from None


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigInvalid([f"{path}: not valid JSON ({exc})"]) from None
        if not isinstance(doc, dict):
            raise ConfigInvalid([f"{path}: top level must be an object"])
    return build_config(doc, overrides)


def describe_keys() -> list[tuple[str, Any, str]]:
    """``(dotted key, default, description)`` for every config field."""
    rows = []
    for section, field in RunConfig.model_fields.items():
        sub = field.annotation
        for name, f in sub.model_fields.items():
            rows.append((f"{section}.{name}", f.default, f.description or ""))
    return rows
