"""Run configuration: one JSON document per experiment plus dot-path overrides."""

from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from pathlib import Path
from typing import Any, Final

import pydantic
from pydantic import BaseModel, ConfigDict, Field, model_validator

from aumai_hsi_transfer.errors import ConfigError, IoError
from aumai_hsi_transfer.models import (
    AdamHyper,
    LayerSpec,
    Precision,
    SplitSpec,
    TrainConfig,
    VariantName,
)
from aumai_hsi_transfer.scene_io import PRESETS

logger = logging.getLogger(__name__)

DEFAULT_SEED: Final = 42


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SceneSection(_Section):
    path: Path
    preset: str | None = Field(default=None, description="Class table to verify against")

    @model_validator(mode="after")
    def preset_known(self) -> SceneSection:
        if self.preset is not None and self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        return self


class PcaSection(_Section):
    components: int = Field(default=30, gt=0)
    standardize: bool = False
    checkpoint: Path | None = Field(default=None, description="Reuse a fitted HSPCA1 file")


class PatchSection(_Section):
    window: int = Field(default=5, gt=0)
    train_fraction: float = Field(default=0.7, gt=0.0, lt=1.0)
    stratified: bool = False
    seed: int = Field(default=DEFAULT_SEED, ge=0, lt=2**64)

    def split(self) -> SplitSpec:
        return SplitSpec(
            train_fraction=self.train_fraction, seed=self.seed, stratified=self.stratified
        )


class SurgerySection(_Section):
    """Either the published recipe (default) or an explicit cut and head."""

    drop_last: int | None = Field(default=None, ge=0)
    head_widths: list[int] | None = None
    head_dropout: float | None = Field(default=None, ge=0.0, lt=1.0)
    head: list[LayerSpec] | None = None
    head_seed: int = Field(default=DEFAULT_SEED, ge=0, lt=2**64)

    @model_validator(mode="after")
    def cut_with_custom_head(self) -> SurgerySection:
        custom = self.head is not None or self.head_widths is not None
        if custom and self.drop_last is None:
            raise ValueError("a custom head needs drop_last")
        if self.head is not None and self.head_widths is not None:
            raise ValueError("give either head or head_widths, not both")
        return self


class ModelSection(_Section):
    variant: VariantName | None = None
    checkpoint: Path | None = None
    surgery: SurgerySection | None = None
    seed: int = Field(default=DEFAULT_SEED, ge=0, lt=2**64, description="Init seed")
    leaky_alpha: float = Field(default=0.01, ge=0.0)


class TrainSection(_Section):
    epochs: int = Field(default=20, ge=0)
    batch_size: int = Field(default=128, ge=1)
    seed: int = Field(default=DEFAULT_SEED, ge=0, lt=2**64)
    lr: float = Field(default=1e-3, gt=0.0)
    log_every: int = Field(default=10, ge=1)
    precision: Precision = Precision.f32

    def config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            adam=AdamHyper(lr=self.lr),
            log_every=self.log_every,
            precision=self.precision,
        )


class OutputSection(_Section):
    checkpoint: Path | None = None
    pca: Path | None = None
    metrics: Path | None = None
    map: Path | None = None


class RunConfig(_Section):
    scene: SceneSection
    pca: PcaSection = Field(default_factory=PcaSection)
    patches: PatchSection = Field(default_factory=PatchSection)
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainSection = Field(default_factory=TrainSection)
    outputs: OutputSection = Field(default_factory=OutputSection)

    def seeds(self) -> dict[str, int]:
        seeds = {"split": self.patches.seed, "init": self.model.seed, "train": self.train.seed}
        if self.model.surgery is not None:
            seeds["head"] = self.model.surgery.head_seed
        return seeds


_PATH_KEYS: Final = (
    ("scene", "path"),
    ("pca", "checkpoint"),
    ("model", "checkpoint"),
    ("outputs", "checkpoint"),
    ("outputs", "pca"),
    ("outputs", "metrics"),
    ("outputs", "map"),
)


def parse_overrides(args: Sequence[str]) -> list[tuple[str, str]]:
    """``["--train.epochs", "3"]`` -> ``[("train.epochs", "3")]``."""
    pairs: list[tuple[str, str]] = []
    items = list(args)
    while items:
        flag = items.pop(0)
        if not flag.startswith("--") or "." not in flag:
            raise ConfigError(
                f"unexpected argument {flag!r}; overrides look like --section.key value"
            )
        key = flag[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        elif items:
            value = items.pop(0)
        else:
            raise ConfigError(f"override {flag} has no value")
        pairs.append((key, value))
    return pairs


def _coerce(value: str) -> Any:
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def apply_overrides(
    document: dict[str, Any], overrides: Sequence[tuple[str, str]]
) -> dict[str, Any]:
    """Set dot-path keys on a copy of *document*; values parse as JSON when they can."""
    result = json.loads(json.dumps(document))
    for key, raw in overrides:
        parts = key.split(".")
        node = result
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {key}: {part!r} is not a section")
            node = child
        node[parts[-1]] = _coerce(raw)
        logger.debug("override %s = %r", key, node[parts[-1]])
    return result


def _resolve_paths(document: dict[str, Any], base: Path) -> None:
    for section, key in _PATH_KEYS:
        node = document.get(section)
        if isinstance(node, dict) and isinstance(node.get(key), str):
            path = Path(node[key])
            node[key] = str(path if path.is_absolute() else base / path)


def parse_config(
    document: dict[str, Any],
    overrides: Sequence[tuple[str, str]] = (),
    base: Path | None = None,
) -> RunConfig:
    """Validate a config document after applying overrides."""
    merged = apply_overrides(document, overrides)
    if base is not None:
        _resolve_paths(merged, base)
    try:
        return RunConfig.model_validate(merged)
    except pydantic.ValidationError as exc:
        raise ConfigError(f"invalid run config: {exc}") from exc


def load_config(path: str | Path, overrides: Sequence[tuple[str, str]] = ()) -> RunConfig:
    """Read a JSON run config; relative paths resolve against its directory."""
    config_path = Path(path)
    try:
        text = config_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return parse_config(document, overrides, config_path.parent)


__all__ = [
    "DEFAULT_SEED",
    "ModelSection",
    "OutputSection",
    "PatchSection",
    "PcaSection",
    "RunConfig",
    "SceneSection",
    "SurgerySection",
    "TrainSection",
    "apply_overrides",
    "load_config",
    "parse_config",
    "parse_overrides",
]
