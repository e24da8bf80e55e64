"""Run configuration: one YAML tree covering both stages and the pipeline.

Defaults reproduce the reference setup end to end; any subset of keys may be
overridden from a YAML file.  Unknown keys are hard errors so that typos never
silently fall back to defaults.  Environment variables ``LMSD_WORK_DIR`` and
``LMSD_SEED`` override the working directory and base seed without touching
the file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .backbones import AttentionConfig, ConvTokConfig, MMKConfig, TokenizerConfig
from .keyness import KelConfig
from .training import TrainConfig

WORK_DIR_ENV = "LMSD_WORK_DIR"
SEED_ENV = "LMSD_SEED"
DEFAULT_WORK_DIR = "lmsd_work"


@dataclass(frozen=True)
class HealthArch:
    """Global-attention stage that screens every flight."""

    patch_len: int = 4
    token_dim: int = 512
    encoder_layers: int = 4
    heads: int = 4
    ffn_dim: int = 1024
    dropout: float = 0.01
    attention_mode: str = "global"
    window_half_width: int | None = None
    qkv_kernel: int = 3


@dataclass(frozen=True)
class FaultArch:
    """Multi-kernel convolutional stage that classifies routed anomalies."""

    blocks: int = 4
    filters: int = 256
    kernel_set: tuple[int, ...] = (1, 3, 5)
    bottleneck_dim: int | None = None
    head_hidden_dim: int | None = 2048
    dropout: float = 0.01
    residual_period: int = 3


@dataclass(frozen=True)
class TrainSection:
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 3
    internal_split: float = 0.9
    k_da: int = 3


@dataclass(frozen=True)
class KeynessSection:
    stride: int = 32
    temperature: float = 1.2
    hidden_channels: int = 16
    layer1_kernel: int = 8
    layer1_stride: int = 8
    layer2_kernel: int = 4
    layer2_stride: int = 4
    distill_epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 32


@dataclass(frozen=True)
class PenaltySection:
    """Asymmetric costs for the composite diagnosis score."""

    missed_anomaly_weight: float = 2.5
    false_alarm_weight: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    """``train`` applies to both cascade stages; ``train_ad``/``train_fc``
    override it for one stage when the stages need different recipes."""

    seed: int = 0
    folds: int = 5
    target_len: int = 2048
    max_missing_rate: float = 0.10
    health: HealthArch = field(default_factory=HealthArch)
    fault: FaultArch = field(default_factory=FaultArch)
    train: TrainSection = field(default_factory=TrainSection)
    train_ad: TrainSection | None = None
    train_fc: TrainSection | None = None
    keyness: KeynessSection = field(default_factory=KeynessSection)
    penalty: PenaltySection = field(default_factory=PenaltySection)

    # -- construction ------------------------------------------------------

    @staticmethod
    def from_dict(tree: Mapping[str, Any]) -> "RunConfig":
        return _build(RunConfig, tree, path="")

    @staticmethod
    def from_yaml(path: str | Path) -> "RunConfig":
        text = Path(path).read_text()
        tree = yaml.safe_load(text)
        if tree is None:
            tree = {}
        if not isinstance(tree, dict):
            raise ValueError(f"config root must be a mapping, got {type(tree).__name__}")
        return RunConfig.from_dict(tree)

    @staticmethod
    def load(path: str | Path | None = None) -> "RunConfig":
        """Defaults, optionally overlaid with a YAML file, then env overrides."""
        cfg = RunConfig() if path is None else RunConfig.from_yaml(path)
        env_seed = os.environ.get(SEED_ENV)
        if env_seed is not None:
            try:
                cfg = dataclasses.replace(cfg, seed=int(env_seed))
            except ValueError as exc:
                raise ValueError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from exc
        return cfg

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        def convert(obj: Any) -> Any:
            if dataclasses.is_dataclass(obj):
                return {f.name: convert(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
            if isinstance(obj, tuple):
                return [convert(v) for v in obj]
            return obj

        return convert(self)

    def to_yaml(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
        return path

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    # -- model/config builders ---------------------------------------------

    def health_model_config(self, n_channels: int) -> ConvTokConfig:
        h = self.health
        return ConvTokConfig(
            in_channels=n_channels,
            tokenizer=TokenizerConfig(patch_len=h.patch_len, token_dim=h.token_dim),
            attention=AttentionConfig(
                encoder_layers=h.encoder_layers,
                heads=h.heads,
                ffn_dim=h.ffn_dim,
                dropout=h.dropout,
                attention_mode=h.attention_mode,
                window_half_width=h.window_half_width,
                qkv_kernel=h.qkv_kernel,
            ),
            head_dim=2,
        )

    def fault_model_config(self, n_channels: int, n_fault_classes: int) -> MMKConfig:
        f = self.fault
        return MMKConfig(
            in_channels=n_channels,
            blocks=f.blocks,
            filters=f.filters,
            kernel_set=f.kernel_set,
            bottleneck_dim=f.bottleneck_dim,
            dropout=f.dropout,
            residual_period=f.residual_period,
            head_hidden_dim=f.head_hidden_dim,
            head_dim=n_fault_classes,
        )

    def train_section(self, stage: str) -> TrainSection:
        override = {"ad": self.train_ad, "fc": self.train_fc}.get(stage)
        return override if override is not None else self.train

    def train_config(self, stage: str, seed: int) -> TrainConfig:
        t = self.train_section(stage)
        return TrainConfig(
            stage=stage,
            lr=t.lr,
            batch_size=t.batch_size,
            max_epochs=t.max_epochs,
            early_stop_patience=t.patience,
            seed=seed,
            internal_split=t.internal_split,
            augmentation="replication" if stage == "fc" else "off",
            k_da=t.k_da,
        )

    def kel_config(self, seed: int) -> KelConfig:
        k = self.keyness
        return KelConfig(
            stride=k.stride,
            temperature=k.temperature,
            hidden_channels=k.hidden_channels,
            layer1_kernel=k.layer1_kernel,
            layer1_stride=k.layer1_stride,
            layer2_kernel=k.layer2_kernel,
            layer2_stride=k.layer2_stride,
            distill_epochs=k.distill_epochs,
            lr=k.lr,
            batch_size=k.batch_size,
            seed=seed,
            internal_split=self.train.internal_split,
        )


def _build(cls: type, tree: Mapping[str, Any], path: str) -> Any:
    """Instantiate a dataclass from a mapping, rejecting unknown keys."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(tree) - set(fields))
    if unknown:
        where = path or "top level"
        raise ValueError(
            f"unknown config key(s) {unknown} at {where}; valid keys: {sorted(fields)}"
        )
    kwargs: dict[str, Any] = {}
    for name, value in tree.items():
        f = fields[name]
        sub = _section_type(f.type)
        if sub is not None:
            if value is None and "None" in str(f.type):
                kwargs[name] = None
                continue
            if not isinstance(value, Mapping):
                raise ValueError(f"config key {path + name!r} must be a mapping")
            kwargs[name] = _build(sub, value, path=f"{path}{name}.")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SECTIONS = {
    "HealthArch": HealthArch,
    "FaultArch": FaultArch,
    "TrainSection": TrainSection,
    "KeynessSection": KeynessSection,
    "PenaltySection": PenaltySection,
}


def _section_type(annotation: Any) -> type | None:
    name = annotation if isinstance(annotation, str) else getattr(annotation, "__name__", "")
    # optional sections are annotated "<Section> | None"
    for part in str(name).split("|"):
        hit = _SECTIONS.get(part.strip())
        if hit is not None:
            return hit
    return None


def resolve_work_dir(explicit: str | Path | None = None) -> Path:
    """CLI flag wins, then the environment override, then the default."""
    if explicit is not None:
        return Path(explicit)
    env = os.environ.get(WORK_DIR_ENV)
    if env:
        return Path(env)
    return Path(DEFAULT_WORK_DIR)
