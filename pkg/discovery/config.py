"""Configuration for discovery runs: dotted-key run files plus environment defaults."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Tuple, Union

from dotenv import dotenv_values, load_dotenv

from tools.cluster_evaluation import EvalConfig
from tools.consistency_voting import VoteConfig
from tools.feature_dataset import SyntheticConfig
from tools.gcd_losses import LossOptions, LossWeights, Temperatures
from tools.gcd_model import ModelConfig
from tools.prototype_memory import MemoryConfig
from tools.residual_fusion import FusionConfig
from tools.train_gcd_model import AblationConfig, TrainConfig, TrainingSetup

load_dotenv()

PathLike = Union[str, Path]


class ConfigError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


def _env_bool(name: str, default: bool = False) -> bool:
    raw = os.getenv(name)
    if raw is None:
        return default
    return raw.strip().lower() in {"1", "true", "yes", "on"}


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"Environment variable {name} must be an integer, got {raw!r}", key=name) from None


@dataclass(frozen=True)
class AppConfig:
    """Ambient options for the command-line surface, read from the environment."""

    threads: int
    artifact_dir: str
    run_slow_tests: bool

    @staticmethod
    def from_env() -> "AppConfig":
        return AppConfig(
            threads=_env_int("GCD_THREADS", 1),
            artifact_dir=os.getenv("GCD_ARTIFACT_DIR", ".tmp/gcd_runs"),
            run_slow_tests=_env_bool("GCD_RUN_SLOW_TESTS", False),
        )


@dataclass(frozen=True)
class GradCheckConfig:
    batch: int = 8
    hidden: int = 32
    proj_dim: int = 16
    step: float = 1e-5
    tol: float = 1e-6

    def validate(self) -> None:
        if self.batch < 2:
            raise ValueError(f"gradcheck.batch must be >= 2, got {self.batch}")
        if self.hidden < 1 or self.proj_dim < 1:
            raise ValueError("gradcheck.hidden and gradcheck.proj_dim must be >= 1")
        if not (self.step > 0 and self.tol > 0):
            raise ValueError("gradcheck.step and gradcheck.tol must be > 0")


# parse / dump helpers ------------------------------------------------------

def _parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in {"1", "true", "yes", "on"}:
        return True
    if value in {"0", "false", "no", "off"}:
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _parse_optional_float(raw: str) -> Optional[float]:
    return None if raw.strip().lower() == "auto" else float(raw)


def _parse_optional_int(raw: str) -> Optional[int]:
    return None if raw.strip().lower() == "auto" else int(raw)


def parse_k_grid(raw: str) -> Optional[Tuple[int, ...]]:
    """'auto', 'a:b' (inclusive range) or 'a,b,c'."""
    value = raw.strip().lower()
    if value == "auto":
        return None
    if ":" in value:
        start, stop = (int(part) for part in value.split(":", 1))
        return tuple(range(start, stop + 1))
    return tuple(int(part) for part in value.split(",") if part.strip())


def _dump_value(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class _Key:
    section: str
    attr: str
    parse: Callable[[str], object]


_KEYS: Dict[str, _Key] = {
    "data.dim": _Key("data", "dim", int),
    "data.classes_spatial": _Key("data", "n_spatial_protos", int),
    "data.temporal_per_spatial": _Key("data", "temporal_per_spatial", int),
    "data.samples_per_class": _Key("data", "samples_per_class", int),
    "data.noise_sigma": _Key("data", "noise_sigma", float),
    "data.labeled_fraction": _Key("data", "labeled_fraction", float),
    "data.seed": _Key("data", "seed", int),
    "data.split": _Key("data", "split", str.strip),
    "fusion.tau_attn": _Key("fusion", "tau_attn", float),
    "fusion.epsilon": _Key("fusion", "epsilon", float),
    "vote.levels": _Key("vote", "levels", int),
    "vote.eta": _Key("vote", "eta", float),
    "vote.literal_labels": _Key("vote", "literal_labels", _parse_bool),
    "vote.k_unknown": _Key("vote", "k_unknown", _parse_bool),
    "loss.tau_h": _Key("temps", "tau_h", float),
    "loss.tau_h_i": _Key("temps", "tau_h_i", float),
    "loss.tau_cl": _Key("temps", "tau_cl", float),
    "loss.tau_tl": _Key("temps", "tau_tl", float),
    "loss.tau_sl": _Key("temps", "tau_sl", float),
    "loss.lambda_sup": _Key("weights", "lambda_sup", float),
    "loss.lambda_unsup": _Key("weights", "lambda_unsup", _parse_optional_float),
    "loss.lambda_s": _Key("weights", "lambda_s", float),
    "loss.proto_mode": _Key("options", "proto_mode", str.strip),
    "loss.kl_order": _Key("options", "kl_order", str.strip),
    "loss.hcl_reduction": _Key("options", "hcl_reduction", str.strip),
    "loss.tau_s": _Key("options", "tau_s", float),
    "loss.tau_t": _Key("options", "tau_t", float),
    "loss.entropy_weight": _Key("options", "entropy_weight", float),
    "memory.fraction": _Key("memory", "fraction", float),
    "model.hidden": _Key("model", "hidden", int),
    "model.proj_dim": _Key("model", "proj_dim", int),
    "train.lr": _Key("train", "lr", float),
    "train.momentum": _Key("train", "momentum", float),
    "train.weight_decay": _Key("train", "weight_decay", float),
    "train.batch_size": _Key("train", "batch_size", int),
    "train.epochs_stage1": _Key("train", "epochs_stage1", int),
    "train.epochs_stage2": _Key("train", "epochs_stage2", int),
    "train.aug_sigma": _Key("train", "aug_sigma", float),
    "train.aug_drop": _Key("train", "aug_drop", float),
    "train.seed": _Key("train", "seed", int),
    "train.precision": _Key("train", "precision", str.strip),
    "train.lr_schedule": _Key("train", "lr_schedule", str.strip),
    "train.eval_every_epoch": _Key("train", "eval_every_epoch", _parse_bool),
    "eval.space": _Key("eval", "space", str.strip),
    "eval.k": _Key("eval", "k", _parse_optional_int),
    "eval.k_grid": _Key("eval", "k_grid", parse_k_grid),
    "eval.seed": _Key("eval", "seed", int),
    "ablation.fusion": _Key("ablation", "fusion", _parse_bool),
    "ablation.hcl": _Key("ablation", "hcl", _parse_bool),
    "ablation.feature_proto": _Key("ablation", "feature_proto", _parse_bool),
    "ablation.logit_proto": _Key("ablation", "logit_proto", _parse_bool),
    "gradcheck.batch": _Key("gradcheck", "batch", int),
    "gradcheck.hidden": _Key("gradcheck", "hidden", int),
    "gradcheck.proj_dim": _Key("gradcheck", "proj_dim", int),
    "gradcheck.step": _Key("gradcheck", "step", float),
    "gradcheck.tol": _Key("gradcheck", "tol", float),
}

CONFIG_KEYS: Tuple[str, ...] = tuple(_KEYS)


@dataclass(frozen=True)
class RunConfig:
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    vote: VoteConfig = field(default_factory=VoteConfig)
    temps: Temperatures = field(default_factory=Temperatures)
    weights: LossWeights = field(default_factory=LossWeights)
    options: LossOptions = field(default_factory=LossOptions)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    gradcheck: GradCheckConfig = field(default_factory=GradCheckConfig)

    @staticmethod
    def from_mapping(values: Mapping[str, Optional[str]]) -> "RunConfig":
        """Build from raw ``key -> text`` pairs; unknown keys are rejected."""
        sections: Dict[str, Dict[str, object]] = {}
        for key, raw in values.items():
            spec = _KEYS.get(key)
            if spec is None:
                raise ConfigError(f"Unknown config key: {key}", key=key)
            if raw is None or not str(raw).strip():
                raise ConfigError(f"Config key {key} has no value", key=key)
            try:
                parsed = spec.parse(str(raw))
            except ValueError as exc:
                raise ConfigError(f"Invalid value for {key}: {raw!r} ({exc})", key=key) from None
            sections.setdefault(spec.section, {})[spec.attr] = parsed

        defaults = RunConfig()
        config = RunConfig(
            **{name: replace(getattr(defaults, name), **overrides) for name, overrides in sections.items()}
        )
        config.validate()
        return config

    @staticmethod
    def load(path: PathLike) -> "RunConfig":
        source = Path(path)
        if not source.exists():
            raise FileNotFoundError(f"Config file not found: {source}")
        return RunConfig.from_mapping(dotenv_values(source, interpolate=False))

    def with_overrides(self, overrides: Mapping[str, str]) -> "RunConfig":
        merged = dict(self.to_mapping())
        merged.update(overrides)
        return RunConfig.from_mapping(merged)

    def validate(self) -> None:
        checks = [
            ("data", self.data.validate),
            ("fusion", self.fusion.validate),
            ("vote", lambda: self.vote.validate(self.data.num_classes)),
            ("loss", self.temps.validate),
            ("loss", self.weights.validate),
            ("loss", self.options.validate),
            ("memory", self.memory.validate),
            ("model", self.model.validate),
            ("train", self.train.validate),
            ("eval", self.eval.validate),
            ("gradcheck", self.gradcheck.validate),
        ]
        for section, check in checks:
            try:
                check()
            except ValueError as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"Invalid {section} settings: {exc}", key=section) from None

    def value_of(self, key: str):
        spec = _KEYS.get(key)
        if spec is None:
            raise ConfigError(f"Unknown config key: {key}", key=key)
        return getattr(getattr(self, spec.section), spec.attr)

    def to_mapping(self) -> Dict[str, str]:
        return {key: _dump_value(self.value_of(key)) for key in CONFIG_KEYS}

    def to_lines(self) -> List[str]:
        return [f"{key} = {value}" for key, value in self.to_mapping().items()]

    def save(self, path: PathLike) -> Path:
        output = Path(path)
        output.parent.mkdir(parents=True, exist_ok=True)
        output.write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8")
        return output

    def training_setup(self) -> TrainingSetup:
        return TrainingSetup(
            model=self.model,
            train=self.train,
            fusion=self.fusion,
            vote=self.vote,
            temps=self.temps,
            weights=self.weights,
            options=self.options,
            memory=self.memory,
            ablation=self.ablation,
            eval=self.eval,
        )
