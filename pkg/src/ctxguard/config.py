"""Single-document configuration shared by the library, service and CLI.

One YAML file carries every section (encoder, kb, model, perturbation,
training, service). Overrides layer in a documented precedence: command-line
``--set section.key=value`` flags beat ``CTXGUARD_SECTION__KEY`` environment
variables, which beat the file, which beats built-in defaults. The config
hash pins the merged result for reproducibility manifests.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any, Mapping

import yaml

from .encoder import EncoderConfig
from .perturb import PerturbationConfig

ENV_PREFIX = "CTXGUARD_"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class KbSettings:
    k: int = 5
    epsilon: float = 0.4
    delta: float = 0.2
    scan_dtype: str = "float64"  # float32 halves scan memory traffic when serving

    def __post_init__(self) -> None:
        if self.scan_dtype not in ("float64", "float32"):
            raise ValueError(f"scan_dtype must be float64 or float32, got {self.scan_dtype!r}")

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "scan_dtype": self.scan_dtype,
        }


@dataclass(frozen=True)
class CapacitySettings:
    hidden_layers: int
    hidden_width: int

    def to_dict(self) -> dict:
        return {"hidden_layers": self.hidden_layers, "hidden_width": self.hidden_width}


@dataclass(frozen=True)
class ModelSettings:
    teacher: CapacitySettings = CapacitySettings(2, 256)
    student: CapacitySettings = CapacitySettings(1, 64)
    init_seed: int = 7

    def to_dict(self) -> dict:
        return {
            "teacher": self.teacher.to_dict(),
            "student": self.student.to_dict(),
            "init_seed": self.init_seed,
        }


@dataclass(frozen=True)
class TrainingSettings:
    epochs: int = 12
    lr: float = 0.3
    batch_size: int = 32
    seed: int = 13
    momentum: float = 0.0
    kl_weight: float = 0.6
    ce_weight: float = 0.4
    reward_weight: float = 0.0
    schedule: str = "canonical"  # or comma-separated modes like "0,0,2,2,1,1"

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "momentum": self.momentum,
            "kl_weight": self.kl_weight,
            "ce_weight": self.ce_weight,
            "reward_weight": self.reward_weight,
            "schedule": self.schedule,
        }


@dataclass(frozen=True)
class ServiceSettings:
    host: str = "127.0.0.1"
    port: int = 8787
    tau_ms: float = 10.0
    metrics_window_s: float = 60.0
    strict_budget: bool = False
    retrieval_budget_ms: float = 5.0

    def to_dict(self) -> dict:
        return {
            "host": self.host,
            "port": self.port,
            "tau_ms": self.tau_ms,
            "metrics_window_s": self.metrics_window_s,
            "strict_budget": self.strict_budget,
            "retrieval_budget_ms": self.retrieval_budget_ms,
        }


@dataclass(frozen=True)
class AppConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    kb: KbSettings = field(default_factory=KbSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    training: TrainingSettings = field(default_factory=TrainingSettings)
    service: ServiceSettings = field(default_factory=ServiceSettings)
    label_map: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "kb": self.kb.to_dict(),
            "model": self.model.to_dict(),
            "perturbation": self.perturbation.to_dict(),
            "training": self.training.to_dict(),
            "service": self.service.to_dict(),
            "label_map": dict(sorted(self.label_map.items())),
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


_COERCIBLE = {"int": int, "float": float, "str": str, "bool": bool}


def _build_section(cls, data: Mapping[str, Any], section: str):
    fields = cls.__dataclass_fields__
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    coerced = {}
    for key, value in data.items():
        # yaml leaves scientific notation like "1e-06" as a string; coerce
        # scalars to the declared field type
        target = _COERCIBLE.get(fields[key].type)
        if target is not None and not isinstance(value, target):
            try:
                value = target(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid value for {section}.{key}: {exc}") from exc
        coerced[key] = value
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] config: {exc}") from exc


def config_from_dict(doc: Mapping[str, Any]) -> AppConfig:
    doc = dict(doc or {})
    known_sections = {
        "encoder", "kb", "model", "perturbation", "training", "service", "label_map",
    }
    unknown = set(doc) - known_sections
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    try:
        encoder = EncoderConfig.from_dict(doc.get("encoder", {}))
        perturbation = PerturbationConfig.from_dict(doc.get("perturbation", {}))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    model_doc = dict(doc.get("model", {}))
    for role in ("teacher", "student"):
        if role in model_doc:
            model_doc[role] = _build_section(CapacitySettings, model_doc[role], f"model.{role}")
    return AppConfig(
        encoder=encoder,
        kb=_build_section(KbSettings, doc.get("kb", {}), "kb"),
        model=_build_section(ModelSettings, model_doc, "model"),
        perturbation=perturbation,
        training=_build_section(TrainingSettings, doc.get("training", {}), "training"),
        service=_build_section(ServiceSettings, doc.get("service", {}), "service"),
        label_map=dict(doc.get("label_map", {})),
    )


def _parse_value(raw: str) -> Any:
    try:
        return yaml.safe_load(raw)
    except yaml.YAMLError:
        return raw


def _set_path(doc: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = doc
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override {dotted}: {part} is not a section")
    node[parts[-1]] = value


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    """CTXGUARD_SECTION__KEY=value pairs as a nested override document."""
    environ = environ if environ is not None else os.environ
    doc: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        dotted = name[len(ENV_PREFIX):].lower().replace("__", ".")
        _set_path(doc, dotted, _parse_value(raw))
    return doc


def _deep_merge(base: dict, override: Mapping[str, Any]) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(
    path: str | None = None,
    *,
    overrides: list[str] | None = None,
    environ: Mapping[str, str] | None = None,
) -> AppConfig:
    """Merge defaults, file, env and flag overrides (lowest to highest)."""
    doc: dict = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            loaded = yaml.safe_load(f)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file must be a mapping, got {type(loaded).__name__}")
        doc = loaded
    doc = _deep_merge(doc, env_overrides(environ))
    flag_doc: dict = {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        _set_path(flag_doc, dotted.strip(), _parse_value(raw))
    doc = _deep_merge(doc, flag_doc)
    return config_from_dict(doc)


def save_config(cfg: AppConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True)
