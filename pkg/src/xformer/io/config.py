"""YAML configuration document with ``model``, ``bench`` and ``train`` sections.

Every section and key is optional; missing values take the defaults, which
describe the full-size network. Unknown keys and wrongly typed values are
rejected with a :class:`ConfigError` naming the dotted key path.

Example::

    model:
      resolution: 224
      classes: 10
    bench:
      resolutions: [256, 512]
      wall_clock: false
    train:
      steps: 200
      lr: 0.1
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import re

import yaml

from ..model.spec import ModelSpec, SpecError, StageSpec, toy_spec
from ..model.train import DEFAULT_LR, DEFAULT_STEPS, TRAIN_SAMPLES

SWEEP_RESOLUTIONS = (256, 512, 768, 1024, 1280)


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class BenchConfig:
    resolutions: tuple = SWEEP_RESOLUTIONS
    wall_clock: bool = False
    repeats: int = 11
    warmup: int = 3


@dataclass(frozen=True)
class TrainConfig:
    """``model: toy`` trains the small documented network; ``model: config``
    trains whatever the ``model`` section describes."""

    steps: int = DEFAULT_STEPS
    lr: float = DEFAULT_LR
    seed: int = 0
    samples: int = TRAIN_SAMPLES
    model: str = "toy"


@dataclass(frozen=True)
class ConfigDoc:
    model: ModelSpec = field(default_factory=ModelSpec)
    bench: BenchConfig = field(default_factory=BenchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def train_spec(self) -> ModelSpec:
        return self.model if self.train.model == "config" else toy_spec()


# document key -> ModelSpec field
_MODEL_KEYS = {
    "resolution": "resolution",
    "classes": "num_classes",
    "in_channels": "in_channels",
    "stem_channels": "stem_channels",
    "head_channels": "head_channels",
    "patch_size": "patch_size",
    "expansion": "expansion",
    "se_reduction": "se_reduction",
    "attention": "attention",
    "mhsa_heads": "mhsa_heads",
}
_STAGE_KEYS = ("out_channels", "stride", "mv3_repeats", "xf_depth", "embed_dim", "qkv_dim", "mlp_ratio")


def _int(value, key, minimum=1) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        raise ConfigError(key, f"expected an integer >= {minimum}, got {value!r}")
    return value


def _mapping(value, key) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(key, f"expected a mapping, got {type(value).__name__}")
    return value


def _reject_unknown(section: dict, allowed, prefix: str) -> None:
    for k in section:
        if k not in allowed:
            raise ConfigError(f"{prefix}.{k}" if prefix else str(k), "unknown key")


def _parse_stage(raw, key) -> StageSpec:
    raw = _mapping(raw, key)
    _reject_unknown(raw, _STAGE_KEYS, key)
    if "out_channels" not in raw:
        raise ConfigError(f"{key}.out_channels", "required")
    values = {}
    for name in _STAGE_KEYS:
        if name in raw and raw[name] is not None:
            minimum = 0 if name in ("mv3_repeats", "xf_depth") else 1
            values[name] = _int(raw[name], f"{key}.{name}", minimum)
    return StageSpec(**values)


def _parse_model(raw) -> ModelSpec:
    raw = _mapping(raw, "model")
    _reject_unknown(raw, list(_MODEL_KEYS) + ["stages"], "model")
    values: dict[str, Any] = {}
    for key, attr in _MODEL_KEYS.items():
        if key not in raw:
            continue
        v = raw[key]
        if key == "attention":
            if v not in ("xfa", "mhsa"):
                raise ConfigError("model.attention", f"expected 'xfa' or 'mhsa', got {v!r}")
            values[attr] = v
        else:
            values[attr] = _int(v, f"model.{key}")
    if "stages" in raw:
        stages = raw["stages"]
        if not isinstance(stages, list) or not stages:
            raise ConfigError("model.stages", "expected a non-empty list of stages")
        values["stages"] = tuple(_parse_stage(s, f"model.stages[{i}]") for i, s in enumerate(stages, start=1))
    try:
        return ModelSpec(**values)
    except SpecError as exc:
        key = exc.key
        inverse = {v: k for k, v in _MODEL_KEYS.items()}
        raise ConfigError(f"model.{inverse.get(key, key)}", str(exc).split(": ", 1)[-1]) from None


def _parse_bench(raw) -> BenchConfig:
    raw = _mapping(raw, "bench")
    _reject_unknown(raw, [f.name for f in dataclasses.fields(BenchConfig)], "bench")
    values: dict[str, Any] = {}
    if "resolutions" in raw:
        res = raw["resolutions"]
        if not isinstance(res, list) or not res:
            raise ConfigError("bench.resolutions", "expected a non-empty list of integers")
        values["resolutions"] = tuple(_int(r, f"bench.resolutions[{i}]") for i, r in enumerate(res, start=1))
        if any(b <= a for a, b in zip(values["resolutions"], values["resolutions"][1:])):
            raise ConfigError("bench.resolutions", "must be strictly ascending")
    if "wall_clock" in raw:
        if not isinstance(raw["wall_clock"], bool):
            raise ConfigError("bench.wall_clock", f"expected true or false, got {raw['wall_clock']!r}")
        values["wall_clock"] = raw["wall_clock"]
    for key in ("repeats", "warmup"):
        if key in raw:
            values[key] = _int(raw[key], f"bench.{key}", 1 if key == "repeats" else 0)
    return BenchConfig(**values)


def _parse_train(raw) -> TrainConfig:
    raw = _mapping(raw, "train")
    _reject_unknown(raw, [f.name for f in dataclasses.fields(TrainConfig)], "train")
    values: dict[str, Any] = {}
    for key, minimum in (("steps", 0), ("seed", 0), ("samples", 2)):
        if key in raw:
            values[key] = _int(raw[key], f"train.{key}", minimum)
    if "lr" in raw:
        lr = raw["lr"]
        if isinstance(lr, bool) or not isinstance(lr, (int, float)) or lr < 0 or lr != lr:
            raise ConfigError("train.lr", f"expected a non-negative number, got {lr!r}")
        values["lr"] = float(lr)
    if "model" in raw:
        if raw["model"] not in ("toy", "config"):
            raise ConfigError("train.model", f"expected 'toy' or 'config', got {raw['model']!r}")
        values["model"] = raw["model"]
    return TrainConfig(**values)


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot, such as ``1e-3``."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"),
)


def parse_config(text: str) -> ConfigDoc:
    """Parse a YAML document.

    Raises:
        ConfigError: on malformed YAML, unknown keys or invalid values.
    """
    try:
        raw = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        raise ConfigError("<document>", f"malformed YAML: {exc}") from None
    raw = _mapping(raw, "<document>")
    _reject_unknown(raw, ("model", "bench", "train"), "")
    return ConfigDoc(_parse_model(raw.get("model")), _parse_bench(raw.get("bench")), _parse_train(raw.get("train")))


def load_config(path: Optional[str]) -> ConfigDoc:
    if path is None:
        return ConfigDoc()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text)


def _model_dict(spec: ModelSpec) -> dict:
    out: dict[str, Any] = {key: getattr(spec, attr) for key, attr in _MODEL_KEYS.items()}
    out["stages"] = [
        {k: getattr(st, k) for k in _STAGE_KEYS if getattr(st, k) is not None and not (k in ("mv3_repeats", "xf_depth") and getattr(st, k) == 0)}
        for st in spec.stages
    ]
    return out


def to_dict(doc: ConfigDoc) -> dict:
    bench = dataclasses.asdict(doc.bench)
    bench["resolutions"] = list(bench["resolutions"])
    return {"model": _model_dict(doc.model), "bench": bench, "train": dataclasses.asdict(doc.train)}


def emit_config(doc: ConfigDoc) -> str:
    """Canonical YAML text: every key present, fixed key order."""
    return yaml.safe_dump(to_dict(doc), sort_keys=False, default_flow_style=None)


def default_config_text() -> str:
    return emit_config(ConfigDoc())

