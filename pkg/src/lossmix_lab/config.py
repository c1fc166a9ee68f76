"""Experiment configuration.

Config files are flat ``section.key = value`` lines (``#`` starts a comment).
Values are parsed as JSON when possible, otherwise taken as bare strings, then
coerced to the field type. Unknown keys and constraint violations raise
:class:`ConfigError` naming the offending key.

Example::

    iters = 2000
    mix.strategy = lossmix
    mix.alpha = 1.0
    scene.max_objects = 3
    da.lambda_disc = 0.1
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Any

from .mixing import MixConfig
from .scenegen import SceneConfig

SECTIONS = ("scene", "mix", "detector", "da")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


@dataclass(frozen=True)
class DetectorSettings:
    num_proposals: int = 16
    hidden: int = 64
    pool_size: int = 4

    def __post_init__(self):
        if self.num_proposals < 1:
            raise ValueError("detector.num_proposals must be >= 1")
        if self.hidden < 1 or self.pool_size < 1:
            raise ValueError("detector.hidden and detector.pool_size must be >= 1")


@dataclass(frozen=True)
class DAConfig:
    lambda_mss: float = 1.0
    lambda_nst: float = 1.0
    lambda_mtt: float = 1.0
    lambda_mst: float = 1.0
    lambda_disc: float = 0.1
    pseudo_thresh: float = 0.3
    warmup_iters: int = 500
    adapt_iters: int = 1500
    noise_lambda_max: float = 0.1
    ema_momentum: float = 0.999
    mst_lambda: str = "beta"  # "beta" for Beta(alpha, alpha) or a fixed number such as "0.5"
    strong_noise: float = 0.1
    disc_hidden: int = 32
    n_target_train: int = 512

    def __post_init__(self):
        for k in ("lambda_mss", "lambda_nst", "lambda_mtt", "lambda_mst", "lambda_disc"):
            if getattr(self, k) < 0:
                raise ValueError(f"da.{k} must be >= 0")
        if not (0.0 < self.pseudo_thresh < 1.0):
            raise ValueError("da.pseudo_thresh must lie in (0, 1)")
        if self.warmup_iters < 0 or self.adapt_iters < 0:
            raise ValueError("da.warmup_iters and da.adapt_iters must be >= 0")
        if not (0.0 < self.noise_lambda_max < 0.5):
            raise ValueError("da.noise_lambda_max must lie in (0, 0.5)")
        if not (0.0 <= self.ema_momentum <= 1.0):
            raise ValueError("da.ema_momentum must lie in [0, 1]")
        if self.mst_lambda != "beta":
            try:
                v = float(self.mst_lambda)
            except ValueError:
                raise ValueError("da.mst_lambda must be 'beta' or a number in [0, 1]") from None
            if not 0.0 <= v <= 1.0:
                raise ValueError("da.mst_lambda must lie in [0, 1]")
        if self.strong_noise < 0:
            raise ValueError("da.strong_noise must be >= 0")
        if self.n_target_train < 1:
            raise ValueError("da.n_target_train must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    mix: MixConfig = field(default_factory=MixConfig)
    detector: DetectorSettings = field(default_factory=DetectorSettings)
    da: DAConfig | None = None
    iters: int = 2000
    batch_size: int = 8
    lr: float = 0.05
    lr_warmup_iters: int = 100
    lr_warmup_factor: float = 0.001
    clip_norm: float = 10.0
    eval_every: int = 500
    seed: int = 7
    n_train: int = 512
    n_val: int = 128
    score_thresh: float = 0.05
    nms_iou: float = 0.5
    output_dir: str = ""

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.lr_warmup_iters < 0 or not (0 < self.lr_warmup_factor <= 1):
            raise ValueError("lr_warmup_iters must be >= 0 and lr_warmup_factor in (0, 1]")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0 (0 disables clipping)")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")
        if self.n_train < 1 or self.n_val < 1:
            raise ValueError("n_train and n_val must be >= 1")
        if not (0 < self.score_thresh < 1 and 0 < self.nms_iou < 1):
            raise ValueError("score_thresh and nms_iou must lie in (0, 1)")

    def replace(self, **changes) -> "TrainConfig":
        """Copy with changes; dotted keys (``mix.alpha``) reach into sections."""
        flat = to_flat(self)
        for k, v in changes.items():
            k = k.replace("__", ".")
            if k == "da" and v is None:
                flat = {fk: fv for fk, fv in flat.items() if not fk.startswith("da.")}
                flat["da"] = None
                continue
            if k not in flat and not _known_key(k):
                raise ConfigError(k, "unknown key")
            flat[k] = v
        return from_flat(flat)


# ---------------------------------------------------------------------------
# flat key/value representation


def _section_class(name):
    return {"scene": SceneConfig, "mix": MixConfig, "detector": DetectorSettings, "da": DAConfig}[name]


def _known_key(key: str) -> bool:
    if "." in key:
        sec, sub = key.split(".", 1)
        return sec in SECTIONS and sub in {f.name for f in dataclasses.fields(_section_class(sec))}
    return key in {f.name for f in dataclasses.fields(TrainConfig)} and key not in SECTIONS


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


def to_flat(cfg: TrainConfig) -> dict:
    out: dict = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in SECTIONS:
            if v is None:
                out[f.name] = None
                continue
            for sf in dataclasses.fields(v):
                out[f"{f.name}.{sf.name}"] = _jsonable(getattr(v, sf.name))
        else:
            out[f.name] = v
    return out


def _coerce(key: str, value: Any, default: Any):
    kind = type(default)
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
                return value.lower() in ("true", "1", "yes")
            raise TypeError
        if isinstance(default, int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, str):
            return value if isinstance(value, str) else json.dumps(value)
        if isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise TypeError
            return tuple(tuple(x) if isinstance(x, list) else x for x in value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected {kind.__name__}, got {value!r}") from None
    return value


def from_flat(flat: dict) -> TrainConfig:
    sections: dict = {s: {} for s in SECTIONS}
    top: dict = {}
    da_enabled = False
    for key, value in flat.items():
        if key == "da":
            if value not in (None, "none", "null", False):
                raise ConfigError("da", "use da.<key> entries to enable domain adaptation")
            continue
        if not _known_key(key):
            raise ConfigError(key, "unknown key")
        if "." in key:
            sec, sub = key.split(".", 1)
            sections[sec][sub] = value
            da_enabled |= sec == "da"
        else:
            top[key] = value
    built = {}
    for sec in SECTIONS:
        if sec == "da" and not da_enabled:
            built["da"] = None
            continue
        cls = _section_class(sec)
        proto = cls()
        kwargs = {k: _coerce(f"{sec}.{k}", v, getattr(proto, k)) for k, v in sections[sec].items()}
        try:
            built[sec] = cls(**kwargs)
        except ValueError as exc:
            raise ConfigError(_offending_key(str(exc), sec), str(exc)) from None
    proto = TrainConfig()
    for k, v in top.items():
        built[k] = _coerce(k, v, getattr(proto, k))
    try:
        return TrainConfig(**built)
    except ValueError as exc:
        raise ConfigError(_offending_key(str(exc), None), str(exc)) from None


def _offending_key(msg: str, section: str | None) -> str:
    head = msg.split(" ", 1)[0].split("/", 1)[0].rstrip(":")
    if section and not head.startswith(section + "."):
        return f"{section}.{head}"
    return head


def _parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_lines(lines) -> dict:
    flat = {}
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}", f"expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        flat[key.strip()] = _parse_value(raw)
    return flat


def parse_config(source=None, overrides: dict | None = None) -> TrainConfig:
    """Build a TrainConfig from a config file path (or None) plus ``key=value`` overrides."""
    flat: dict = {}
    if source is not None:
        with open(os.fspath(source)) as fh:
            flat.update(parse_lines(fh))
    for k, v in (overrides or {}).items():
        flat[k] = _parse_value(v) if isinstance(v, str) else v
    return from_flat(flat)


def parse_flags(flags) -> dict:
    """``["mix.alpha=0.2", "--iters=10"]`` -> ``{"mix.alpha": 0.2, "iters": 10}``."""
    out = {}
    for f in flags:
        f = f.lstrip("-")
        if "=" not in f:
            raise ConfigError(f, "expected key=value")
        k, v = f.split("=", 1)
        out[k.strip().replace("-", "_") if "." not in k else k.strip()] = _parse_value(v)
    return out


def emit_config(cfg: TrainConfig) -> str:
    """Resolved config as flat text; ``parse_lines`` on the result round-trips."""
    lines = []
    for k, v in to_flat(cfg).items():
        if v is None:
            continue
        lines.append(f"{k} = {json.dumps(v)}")
    return "\n".join(lines) + "\n"


def config_to_json(cfg: TrainConfig) -> str:
    return json.dumps(to_flat(cfg), indent=1, sort_keys=True)


def config_from_json(text: str) -> TrainConfig:
    return from_flat(json.loads(text))
