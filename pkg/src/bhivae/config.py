"""Run configuration: strict JSON parsing into frozen dataclasses.

A minimal config only needs ``mode`` and ``layout``::

    {"mode": "unsupervised",
     "layout": {"s_dims": [2, 2, 2], "h_dims": [8, 6], "c_dim": 4}}
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .model import BlockLayout
from .objectives import LossWeights
from .optim import AdamConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "minidsprites"  # "minidsprites" | "idx" | "dir"
    factors: tuple[dict, ...] = ()  # minidsprites factor specs; empty means the default grid
    resolution: int = 32
    min_size: int = 5000  # replicate the grid to at least this many samples
    images_path: str = ""
    labels_path: str = ""
    path: str = ""
    holdout: float = 0.2


@dataclass(frozen=True)
class ModelConfig:
    encoder_hidden: tuple[int, ...] = (256, 128)
    part_hidden: tuple[int, ...] = (64,)
    merge_width: int = 32
    decoder_hidden: tuple[int, ...] = (128, 256)
    classifier_hidden: tuple[int, ...] = (32,)
    projection_hidden: tuple[int, ...] = (64,)
    discriminator_hidden: tuple[int, ...] = (64, 64)
    init_log_var: float = -5.0


@dataclass(frozen=True)
class MetricConfig:
    bins: int = 20
    votes: int = 600
    pairs: int = 64
    max_samples: int = 10000


@dataclass(frozen=True)
class RunConfig:
    mode: str
    layout: BlockLayout
    weights: LossWeights = LossWeights()
    rho: float = 0.5
    optimizer: AdamConfig = AdamConfig()
    batch_size: int = 128
    total_steps: int = 5000
    seed: int = 0
    dataset: DatasetConfig = DatasetConfig()
    supervised_factors: tuple[str, ...] = ("scale", "pos_x", "shape")
    model: ModelConfig = ModelConfig()
    metrics: MetricConfig = MetricConfig()
    log_every: int = 1

    def to_dict(self) -> dict:
        out = asdict(self)
        out["layout"] = self.layout.to_dict()
        w = out.pop("weights")
        out["beta"], out["gamma"] = w["beta"], w["gamma"]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


REQUIRED = ("mode", "layout")


def _nested(cls, obj, key):
    if not isinstance(obj, dict):
        raise ConfigError(f"{key!r} must be an object")
    names = {f.name for f in fields(cls)}
    for k in obj:
        if k not in names:
            raise ConfigError(f"unknown key {key}.{k!r}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in obj:
            continue
        v = obj[f.name]
        default = getattr(cls(), f.name)
        try:
            if isinstance(default, tuple):
                if not isinstance(v, list):
                    raise TypeError
                v = tuple(v)
            elif isinstance(default, bool) or isinstance(v, bool):
                raise TypeError
            elif isinstance(default, int) and not isinstance(default, bool):
                if not isinstance(v, int):
                    raise TypeError
            elif isinstance(default, float):
                if not isinstance(v, (int, float)):
                    raise TypeError
                v = float(v)
            elif isinstance(default, str) and not isinstance(v, str):
                raise TypeError
        except TypeError:
            raise ConfigError(f"wrong type for {key}.{f.name}: {v!r}") from None
        kwargs[f.name] = v
    return cls(**kwargs)


def _number(obj, key, kind=float):
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (kind is int and not isinstance(v, int)):
        raise ConfigError(f"wrong type for {key!r}: {v!r}")
    if not math.isfinite(v):
        raise ConfigError(f"{key!r} must be finite")
    return kind(v)


def config_from_dict(obj: dict) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in fields(RunConfig)} - {"weights"} | {"beta", "gamma"}
    for k in obj:
        if k not in top:
            raise ConfigError(f"unknown key {k!r}")
    for k in REQUIRED:
        if k not in obj:
            raise ConfigError(f"missing required key {k!r}")

    mode = obj["mode"]
    if mode not in ("supervised", "unsupervised"):
        raise ConfigError(f"'mode' must be 'supervised' or 'unsupervised', got {mode!r}")
    lay = obj["layout"]
    if not isinstance(lay, dict) or set(lay) - {"s_dims", "h_dims", "c_dim"}:
        raise ConfigError("'layout' must be an object with s_dims, h_dims, c_dim")
    try:
        layout = BlockLayout(tuple(lay["s_dims"]), tuple(lay.get("h_dims", ())), int(lay["c_dim"]))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid 'layout': {e}") from None

    kwargs: dict = {"mode": mode, "layout": layout}
    try:
        kwargs["weights"] = LossWeights(
            _number(obj, "beta") if "beta" in obj else 10.0,
            _number(obj, "gamma") if "gamma" in obj else 3.0,
        )
    except ValueError as e:
        raise ConfigError(f"invalid 'beta'/'gamma': {e}") from None
    if "rho" in obj:
        kwargs["rho"] = _number(obj, "rho")
        if abs(kwargs["rho"]) >= 1:
            raise ConfigError("'rho' must satisfy |rho| < 1")
    for key in ("batch_size", "total_steps", "seed", "log_every"):
        if key in obj:
            kwargs[key] = _number(obj, key, int)
    if kwargs.get("batch_size", 1) < 1 or kwargs.get("total_steps", 0) < 0 or kwargs.get("log_every", 1) < 1:
        raise ConfigError("'batch_size'/'log_every' must be positive and 'total_steps' non-negative")
    if "supervised_factors" in obj:
        sf = obj["supervised_factors"]
        if not isinstance(sf, list) or not all(isinstance(s, str) for s in sf):
            raise ConfigError("'supervised_factors' must be a list of factor names")
        kwargs["supervised_factors"] = tuple(sf)
    for key, cls in (("optimizer", AdamConfig), ("dataset", DatasetConfig), ("model", ModelConfig), ("metrics", MetricConfig)):
        if key in obj:
            kwargs[key] = _nested(cls, obj[key], key)
    cfg = RunConfig(**kwargs)
    if cfg.mode == "supervised" and len(cfg.supervised_factors) != layout.num_layers:
        raise ConfigError("'supervised_factors' needs one factor name per layer")
    return cfg


def parse_config(path) -> RunConfig:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None
    return config_from_dict(obj)


def with_overrides(cfg: RunConfig, **changes) -> RunConfig:
    return replace(cfg, **changes)
