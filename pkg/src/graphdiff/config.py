"""Run configuration: nested defaults, YAML files and ``key=value`` overrides."""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Any

import yaml

from .data import NormalizationSpec
from .denoiser import DenoiserConfig
from .diffusion import SamplerConfig
from .skeleton import load_skeleton
from .training import LossConfig, TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "data": {"path": None, "split": None, "eval_split": None},
    "model": {
        "model_dim": 384,
        "num_blocks": 4,
        "time_embed_dim": 128,
        "activation": "relu",
        "skeleton": "h36m17",
    },
    "schedule": {"kind": "cosine", "total_steps": 100, "s": 0.008, "beta_start": None, "beta_end": None},
    "train": {
        "epochs": 200,
        "batch_size": 1024,
        "learning_rate": 4e-5,
        "lr_shrink": 0.995,
        "adam_betas": [0.9, 0.999],
        "flip_probability": 0.5,
        "checkpoint_every": 0,
        "dtype": "float32",
    },
    "loss": {"lambda_2d": 1.0, "joint_weights": None, "norm": "l2_unsquared"},
    "sampler": {
        "mode": "ddpm",
        "num_hypotheses": 1,
        "ddim_steps": 100,
        "ddim_eta": 0.0,
        "clip_x0": 3.0,
        "flip_test": False,
    },
    "normalization": {"image_width": 1000.0, "image_height": 1000.0, "pose_scale_mm": 1000.0},
    "eval": {"aggregate": "mean", "procrustes_scale": True, "oracle": False},
    "synth": {"size": 64, "noise_sigma": 0.0, "test_subjects": []},
    "checkpoint": None,
    "input": None,
    "output": None,
}


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a mapping")
            _merge(base[key], value, path + ".")
        else:
            base[key] = value


def set_key(cfg: dict, dotted: str, value: Any) -> None:
    node = cfg
    parts = dotted.split(".")
    for i, part in enumerate(parts):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        if i == len(parts) - 1:
            if isinstance(node[part], dict):
                raise ConfigError(f"config key {dotted!r} names a group, not a value")
            node[part] = value
        else:
            node = node[part]


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value for {key!r}: {exc}") from None
    return key.strip(), value


def resolve_config(path: str | Path | None = None, overrides: list[str] = ()) -> dict:
    """Defaults, then the config file, then ``--set`` overrides (last wins)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path} must contain a mapping")
        _merge(cfg, loaded)
    for item in overrides:
        set_key(cfg, *parse_override(item))
    return cfg


def denoiser_config(cfg: dict) -> DenoiserConfig:
    m = cfg["model"]
    try:
        return DenoiserConfig(
            model_dim=int(m["model_dim"]),
            num_blocks=int(m["num_blocks"]),
            time_embed_dim=int(m["time_embed_dim"]),
            activation=m["activation"],
            num_timesteps=int(cfg["schedule"]["total_steps"]),
            skeleton=load_skeleton(m["skeleton"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model config: {exc}") from None


def train_config(cfg: dict) -> TrainConfig:
    t, s = cfg["train"], cfg["schedule"]
    try:
        return TrainConfig(
            epochs=int(t["epochs"]),
            batch_size=int(t["batch_size"]),
            learning_rate=float(t["learning_rate"]),
            lr_shrink=float(t["lr_shrink"]),
            adam_betas=tuple(float(b) for b in t["adam_betas"]),
            flip_probability=float(t["flip_probability"]),
            seed=int(cfg["seed"]),
            checkpoint_every=int(t["checkpoint_every"]),
            schedule_kind=s["kind"],
            total_steps=int(s["total_steps"]),
            cosine_s=float(s["s"]),
            beta_start=s["beta_start"],
            beta_end=s["beta_end"],
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train config: {exc}") from None


def loss_config(cfg: dict) -> LossConfig:
    try:
        return LossConfig(**cfg["loss"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid loss config: {exc}") from None


def sampler_config(cfg: dict) -> SamplerConfig:
    s = cfg["sampler"]
    try:
        return SamplerConfig(
            mode=s["mode"],
            num_hypotheses=int(s["num_hypotheses"]),
            ddim_steps=int(s["ddim_steps"]),
            ddim_eta=float(s["ddim_eta"]),
            seed=int(cfg["seed"]),
            clip_x0=None if s["clip_x0"] is None else float(s["clip_x0"]),
            flip_test=bool(s["flip_test"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid sampler config: {exc}") from None


def normalization_spec(cfg: dict) -> NormalizationSpec:
    try:
        return NormalizationSpec(**{k: float(v) for k, v in cfg["normalization"].items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid normalization config: {exc}") from None


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False)
