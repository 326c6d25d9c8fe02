"""Versioned checkpoint container.

A checkpoint is a ``torch.save`` archive holding a plain dictionary::

    format           "graphdiff-checkpoint"
    version          1
    denoiser_config  DenoiserConfig.to_dict()
    schedule         NoiseSchedule.params()
    dtype            parameter dtype name
    state_dict       parameter and buffer tensors
    metadata         training metadata (epoch, seed, configs)

Only primitive containers and tensors are stored, so files load with
``weights_only=True``.
"""

from __future__ import annotations

import io
from pathlib import Path

import torch

from .data import atomic_write
from .denoiser import DenoiserConfig, GraphDenoiser
from .schedule import NoiseSchedule, make_schedule

CHECKPOINT_FORMAT = "graphdiff-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, model: GraphDenoiser, schedule: NoiseSchedule,
                    metadata: dict | None = None) -> None:
    params = schedule.params()
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "denoiser_config": model.config.to_dict(),
        "schedule": {
            "kind": params["kind"],
            "total_steps": params["total_steps"],
            "s": params.get("s"),
            "beta_start": params.get("beta_start"),
            "beta_end": params.get("beta_end"),
        },
        "dtype": str(next(model.parameters()).dtype).removeprefix("torch."),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "metadata": metadata or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    atomic_write(Path(path), buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[GraphDenoiser, NoiseSchedule, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a variety of unpickling errors
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a graphdiff checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    config = DenoiserConfig.from_dict(payload["denoiser_config"])
    s = payload["schedule"]
    schedule = make_schedule(s["kind"], s["total_steps"], s.get("s") or 0.008, s.get("beta_start"), s.get("beta_end"))
    dtype = getattr(torch, payload.get("dtype", "float32"))
    model = GraphDenoiser(config).to(dtype)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, schedule, payload.get("metadata", {})
