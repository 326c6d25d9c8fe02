"""Joint noise-prediction and 2D-reconstruction training."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .data import PoseDataset, atomic_write
from .denoiser import DenoiserConfig, GraphDenoiser, build_denoiser
from .diffusion import forward_sample
from .rng import STREAM_TRAIN, numpy_rng, torch_generator
from .schedule import NoiseSchedule, make_schedule
from .skeleton import SkeletonSpec, flip_pose

log = logging.getLogger(__name__)

NORMS = ("l2_unsquared", "l2_squared")


@dataclass(frozen=True)
class LossConfig:
    lambda_2d: float = 1.0
    joint_weights: tuple[float, ...] | None = None
    norm: str = "l2_unsquared"

    def __post_init__(self):
        if self.lambda_2d < 0:
            raise ValueError("lambda_2d must be >= 0")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.joint_weights is not None:
            object.__setattr__(self, "joint_weights", tuple(float(w) for w in self.joint_weights))
            if min(self.joint_weights) <= 0:
                raise ValueError("joint weights must be strictly positive")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 1024
    learning_rate: float = 4e-5
    lr_shrink: float = 0.995
    adam_betas: tuple[float, float] = (0.9, 0.999)
    flip_probability: float = 0.5
    seed: int = 0
    checkpoint_every: int = 0
    schedule_kind: str = "cosine"
    total_steps: int = 100
    cosine_s: float = 0.008
    beta_start: float | None = None
    beta_end: float | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.lr_shrink <= 1:
            raise ValueError("lr_shrink must lie in (0, 1]")
        if not 0 <= self.flip_probability <= 1:
            raise ValueError("flip_probability must lie in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))

    def make_schedule(self) -> NoiseSchedule:
        return make_schedule(self.schedule_kind, self.total_steps, self.cosine_s, self.beta_start, self.beta_end)

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during 0-based ``epoch``."""
        return self.learning_rate * self.lr_shrink**epoch


class LossTerms(NamedTuple):
    total: torch.Tensor
    noise: torch.Tensor
    recon: torch.Tensor


def _weighted_norm(residual: torch.Tensor, weights: torch.Tensor | None, squared: bool) -> torch.Tensor:
    if weights is not None:
        residual = residual * weights[:, None]
    sq = residual.pow(2).sum(dim=(-2, -1))
    return sq if squared else sq.sqrt()


def diffusion_loss(
    denoiser: Callable,
    x0: torch.Tensor,
    y: torch.Tensor,
    schedule: NoiseSchedule,
    loss_config: LossConfig = LossConfig(),
    generator: torch.Generator | None = None,
    t: torch.Tensor | None = None,
    noise: torch.Tensor | None = None,
) -> LossTerms:
    """Batch-mean of ``|eps - eps_pred| + lambda * |y - y_recon|``.

    ``t`` is drawn uniformly from ``1..T`` and ``noise`` from a standard
    Gaussian unless given explicitly.
    """
    if x0.ndim != 3 or x0.shape[0] == 0:
        raise ValueError("diffusion_loss needs a non-empty (B, J, 3) batch")
    b = x0.shape[0]
    if t is None:
        t = torch.randint(1, schedule.total_steps + 1, (b,), generator=generator)
    if noise is None:
        noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = forward_sample(x0, t, schedule, noise)
    out = denoiser(x_t, t, y)
    w = None
    if loss_config.joint_weights is not None:
        if len(loss_config.joint_weights) != x0.shape[1]:
            raise ValueError("joint_weights length does not match the joint count")
        w = torch.tensor(loss_config.joint_weights, dtype=x0.dtype)
    squared = loss_config.norm == "l2_squared"
    l_noise = _weighted_norm(noise - out.eps, w, squared).mean()
    l_recon = _weighted_norm(y - out.y_recon, w, squared).mean()
    return LossTerms(l_noise + loss_config.lambda_2d * l_recon, l_noise, l_recon)


def augment_flip(x0, y, spec: SkeletonSpec, coin: bool):
    """Mirror the 3D pose and its detection together (or leave both alone)."""
    if not coin:
        return x0, y
    return flip_pose(x0, spec, 0), flip_pose(y, spec, 0)


@dataclass
class TrainResult:
    model: GraphDenoiser
    schedule: NoiseSchedule
    history: list[dict] = field(default_factory=list)
    flip_count: int = 0
    checkpoints: list[Path] = field(default_factory=list)


def metrics_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["epoch", "loss", "l1", "l2", "lr"], lineterminator="\n")
    w.writeheader()
    for row in history:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def train(
    dataset: PoseDataset,
    denoiser_config: DenoiserConfig,
    train_config: TrainConfig = TrainConfig(),
    loss_config: LossConfig = LossConfig(),
    out_dir: str | Path | None = None,
    dtype: torch.dtype = torch.float32,
    model: GraphDenoiser | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Optimize a denoiser on ``dataset`` with Adam and per-epoch LR decay.

    Each epoch shuffles the items, mirrors each sample with probability
    ``flip_probability``, and draws timesteps and noise from the
    ``(seed, train, epoch)`` stream, so a run is reproducible bit for bit on
    a fixed thread count.
    """
    if dataset.skeleton != denoiser_config.skeleton:
        raise ValueError("dataset skeleton does not match the denoiser skeleton")
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    schedule = train_config.make_schedule()
    if denoiser_config.num_timesteps != schedule.total_steps:
        raise ValueError("denoiser num_timesteps must equal the schedule length")
    cfg = train_config
    if model is None:
        model = build_denoiser(denoiser_config, cfg.seed, dtype)
    model.train()
    x0_np, y_np = dataset.network_arrays()
    x0_all = torch.from_numpy(x0_np).to(dtype)
    y_all = torch.from_numpy(y_np).to(dtype)
    spec = dataset.skeleton
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas)
    result = TrainResult(model, schedule)
    out = Path(out_dir) if out_dir is not None else None
    n = len(dataset)

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        gen = torch_generator(cfg.seed, STREAM_TRAIN, epoch)
        rng = numpy_rng(cfg.seed, STREAM_TRAIN, epoch)
        perm = rng.permutation(n)
        coins = rng.random(n) < cfg.flip_probability
        sums = np.zeros(3)
        for start in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(perm[start : start + cfg.batch_size])
            xb, yb = x0_all[idx], y_all[idx]
            flip = torch.from_numpy(coins[start : start + cfg.batch_size])
            if flip.any():
                fx, fy = augment_flip(xb[flip], yb[flip], spec, True)
                xb, yb = xb.clone(), yb.clone()
                xb[flip], yb[flip] = fx, fy
                result.flip_count += int(flip.sum())
            terms = diffusion_loss(model, xb, yb, schedule, loss_config, generator=gen)
            opt.zero_grad(set_to_none=True)
            terms.total.backward()
            opt.step()
            sums += len(idx) * np.array([t.item() for t in terms])
        row = {"epoch": epoch + 1, "loss": sums[0] / n, "l1": sums[1] / n, "l2": sums[2] / n, "lr": lr}
        result.history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if out is not None:
            atomic_write(out / "metrics.csv", metrics_csv(result.history))
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                path = out / f"checkpoint_epoch{epoch + 1:04d}.pt"
                save_checkpoint(path, model, schedule, _meta(cfg, loss_config, epoch + 1))
                result.checkpoints.append(path)
        log.debug("epoch %d loss %.6f lr %.3g", epoch + 1, row["loss"], lr)

    model.eval()
    if out is not None:
        path = out / "checkpoint.pt"
        save_checkpoint(path, model, schedule, _meta(cfg, loss_config, cfg.epochs))
        result.checkpoints.append(path)
        if not result.history:
            atomic_write(out / "metrics.csv", metrics_csv([]))
    return result


def _meta(cfg: TrainConfig, loss_config: LossConfig, epoch: int) -> dict:
    train_cfg = asdict(cfg)
    train_cfg["adam_betas"] = list(cfg.adam_betas)
    loss_cfg = asdict(loss_config)
    if loss_cfg["joint_weights"] is not None:
        loss_cfg["joint_weights"] = list(loss_cfg["joint_weights"])
    return {"epoch": epoch, "seed": cfg.seed, "train": train_cfg, "loss": loss_cfg}
