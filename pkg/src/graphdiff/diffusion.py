"""Forward corruption and DDPM / DDIM reverse samplers.

All functions take torch tensors with arbitrary leading batch dimensions
(``(..., J, 3)`` poses, ``(..., J, 2)`` detections). A denoiser is any callable
``denoiser(x_t, t, y)`` where ``t`` is a ``(B,)`` long tensor; it may return a
tensor of noise estimates or an object with an ``eps`` attribute.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .rng import STREAM_SAMPLE, numpy_rng
from .schedule import NoiseSchedule, posterior_mean_coeffs
from .skeleton import SkeletonSpec, flip_pose


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "ddpm"
    num_hypotheses: int = 1
    ddim_steps: int = 100
    ddim_eta: float = 0.0
    seed: int = 0
    clip_x0: float | None = 3.0
    flip_test: bool = False

    def __post_init__(self):
        if self.mode not in ("ddpm", "ddim"):
            raise ValueError(f"sampler mode must be 'ddpm' or 'ddim', got {self.mode!r}")
        if self.num_hypotheses < 1:
            raise ValueError("num_hypotheses must be >= 1")
        if self.ddim_steps < 1:
            raise ValueError("ddim_steps must be >= 1")
        if not 0.0 <= self.ddim_eta <= 1.0:
            raise ValueError("ddim_eta must lie in [0, 1]")
        if self.clip_x0 is not None and self.clip_x0 <= 0:
            raise ValueError("clip_x0 must be positive or None")


def _step_coef(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor | float:
    """Look up a per-step scalar (int ``t``) or per-sample column (tensor ``t``)."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        c = torch.tensor(values, dtype=like.dtype)[t.long() - 1]
        return c.reshape(-1, *([1] * (like.ndim - 1)))
    return float(values[int(t) - 1])


def _check_t(schedule: NoiseSchedule, t):
    ts = t if isinstance(t, torch.Tensor) else torch.tensor([t])
    if ts.numel() and (int(ts.min()) < 1 or int(ts.max()) > schedule.total_steps):
        raise ValueError(f"timestep outside [1, {schedule.total_steps}]")


def forward_sample(x0: torch.Tensor, t, schedule: NoiseSchedule, noise: torch.Tensor) -> torch.Tensor:
    """Draw ``x_t ~ q(x_t | x_0)`` given the Gaussian ``noise``."""
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != x0 shape {tuple(x0.shape)}")
    _check_t(schedule, t)
    ab = _step_coef(schedule.alpha_bar, t, x0)
    if isinstance(ab, float):
        return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise


def forward_step(x_prev: torch.Tensor, t: int, schedule: NoiseSchedule, noise: torch.Tensor) -> torch.Tensor:
    """One Markov corruption step ``x_{t-1} -> x_t``."""
    _check_t(schedule, t)
    b = float(schedule.beta[t - 1])
    return math.sqrt(1.0 - b) * x_prev + math.sqrt(b) * noise


def predict_x0(x_t: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule,
               clip: float | None = None) -> torch.Tensor:
    ab = schedule.alpha_bar_at(t)
    x0 = (x_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
    return x0.clamp(-clip, clip) if clip is not None else x0


def ddpm_reverse_step(x_t: torch.Tensor, t: int, eps_pred: torch.Tensor, schedule: NoiseSchedule,
                      noise: torch.Tensor | None = None, clip_x0: float | None = None) -> torch.Tensor:
    """Ancestral step ``x_t -> x_{t-1}`` using the posterior variance.

    The noise term vanishes at ``t = 1`` where the posterior variance is 0.
    """
    _check_t(schedule, t)
    x0_hat = predict_x0(x_t, t, eps_pred, schedule, clip_x0)
    c0, ct = posterior_mean_coeffs(schedule, t)
    mean = c0 * x0_hat + ct * x_t
    var = float(schedule.posterior_variance[t - 1])
    if t == 1 or var == 0.0 or noise is None:
        return mean
    return mean + math.sqrt(var) * noise


def ddim_step(x_t: torch.Tensor, t: int, t_next: int, eps_pred: torch.Tensor, schedule: NoiseSchedule,
              eta: float = 0.0, noise: torch.Tensor | None = None,
              clip_x0: float | None = None) -> torch.Tensor:
    if t_next >= t:
        raise ValueError(f"t_next ({t_next}) must be smaller than t ({t})")
    if t_next < 0:
        raise ValueError("t_next must be >= 0")
    _check_t(schedule, t)
    x0_hat = predict_x0(x_t, t, eps_pred, schedule, clip_x0)
    ab, ab_next = schedule.alpha_bar_at(t), schedule.alpha_bar_at(t_next)
    sigma = 0.0
    if eta > 0:
        sigma = eta * math.sqrt((1.0 - ab_next) / (1.0 - ab)) * math.sqrt(1.0 - ab / ab_next)
    out = math.sqrt(ab_next) * x0_hat + math.sqrt(max(1.0 - ab_next - sigma**2, 0.0)) * eps_pred
    if sigma > 0:
        if noise is None:
            raise ValueError("stochastic DDIM step (eta > 0) needs a noise tensor")
        out = out + sigma * noise
    return out


def ddim_timesteps(total_steps: int, num_steps: int) -> list[int]:
    """Uniformly strided descending sequence from ``T`` to ``0`` with ``num_steps`` transitions."""
    if not 1 <= num_steps <= total_steps:
        raise ValueError(f"ddim steps must lie in [1, {total_steps}], got {num_steps}")
    seq = np.floor(np.linspace(total_steps, 0, num_steps + 1) + 0.5).astype(int)
    return [int(v) for v in seq]


def _eps_of(out) -> torch.Tensor:
    return out if isinstance(out, torch.Tensor) else out.eps


class _NoiseStreams:
    """One independent Gaussian stream per batch element."""

    def __init__(self, rngs: Sequence[np.random.Generator], shape: tuple[int, ...], dtype: torch.dtype):
        self.rngs = list(rngs)
        self.shape = shape
        self.dtype = dtype

    def draw(self) -> torch.Tensor:
        z = np.stack([r.standard_normal(self.shape) for r in self.rngs])
        return torch.from_numpy(z).to(self.dtype)


Denoiser = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], object]


@torch.no_grad()
def sample_batch(denoiser: Denoiser, y: torch.Tensor, schedule: NoiseSchedule, config: SamplerConfig,
                 rngs: Sequence[np.random.Generator]) -> torch.Tensor:
    """Run the configured reverse chain for a ``(B, J, 2)`` batch of detections.

    ``rngs[b]`` supplies every random draw for element ``b``, so results do not
    depend on how elements are grouped into batches.
    """
    if y.ndim != 3 or y.shape[-1] != 2:
        raise ValueError(f"detections must have shape (B, J, 2), got {tuple(y.shape)}")
    if len(rngs) != y.shape[0]:
        raise ValueError("need exactly one random stream per batch element")
    b, j = y.shape[:2]
    streams = _NoiseStreams(rngs, (j, 3), y.dtype)
    x = streams.draw()
    if config.mode == "ddpm":
        for t in range(schedule.total_steps, 0, -1):
            tt = torch.full((b,), t, dtype=torch.long)
            eps = _eps_of(denoiser(x, tt, y))
            noise = streams.draw() if t > 1 else None
            x = ddpm_reverse_step(x, t, eps, schedule, noise, config.clip_x0)
        return x
    seq = ddim_timesteps(schedule.total_steps, config.ddim_steps)
    for t, t_next in zip(seq[:-1], seq[1:]):
        tt = torch.full((b,), t, dtype=torch.long)
        eps = _eps_of(denoiser(x, tt, y))
        noise = streams.draw() if config.ddim_eta > 0 and t_next > 0 else None
        eta = config.ddim_eta if t_next > 0 else 0.0
        x = ddim_step(x, t, t_next, eps, schedule, eta, noise, config.clip_x0)
    return x


def hypothesis_rng(seed: int, item: int, hypothesis: int, flipped: bool = False) -> np.random.Generator:
    return numpy_rng(seed, STREAM_SAMPLE, item, hypothesis, int(flipped))


def sample(denoiser: Denoiser, y: torch.Tensor, schedule: NoiseSchedule, config: SamplerConfig,
           rng: np.random.Generator | None = None) -> torch.Tensor:
    """Draw one ``(J, 3)`` pose for a single ``(J, 2)`` detection."""
    rng = rng if rng is not None else hypothesis_rng(config.seed, 0, 0)
    return sample_batch(denoiser, y.unsqueeze(0), schedule, config, [rng])[0]


@torch.no_grad()
def sample_items(denoiser: Denoiser, y: torch.Tensor, schedule: NoiseSchedule, config: SamplerConfig,
                 item_ids: Sequence[int] | None = None, skeleton: SkeletonSpec | None = None,
                 max_batch: int = 4096) -> torch.Tensor:
    """Sample ``N`` hypotheses for each of ``B`` detections: returns ``(B, N, J, 3)``.

    Hypothesis ``k`` of item ``i`` draws from the stream ``(seed, i, k)``. With
    ``config.flip_test`` each hypothesis is the average of the direct sample
    and the un-mirrored sample for the mirrored detection.
    """
    b, j = y.shape[:2]
    n = config.num_hypotheses
    item_ids = list(range(b)) if item_ids is None else list(item_ids)
    ys = y.unsqueeze(1).expand(b, n, j, 2).reshape(b * n, j, 2)
    keys = [(i, k) for i in item_ids for k in range(n)]

    def run(det: torch.Tensor, flipped: bool) -> torch.Tensor:
        chunks = []
        for s in range(0, len(keys), max_batch):
            rngs = [hypothesis_rng(config.seed, i, k, flipped) for i, k in keys[s:s + max_batch]]
            chunks.append(sample_batch(denoiser, det[s:s + max_batch], schedule, config, rngs))
        return torch.cat(chunks)

    out = run(ys, False)
    if config.flip_test:
        if skeleton is None:
            raise ValueError("flip_test needs the skeleton flip map")
        mirrored = flip_pose(run(flip_pose(ys, skeleton), True), skeleton)
        out = 0.5 * (out + mirrored)
    return out.reshape(b, n, j, 3)


def sample_hypotheses(denoiser: Denoiser, y: torch.Tensor, schedule: NoiseSchedule, config: SamplerConfig,
                      item: int = 0, skeleton: SkeletonSpec | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """``N`` hypotheses ``(N, J, 3)`` for one detection and their per-joint mean."""
    hyps = sample_items(denoiser, y.unsqueeze(0), schedule, config, [item], skeleton)[0]
    return hyps, hyps.mean(dim=0)
