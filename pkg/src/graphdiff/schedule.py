"""Noise schedules and the closed-form quantities derived from them.

Timesteps are 1-based: step ``t`` in ``1..T`` lives at array index ``t - 1``.
The clean endpoint ``t = 0`` has ``alpha_bar = 1`` and is reachable through
:meth:`NoiseSchedule.alpha_bar_at`.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

BETA_MAX = 0.999
# DDPM linear defaults are quoted for a 1000-step chain.
LINEAR_REFERENCE_STEPS = 1000
LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 0.02


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    total_steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray
    posterior_variance: np.ndarray
    offset_s: float | None = None
    beta_start: float | None = None
    beta_end: float | None = None

    @classmethod
    def from_betas(cls, kind: str, beta: np.ndarray, **params) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size == 0:
            raise ValueError("beta must be a non-empty 1-D array")
        if not np.all((beta > 0) & (beta < 1)):
            raise ValueError("every beta must lie in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
        posterior_variance = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
        arrays = (beta, alpha, alpha_bar, alpha_bar_prev, posterior_variance)
        for a in arrays:
            a.setflags(write=False)
        return cls(kind, beta.size, *arrays, **params)

    def _check_step(self, t: int) -> int:
        if int(t) != t or not 1 <= t <= self.total_steps:
            raise ValueError(f"timestep {t!r} outside [1, {self.total_steps}]")
        return int(t)

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative signal level for ``t`` in ``0..T`` (1.0 at ``t = 0``)."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[self._check_step(t) - 1])

    def params(self) -> dict:
        out = {"kind": self.kind, "total_steps": self.total_steps}
        if self.kind == "cosine":
            out["s"] = self.offset_s
        else:
            out["beta_start"] = self.beta_start
            out["beta_end"] = self.beta_end
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "beta", "alpha_bar", "posterior_variance"])
        w.writerow([0, repr(0.0), repr(1.0), repr(0.0)])
        for i in range(self.total_steps):
            w.writerow([i + 1, repr(float(self.beta[i])), repr(float(self.alpha_bar[i])),
                        repr(float(self.posterior_variance[i]))])
        return buf.getvalue()


def linear_schedule(
    total_steps: int, beta_start: float | None = None, beta_end: float | None = None
) -> NoiseSchedule:
    """Betas spaced linearly from ``beta_start`` to ``beta_end`` inclusive.

    Omitted bounds default to the DDPM values rescaled by ``1000 / T`` so that
    shorter chains reach a comparable terminal noise level; the rescaled end
    point is capped at ``BETA_MAX``.
    """
    if int(total_steps) != total_steps or total_steps < 1:
        raise ValueError(f"total_steps must be a positive integer, got {total_steps!r}")
    scale = LINEAR_REFERENCE_STEPS / total_steps
    if beta_start is None:
        beta_start = min(LINEAR_BETA_START * scale, BETA_MAX)
    if beta_end is None:
        beta_end = max(min(LINEAR_BETA_END * scale, BETA_MAX), beta_start)
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, int(total_steps), dtype=np.float64)
    return NoiseSchedule.from_betas("linear", beta, beta_start=float(beta_start), beta_end=float(beta_end))


def cosine_alpha_bar(t, total_steps: int, s: float):
    """Unclipped ``f(t) / f(0)`` with ``f(t) = cos(((t/T + s) / (1 + s)) * pi/2)^2``."""
    t = np.asarray(t, dtype=np.float64)

    def f(u):
        return np.cos((u / total_steps + s) / (1.0 + s) * math.pi / 2) ** 2

    return f(t) / f(0.0)


def cosine_schedule(total_steps: int = 100, s: float = 0.008) -> NoiseSchedule:
    if int(total_steps) != total_steps or total_steps < 1:
        raise ValueError(f"total_steps must be a positive integer, got {total_steps!r}")
    if not s > 0:
        raise ValueError(f"cosine offset s must be positive, got {s!r}")
    ab = cosine_alpha_bar(np.arange(total_steps + 1), total_steps, s)
    beta = np.minimum(1.0 - ab[1:] / ab[:-1], BETA_MAX)
    return NoiseSchedule.from_betas("cosine", beta, offset_s=float(s))


def make_schedule(kind: str = "cosine", total_steps: int = 100, s: float = 0.008,
                  beta_start: float | None = None, beta_end: float | None = None) -> NoiseSchedule:
    if kind == "cosine":
        return cosine_schedule(total_steps, s)
    if kind == "linear":
        return linear_schedule(total_steps, beta_start, beta_end)
    raise ValueError(f"unknown schedule kind {kind!r}")


def posterior_mean_coeffs(schedule: NoiseSchedule, t: int) -> tuple[float, float]:
    """Coefficients ``(c0, ct)`` with posterior mean ``c0 * x0 + ct * x_t``."""
    i = schedule._check_step(t) - 1
    ab, ab_prev = schedule.alpha_bar[i], schedule.alpha_bar_prev[i]
    coef_x0 = math.sqrt(ab_prev) * schedule.beta[i] / (1.0 - ab)
    coef_xt = math.sqrt(schedule.alpha[i]) * (1.0 - ab_prev) / (1.0 - ab)
    return float(coef_x0), float(coef_xt)
