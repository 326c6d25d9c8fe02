"""MPJPE / P-MPJPE metrics and dataset-level evaluation reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch

from .data import DatasetError, PoseDataset
from .diffusion import SamplerConfig, sample_items
from .schedule import NoiseSchedule


def root_relative(pose: np.ndarray, root_index: int = 0) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    return pose - pose[..., root_index : root_index + 1, :]


def mpjpe(pred, gt) -> np.ndarray | float:
    """Mean Euclidean joint error over the last two axes ``(J, 3)``."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    err = np.linalg.norm(pred - gt, axis=-1).mean(axis=-1)
    return float(err) if err.ndim == 0 else err


class Similarity(NamedTuple):
    scale: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    degenerate: np.ndarray


def procrustes_align(pred, gt, scale: bool = True, return_transform: bool = False):
    """Best similarity (or rigid, ``scale=False``) fit of ``pred`` onto ``gt``.

    Works on ``(..., J, 3)`` arrays. The rotation comes from the SVD of the
    cross-covariance with the sign of its last axis corrected so that
    ``det(R) = +1``; mirror images are never produced. Point sets whose
    centred prediction has rank < 2 are flagged degenerate and only
    translated.
    """
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ValueError(f"need matching (..., J, 3) arrays, got {pred.shape} and {gt.shape}")
    mu_p = pred.mean(axis=-2, keepdims=True)
    mu_g = gt.mean(axis=-2, keepdims=True)
    p, g = pred - mu_p, gt - mu_g
    cov = np.swapaxes(p, -1, -2) @ g
    u, sv, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(np.swapaxes(vt, -1, -2) @ np.swapaxes(u, -1, -2)))
    d = np.where(d == 0, 1.0, d)
    corr = np.ones(sv.shape)
    corr[..., -1] = d
    rot = np.swapaxes(vt, -1, -2) @ (corr[..., :, None] * np.swapaxes(u, -1, -2))
    var_p = (p**2).sum(axis=(-2, -1))
    p_sv = np.linalg.svd(p, compute_uv=False)
    degenerate = (var_p <= 1e-300) | (p_sv[..., 1] <= 1e-10 * np.maximum(p_sv[..., 0], 1e-300))
    if scale:
        s = (sv * corr).sum(axis=-1) / np.where(degenerate, 1.0, var_p)
    else:
        s = np.ones(var_p.shape)
    s = np.where(degenerate, 1.0, s)
    rot = np.where(degenerate[..., None, None], np.eye(3), rot)
    t = mu_g[..., 0, :] - s[..., None] * (rot @ mu_p[..., 0, :, None])[..., 0]
    aligned = s[..., None, None] * (pred @ np.swapaxes(rot, -1, -2)) + t[..., None, :]
    if return_transform:
        return aligned, Similarity(s, rot, t, degenerate)
    return aligned


def p_mpjpe(pred, gt, scale: bool = True):
    return mpjpe(procrustes_align(pred, gt, scale=scale), gt)


@dataclass
class ActionMetrics:
    mpjpe_mm: float
    p_mpjpe_mm: float
    count: int


@dataclass
class EvalReport:
    per_action: dict[str, ActionMetrics]
    average: tuple[float, float]
    num_hypotheses: int
    sampler: str
    per_item_mpjpe: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    per_item_p_mpjpe: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["action", "mpjpe_mm", "p_mpjpe_mm", "count"])
        for name, m in self.per_action.items():
            w.writerow([name, f"{m.mpjpe_mm:.6f}", f"{m.p_mpjpe_mm:.6f}", m.count])
        total = sum(m.count for m in self.per_action.values())
        w.writerow(["Avg", f"{self.average[0]:.6f}", f"{self.average[1]:.6f}", total])
        return buf.getvalue()

    def to_table(self) -> str:
        """Actions as columns and the average last, one row per protocol."""
        names = list(self.per_action) + ["Avg"]
        width = max(6, *(len(n) for n in names))
        rows = [f"{'(mm)':<10}" + "".join(f"{n:>{width + 1}}" for n in names)]
        for label, idx in (("MPJPE", 0), ("P-MPJPE", 1)):
            vals = [(m.mpjpe_mm, m.p_mpjpe_mm)[idx] for m in self.per_action.values()]
            vals.append(self.average[idx])
            rows.append(f"{label:<10}" + "".join(f"{v:>{width + 1}.1f}" for v in vals))
        rows.append(f"N={self.num_hypotheses}  sampler: {self.sampler}")
        return "\n".join(rows) + "\n"


class GroundTruthOracle:
    """A stand-in denoiser that returns the exact noise for known clean poses.

    Batch rows must line up with ``x0`` (repeated ``repeat`` times per item,
    item-major), which is the layout :func:`sample_items` produces.
    """

    def __init__(self, x0: torch.Tensor, schedule: NoiseSchedule, repeat: int = 1):
        self.x0 = x0.repeat_interleave(repeat, dim=0)
        self.ab = torch.tensor(np.array(schedule.alpha_bar), dtype=x0.dtype)

    def __call__(self, x_t: torch.Tensor, t: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        ab = self.ab[t.long() - 1].reshape(-1, 1, 1)
        return (x_t - ab.sqrt() * self.x0) / (1.0 - ab).sqrt()


def describe_sampler(config: SamplerConfig) -> str:
    if config.mode == "ddpm":
        desc = "ddpm"
    else:
        desc = f"ddim(steps={config.ddim_steps}, eta={config.ddim_eta:g})"
    return desc + (", flip-test" if config.flip_test else "")


def evaluate(
    denoiser,
    dataset: PoseDataset,
    schedule: NoiseSchedule,
    config: SamplerConfig = SamplerConfig(),
    aggregate: str = "mean",
    procrustes_scale: bool = True,
    oracle: bool = False,
    items_per_batch: int = 256,
) -> EvalReport:
    """Sample ``N`` hypotheses per item, aggregate them and score both protocols.

    ``aggregate="mean"`` averages hypotheses per joint; ``"best"`` keeps the
    hypothesis closest to ground truth (an optimistic upper bound that needs
    3D labels at test time). With ``oracle=True`` the denoiser is replaced by
    :class:`GroundTruthOracle`.
    """
    if aggregate not in ("mean", "best"):
        raise ValueError("aggregate must be 'mean' or 'best'")
    if len(dataset) == 0:
        raise DatasetError("cannot evaluate an empty dataset")
    if not dataset.has_ground_truth.all():
        raise DatasetError("evaluation needs 3D ground truth for every item")
    if oracle and config.flip_test:
        raise ValueError("the ground-truth oracle does not support flip_test")
    if isinstance(denoiser, torch.nn.Module):
        dtype = next(denoiser.parameters()).dtype
    else:
        dtype = torch.float64
    if oracle:
        dtype = torch.float64
    spec = dataset.skeleton
    scale_mm = dataset.normalization.pose_scale_mm
    x0_np, y_np = dataset.network_arrays()
    gt_mm = root_relative(dataset.joints, spec.root_index)
    n_hyp = config.num_hypotheses

    preds = []
    for start in range(0, len(dataset), items_per_batch):
        stop = min(start + items_per_batch, len(dataset))
        y = torch.from_numpy(y_np[start:stop]).to(dtype)
        model = denoiser
        if oracle:
            model = GroundTruthOracle(torch.from_numpy(x0_np[start:stop]), schedule, n_hyp)
        hyps = sample_items(model, y, schedule, config, range(start, stop), spec,
                            max_batch=(stop - start) * n_hyp)
        hyps_mm = root_relative(hyps.double().numpy() * scale_mm, spec.root_index)
        if aggregate == "mean":
            preds.append(hyps_mm.mean(axis=1))
        else:
            errs = mpjpe(hyps_mm, np.broadcast_to(gt_mm[start:stop, None], hyps_mm.shape))
            preds.append(hyps_mm[np.arange(stop - start), errs.argmin(axis=1)])
    pred_mm = root_relative(np.concatenate(preds), spec.root_index)

    e1 = np.atleast_1d(mpjpe(pred_mm, gt_mm))
    e2 = np.atleast_1d(p_mpjpe(pred_mm, gt_mm, scale=procrustes_scale))
    per_action: dict[str, ActionMetrics] = {}
    for aid in sorted(set(dataset.action_ids.tolist())):
        mask = dataset.action_ids == aid
        per_action[dataset.action_names[aid]] = ActionMetrics(float(e1[mask].mean()), float(e2[mask].mean()),
                                                              int(mask.sum()))
    total = sum(m.count for m in per_action.values())
    avg = (
        math.fsum(m.mpjpe_mm * m.count for m in per_action.values()) / total,
        math.fsum(m.p_mpjpe_mm * m.count for m in per_action.values()) / total,
    )
    return EvalReport(per_action, avg, n_hyp, describe_sampler(config) + ("" if aggregate == "mean" else ", best-of-N"),
                      e1, e2)
