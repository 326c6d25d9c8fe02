"""Modulated-GCN noise predictor conditioned on a 2D detection and the timestep."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .rng import STREAM_INIT, derive_seed
from .skeleton import SkeletonSpec, binary_affinity, h36m17, load_skeleton

ACTIVATIONS = {"relu": nn.ReLU, "silu": nn.SiLU, "gelu": nn.GELU, "tanh": nn.Tanh}
_DEGREE_FLOOR = 1e-6


@dataclass(frozen=True)
class DenoiserConfig:
    model_dim: int = 384
    num_blocks: int = 4
    time_embed_dim: int = 128
    activation: str = "relu"
    num_timesteps: int = 100
    skeleton: SkeletonSpec = field(default_factory=h36m17)

    def __post_init__(self):
        if self.model_dim < 1 or self.num_blocks < 1 or self.time_embed_dim < 2:
            raise ValueError("model_dim and num_blocks must be >= 1, time_embed_dim >= 2")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; choose from {sorted(ACTIVATIONS)}")

    def to_dict(self) -> dict:
        return {
            "model_dim": self.model_dim,
            "num_blocks": self.num_blocks,
            "time_embed_dim": self.time_embed_dim,
            "activation": self.activation,
            "num_timesteps": self.num_timesteps,
            "skeleton": self.skeleton.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["skeleton"] = load_skeleton(d.get("skeleton", "h36m17"))
        return cls(**d)


class DenoiserOutput(NamedTuple):
    eps: torch.Tensor
    y_recon: torch.Tensor


@dataclass
class ModulatedGCNLayerParams:
    """Tensors of one modulated graph-convolution layer in column convention.

    ``shared_weight`` is ``(d_out, d_in)``; ``joint_modulation`` is ``(J, d_out)``.
    """

    affinity_base: torch.Tensor
    mask_P: torch.Tensor
    mask_Q_raw: torch.Tensor
    shared_weight: torch.Tensor
    joint_modulation: torch.Tensor
    bias: torch.Tensor | None = None

    def effective_Q(self) -> torch.Tensor:
        return 0.5 * (self.mask_Q_raw + self.mask_Q_raw.T)

    def modulated_affinity(self) -> torch.Tensor:
        return self.affinity_base * self.mask_P + self.effective_Q()


def normalize_affinity(a: torch.Tensor) -> torch.Tensor:
    """``D^-1/2 (A + I) D^-1/2``; degrees are floored to stay invertible."""
    a_hat = a + torch.eye(a.shape[-1], dtype=a.dtype, device=a.device)
    d = a_hat.sum(dim=-1).clamp_min(_DEGREE_FLOOR).rsqrt()
    return a_hat * d[:, None] * d[None, :]


def gcn_layer_forward(H: torch.Tensor, A_tilde: torch.Tensor, W: torch.Tensor,
                      activation: bool = True) -> torch.Tensor:
    """Vanilla graph convolution on ``(d, J)`` column features: ``relu(W H A)``."""
    if W.shape[-1] != H.shape[-2] or H.shape[-1] != A_tilde.shape[0]:
        raise ValueError(f"shape mismatch: W {tuple(W.shape)}, H {tuple(H.shape)}, A {tuple(A_tilde.shape)}")
    out = W @ H @ A_tilde
    return torch.relu(out) if activation else out


def modulated_gcn_forward(H: torch.Tensor, params: ModulatedGCNLayerParams,
                          activation: bool = True) -> torch.Tensor:
    """Modulated graph convolution on ``(d, J)`` column features.

    Each node is mapped by the shared weight, rescaled by its own modulation
    vector (a diagonal, joint-specific weight), then mixed through the
    normalized modulated affinity.
    """
    W, M = params.shared_weight, params.joint_modulation
    if W.shape[1] != H.shape[0] or M.shape != (H.shape[1], W.shape[0]):
        raise ValueError(f"shape mismatch: H {tuple(H.shape)}, W {tuple(W.shape)}, M {tuple(M.shape)}")
    a = normalize_affinity(params.modulated_affinity())
    out = ((W @ H) * M.T) @ a
    if params.bias is not None:
        out = out + params.bias[:, None]
    return torch.relu(out) if activation else out


class ModulatedGraphConv(nn.Module):
    """Row-convention layer: ``(..., J, d_in) -> (..., J, d_out)``."""

    def __init__(self, in_dim: int, out_dim: int, adjacency: np.ndarray):
        super().__init__()
        j = adjacency.shape[0]
        self.register_buffer("adjacency", torch.tensor(np.array(adjacency), dtype=torch.float32))
        self.weight = nn.Parameter(torch.empty(in_dim, out_dim))
        self.modulation = nn.Parameter(torch.ones(j, out_dim))
        self.p_raw = nn.Parameter(torch.ones(j, j))
        self.q_raw = nn.Parameter(torch.zeros(j, j))
        self.bias = nn.Parameter(torch.zeros(out_dim))
        nn.init.xavier_uniform_(self.weight, gain=math.sqrt(2.0))
        # Only the upper triangle of p_raw is read; keep the unused half tidy.
        with torch.no_grad():
            self.p_raw.copy_(torch.triu(self.p_raw) + torch.triu(self.p_raw, 1).T)

    def mask_P(self) -> torch.Tensor:
        upper = torch.triu(self.p_raw)
        return upper + torch.triu(self.p_raw, 1).T

    def layer_params(self) -> ModulatedGCNLayerParams:
        return ModulatedGCNLayerParams(
            affinity_base=self.adjacency,
            mask_P=self.mask_P(),
            mask_Q_raw=self.q_raw,
            shared_weight=self.weight.T,
            joint_modulation=self.modulation,
            bias=self.bias,
        )

    def normalized_modulated_affinity(self) -> torch.Tensor:
        return normalize_affinity(self.layer_params().modulated_affinity())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = (x @ self.weight) * self.modulation
        return self.normalized_modulated_affinity() @ h + self.bias


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding ``[sin(t f_k), cos(t f_k)]`` with geometric frequencies."""
    t = torch.as_tensor(t)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[..., None] * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


class TimeEmbedding(nn.Module):
    def __init__(self, embed_dim: int, out_dim: int):
        super().__init__()
        self.embed_dim = embed_dim
        self.mlp = nn.Sequential(nn.Linear(embed_dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp[0].weight.dtype
        return self.mlp(timestep_embedding(t, self.embed_dim).to(dtype))


class GraphResBlock(nn.Module):
    def __init__(self, dim: int, adjacency: np.ndarray, act: type[nn.Module]):
        super().__init__()
        self.gc1 = ModulatedGraphConv(dim, dim, adjacency)
        self.gc2 = ModulatedGraphConv(dim, dim, adjacency)
        self.act = act()

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        r = self.act(self.gc1(h))
        return h + self.act(self.gc2(r))


class TimestepResBlock(GraphResBlock):
    """Residual graph block with the time embedding added between its two layers."""

    def __init__(self, dim: int, adjacency: np.ndarray, act: type[nn.Module]):
        super().__init__(dim, adjacency, act)
        self.time_proj = nn.Linear(dim, dim)

    def forward(self, h: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        r = self.act(self.gc1(h)) + self.time_proj(temb)[..., None, :]
        return h + self.act(self.gc2(r))


class GraphDenoiser(nn.Module):
    """Predicts the 3D noise and a reconstruction of the 2D detection.

    Layout: per-joint ``[x_t, y]`` (5 channels) -> modulated graph conv to
    ``model_dim`` -> ``num_blocks`` residual graph blocks with a timestep
    residual block between consecutive ones -> two linear per-joint heads.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        adj = binary_affinity(config.skeleton).values
        act = ACTIVATIONS[config.activation]
        d = config.model_dim
        self.input_layer = ModulatedGraphConv(5, d, adj)
        self.act = act()
        self.time_embed = TimeEmbedding(config.time_embed_dim, d)
        self.blocks = nn.ModuleList(GraphResBlock(d, adj, act) for _ in range(config.num_blocks))
        n_time = max(config.num_blocks - 1, 1)
        self.time_blocks = nn.ModuleList(TimestepResBlock(d, adj, act) for _ in range(n_time))
        self.eps_head = nn.Linear(d, 3)
        self.y_head = nn.Linear(d, 2)

    @property
    def skeleton(self) -> SkeletonSpec:
        return self.config.skeleton

    def graph_layers(self) -> list[ModulatedGraphConv]:
        return [m for m in self.modules() if isinstance(m, ModulatedGraphConv)]

    def forward(self, x_t: torch.Tensor, t, y: torch.Tensor) -> DenoiserOutput:
        j = self.config.skeleton.num_joints
        unbatched = x_t.ndim == 2
        if unbatched:
            x_t, y = x_t.unsqueeze(0), y.unsqueeze(0)
        if x_t.shape[-2:] != (j, 3) or y.shape[-2:] != (j, 2) or x_t.shape[0] != y.shape[0]:
            raise ValueError(f"expected x_t (B, {j}, 3) and y (B, {j}, 2), got {tuple(x_t.shape)}, {tuple(y.shape)}")
        t = torch.as_tensor(t, dtype=torch.long)
        if t.ndim == 0:
            t = t.expand(x_t.shape[0])
        if int(t.min()) < 0 or int(t.max()) > self.config.num_timesteps:
            raise ValueError(f"timestep outside [0, {self.config.num_timesteps}]")

        temb = self.time_embed(t)
        h = self.act(self.input_layer(torch.cat([x_t, y], dim=-1)))
        if self.config.num_blocks == 1:
            h = self.time_blocks[0](self.blocks[0](h), temb)
        else:
            for i, block in enumerate(self.blocks):
                if i > 0:
                    h = self.time_blocks[i - 1](h, temb)
                h = block(h)
        out = DenoiserOutput(self.eps_head(h), self.y_head(h))
        if unbatched:
            out = DenoiserOutput(out.eps[0], out.y_recon[0])
        return out


def build_denoiser(config: DenoiserConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> GraphDenoiser:
    """Construct a denoiser with weights drawn from the ``(seed, init)`` stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, STREAM_INIT))
        model = GraphDenoiser(config)
    return model.to(dtype)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
