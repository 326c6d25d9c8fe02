"""Skeleton graphs and their affinity matrices."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import yaml

H36M17_NAMES = (
    "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
    "spine", "thorax", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
)
H36M17_PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)
H36M17_FLIP_PAIRS = ((4, 1), (5, 2), (6, 3), (11, 14), (12, 15), (13, 16))

# Rest pose in millimetres, body frame: +x subject's left, +y up, +z forward.
H36M17_TEMPLATE_MM = np.array(
    [
        [0.0, 0.0, 0.0],
        [-130.0, 0.0, 0.0],
        [-130.0, -450.0, 0.0],
        [-130.0, -890.0, 0.0],
        [130.0, 0.0, 0.0],
        [130.0, -450.0, 0.0],
        [130.0, -890.0, 0.0],
        [0.0, 230.0, 0.0],
        [0.0, 480.0, 0.0],
        [0.0, 590.0, 20.0],
        [0.0, 700.0, 0.0],
        [150.0, 450.0, 0.0],
        [150.0, 170.0, 0.0],
        [150.0, -80.0, 0.0],
        [-150.0, 450.0, 0.0],
        [-150.0, 170.0, 0.0],
        [-150.0, -80.0, 0.0],
    ]
)


class SkeletonError(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonSpec:
    """An undirected joint graph with a root and left/right correspondences.

    Edges are stored as sorted ``(i, j)`` tuples with ``i < j``. The graph
    need not be a tree, but :meth:`parents` (used by the synthetic pose
    generator) requires it to be connected.
    """

    num_joints: int
    edges: tuple[tuple[int, int], ...]
    flip_pairs: tuple[tuple[int, int], ...] = ()
    root_index: int = 0
    name: str = "custom"
    joint_names: tuple[str, ...] | None = field(default=None, compare=False)

    def parents(self) -> tuple[int, ...]:
        """Breadth-first spanning-tree parents from the root (-1 for root)."""
        adj: list[list[int]] = [[] for _ in range(self.num_joints)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        parents = [-2] * self.num_joints
        parents[self.root_index] = -1
        queue = [self.root_index]
        for node in queue:
            for nb in sorted(adj[node]):
                if parents[nb] == -2:
                    parents[nb] = node
                    queue.append(nb)
        if -2 in parents:
            raise SkeletonError(f"skeleton {self.name!r} is not connected")
        return tuple(parents)

    def flip_permutation(self) -> np.ndarray:
        perm = np.arange(self.num_joints)
        for a, b in self.flip_pairs:
            perm[a], perm[b] = b, a
        return perm

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "num_joints": self.num_joints,
            "edges": [list(e) for e in self.edges],
            "flip_pairs": [list(p) for p in self.flip_pairs],
            "root_index": self.root_index,
        }


def build_skeleton(
    num_joints: int,
    edges: Sequence[Sequence[int]],
    flip_pairs: Sequence[Sequence[int]] = (),
    root_index: int = 0,
    name: str = "custom",
    joint_names: Sequence[str] | None = None,
) -> SkeletonSpec:
    """Validate the graph description and return an immutable spec."""
    if int(num_joints) != num_joints or num_joints < 1:
        raise SkeletonError(f"num_joints must be a positive integer, got {num_joints!r}")
    num_joints = int(num_joints)

    def check_index(i, what):
        if int(i) != i or not 0 <= i < num_joints:
            raise SkeletonError(f"{what} index {i!r} out of range [0, {num_joints})")
        return int(i)

    seen = set()
    norm_edges = []
    for e in edges:
        if len(e) != 2:
            raise SkeletonError(f"edge {e!r} is not a pair")
        i, j = (check_index(v, "edge") for v in e)
        if i == j:
            raise SkeletonError(f"self-loop edge ({i}, {j})")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise SkeletonError(f"duplicate edge {key}")
        seen.add(key)
        norm_edges.append(key)

    used: set[int] = set()
    norm_pairs = []
    for p in flip_pairs:
        if len(p) != 2:
            raise SkeletonError(f"flip pair {p!r} is not a pair")
        a, b = (check_index(v, "flip pair") for v in p)
        if a == b:
            raise SkeletonError(f"flip pair ({a}, {b}) maps a joint to itself")
        if a in used or b in used:
            raise SkeletonError(f"flip pair ({a}, {b}) overlaps another pair")
        used.update((a, b))
        norm_pairs.append((a, b))

    root_index = check_index(root_index, "root")
    if joint_names is not None and len(joint_names) != num_joints:
        raise SkeletonError("joint_names length does not match num_joints")
    return SkeletonSpec(
        num_joints=num_joints,
        edges=tuple(norm_edges),
        flip_pairs=tuple(norm_pairs),
        root_index=root_index,
        name=name,
        joint_names=tuple(joint_names) if joint_names is not None else None,
    )


def h36m17() -> SkeletonSpec:
    """The 17-joint Human3.6M layout with the pelvis as root."""
    edges = [(p, c) for c, p in enumerate(H36M17_PARENTS) if p >= 0]
    return build_skeleton(17, edges, H36M17_FLIP_PAIRS, 0, name="h36m17", joint_names=H36M17_NAMES)


BUILTIN_SKELETONS = {"h36m17": h36m17}


def load_skeleton(source: str | Path | dict) -> SkeletonSpec:
    """Resolve a builtin name, a YAML/JSON file path or an already parsed mapping."""
    if isinstance(source, dict):
        data = source
    elif str(source) in BUILTIN_SKELETONS:
        return BUILTIN_SKELETONS[str(source)]()
    else:
        path = Path(source)
        if not path.is_file():
            raise SkeletonError(f"unknown skeleton {str(source)!r} (not a builtin name or file)")
        data = yaml.safe_load(path.read_text())
    if not isinstance(data, dict):
        raise SkeletonError("skeleton description must be a mapping")
    if data.get("name") in BUILTIN_SKELETONS and "num_joints" not in data:
        return BUILTIN_SKELETONS[data["name"]]()
    unknown = set(data) - {"name", "num_joints", "edges", "flip_pairs", "root_index", "joint_names"}
    if unknown:
        raise SkeletonError(f"unknown skeleton keys: {sorted(unknown)}")
    try:
        return build_skeleton(
            data["num_joints"],
            data["edges"],
            data.get("flip_pairs", []),
            data.get("root_index", 0),
            name=data.get("name", "custom"),
            joint_names=data.get("joint_names"),
        )
    except KeyError as exc:
        raise SkeletonError(f"skeleton description missing key {exc}") from None


@dataclass(frozen=True)
class AffinityMatrix:
    values: np.ndarray
    kind: str  # "binary" | "normalized" | "modulated"

    def __post_init__(self):
        self.values.setflags(write=False)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def binary_affinity(spec: SkeletonSpec) -> AffinityMatrix:
    a = np.zeros((spec.num_joints, spec.num_joints))
    for i, j in spec.edges:
        a[i, j] = a[j, i] = 1.0
    return AffinityMatrix(a, "binary")


def symmetric_normalize(a: np.ndarray) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    a_hat = np.asarray(a, dtype=float) + np.eye(a.shape[0])
    d = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return a_hat * d[:, None] * d[None, :]


def normalized_affinity(spec: SkeletonSpec) -> AffinityMatrix:
    return AffinityMatrix(symmetric_normalize(binary_affinity(spec).values), "normalized")


def flip_pose(pose, spec: SkeletonSpec, axis: int = 0):
    """Mirror a ``(..., J, D)`` pose: negate ``axis`` and swap left/right joints.

    Works for numpy arrays and torch tensors alike.
    """
    d = pose.shape[-1]
    if d not in (2, 3):
        raise ValueError(f"pose must have 2 or 3 coordinates per joint, got {d}")
    if not 0 <= axis < d:
        raise ValueError(f"axis {axis} out of range for {d}-D pose")
    if pose.shape[-2] != spec.num_joints:
        raise ValueError(f"pose has {pose.shape[-2]} joints, skeleton has {spec.num_joints}")
    sign = np.ones(d)
    sign[axis] = -1.0
    perm = spec.flip_permutation()
    if isinstance(pose, np.ndarray):
        return pose[..., perm, :] * sign.astype(pose.dtype)
    return pose[..., torch.as_tensor(perm), :] * torch.as_tensor(sign, dtype=pose.dtype, device=pose.device)
