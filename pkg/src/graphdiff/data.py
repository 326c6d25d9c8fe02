"""Pose datasets: on-disk format, unit normalization and a synthetic generator.

In memory a :class:`PoseDataset` keeps 2D keypoints in normalized image
coordinates and 3D joints in camera-frame millimetres (absolute, not
root-relative). Items without 3D ground truth carry NaN joints.

On disk a dataset is a directory::

    meta          JSON: format, version, skeleton, units, splits, subjects
    actions       one action name per line; line number = action id
    <split>.bin   16-byte header + little-endian float32 item records

The header is ``b"P3DS"`` followed by three little-endian uint32 values
(version, item count, J). Each record is ``[J*2 keypoints][J*3 joints or NaN]
[action id][subject id]``.
"""

from __future__ import annotations

import csv
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .rng import STREAM_SYNTH, numpy_rng
from .skeleton import H36M17_TEMPLATE_MM, SkeletonSpec, h36m17, load_skeleton

MAGIC = b"P3DS"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIII")

H36M_ACTIONS = (
    "Directions", "Discussion", "Eating", "Greeting", "Phoning", "Photo", "Posing", "Purchases",
    "Sitting", "SittingDown", "Smoking", "Waiting", "WalkDog", "Walking", "WalkTogether",
)
H36M_SUBJECTS = ("S1", "S5", "S6", "S7", "S8", "S9", "S11")


class DatasetError(ValueError):
    pass


class JointCountError(DatasetError):
    """The file's joint count disagrees with the requested skeleton."""


@dataclass(frozen=True)
class NormalizationSpec:
    image_width: float = 1000.0
    image_height: float = 1000.0
    pose_scale_mm: float = 1000.0

    def __post_init__(self):
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.pose_scale_mm <= 0:
            raise ValueError("pose_scale_mm must be positive")


def normalize_2d(keypoints_px, spec: NormalizationSpec) -> np.ndarray:
    """Pixels to width-normalized coordinates; the image centre maps to the origin."""
    kp = np.asarray(keypoints_px, dtype=np.float64)
    w, h = spec.image_width, spec.image_height
    out = np.empty_like(kp)
    out[..., 0] = 2.0 * kp[..., 0] / w - 1.0
    out[..., 1] = (2.0 * kp[..., 1] - h) / w
    return out


def denormalize_2d(keypoints, spec: NormalizationSpec) -> np.ndarray:
    kp = np.asarray(keypoints, dtype=np.float64)
    w, h = spec.image_width, spec.image_height
    out = np.empty_like(kp)
    out[..., 0] = (kp[..., 0] + 1.0) * w / 2.0
    out[..., 1] = (kp[..., 1] * w + h) / 2.0
    return out


def normalize_3d(joints_mm, root_index: int, pose_scale_mm: float = 1000.0) -> np.ndarray:
    """Root-relative network units; the root row is exactly zero."""
    j = np.asarray(joints_mm, dtype=np.float64)
    rel = j - j[..., root_index : root_index + 1, :]
    rel[..., root_index, :] = 0.0
    return rel / pose_scale_mm


def denormalize_3d(joints, pose_scale_mm: float = 1000.0, root_mm=None) -> np.ndarray:
    out = np.asarray(joints, dtype=np.float64) * pose_scale_mm
    if root_mm is not None:
        out = out + np.asarray(root_mm, dtype=np.float64)[..., None, :]
    return out


@dataclass(eq=False)
class PoseDataset:
    keypoints: np.ndarray
    joints: np.ndarray
    action_ids: np.ndarray
    subject_ids: np.ndarray
    skeleton: SkeletonSpec
    action_names: tuple[str, ...] = H36M_ACTIONS
    subject_names: tuple[str, ...] = H36M_SUBJECTS
    normalization: NormalizationSpec = field(default_factory=NormalizationSpec)

    def __post_init__(self):
        n, j = len(self.keypoints), self.skeleton.num_joints
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        if self.keypoints.size != n * j * 2 or (self.joints is not None and np.size(self.joints) != n * j * 3):
            raise JointCountError(f"arrays do not match {n} items of {j} joints")
        self.keypoints = self.keypoints.reshape(n, j, 2)
        if self.joints is None:
            self.joints = np.full((n, j, 3), np.nan)
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(n, j, 3)
        self.action_ids = np.asarray(self.action_ids, dtype=np.int64).reshape(n)
        self.subject_ids = np.asarray(self.subject_ids, dtype=np.int64).reshape(n)
        self.action_names = tuple(self.action_names)
        self.subject_names = tuple(self.subject_names)
        if not np.all(np.isfinite(self.keypoints)):
            raise DatasetError("keypoints contain non-finite values")
        finite = np.isfinite(self.joints).all(axis=(1, 2))
        absent = np.isnan(self.joints).all(axis=(1, 2))
        if not np.all(finite | absent):
            raise DatasetError("3D joints must be fully finite or fully NaN per item")
        if n and (self.action_ids.min() < 0 or self.action_ids.max() >= len(self.action_names)):
            raise DatasetError("action id out of range")
        if n and (self.subject_ids.min() < 0 or self.subject_ids.max() >= len(self.subject_names)):
            raise DatasetError("subject id out of range")

    def __len__(self) -> int:
        return len(self.keypoints)

    @property
    def has_ground_truth(self) -> np.ndarray:
        return np.isfinite(self.joints).all(axis=(1, 2))

    @property
    def actions(self) -> list[str]:
        return [self.action_names[i] for i in self.action_ids]

    @property
    def subjects(self) -> list[str]:
        return [self.subject_names[i] for i in self.subject_ids]

    def subset(self, index) -> "PoseDataset":
        index = np.asarray(index)
        return replace(self, keypoints=self.keypoints[index], joints=self.joints[index],
                       action_ids=self.action_ids[index], subject_ids=self.subject_ids[index])

    def network_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """``(x0, y)``: root-relative scaled 3D joints and normalized 2D keypoints."""
        if not self.has_ground_truth.all():
            raise DatasetError("training needs 3D ground truth for every item")
        x0 = normalize_3d(self.joints, self.skeleton.root_index, self.normalization.pose_scale_mm)
        return x0, self.keypoints.copy()


def split_by_subject(dataset: PoseDataset, subjects: Sequence[str]) -> tuple[PoseDataset, PoseDataset]:
    """Partition into (items of ``subjects``, all other items)."""
    chosen = {dataset.subject_names.index(s) for s in subjects if s in dataset.subject_names}
    mask = np.isin(dataset.subject_ids, sorted(chosen))
    return dataset.subset(np.flatnonzero(mask)), dataset.subset(np.flatnonzero(~mask))


def concat_datasets(parts: Sequence[PoseDataset]) -> PoseDataset:
    if not parts:
        raise DatasetError("nothing to concatenate")
    base = parts[0]
    for p in parts[1:]:
        if p.skeleton != base.skeleton or p.action_names != base.action_names or p.subject_names != base.subject_names:
            raise DatasetError("datasets disagree on skeleton or label vocabularies")
    return replace(
        base,
        keypoints=np.concatenate([p.keypoints for p in parts]),
        joints=np.concatenate([p.joints for p in parts]),
        action_ids=np.concatenate([p.action_ids for p in parts]),
        subject_ids=np.concatenate([p.subject_ids for p in parts]),
    )


# -- on-disk format ----------------------------------------------------------


def atomic_write(path: Path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _encode_split(ds: PoseDataset) -> bytes:
    n, j = len(ds), ds.skeleton.num_joints
    rec = np.empty((n, j * 5 + 2), dtype="<f4")
    rec[:, : 2 * j] = ds.keypoints.reshape(n, -1)
    rec[:, 2 * j : 5 * j] = ds.joints.reshape(n, -1)
    rec[:, -2] = ds.action_ids
    rec[:, -1] = ds.subject_ids
    return HEADER.pack(MAGIC, FORMAT_VERSION, n, j) + rec.tobytes()


def save_splits(path: str | Path, splits: dict[str, PoseDataset]) -> None:
    """Write one or more splits sharing a skeleton and label vocabularies."""
    if not splits:
        raise DatasetError("no splits to save")
    path = Path(path)
    first = next(iter(splits.values()))
    for name, ds in splits.items():
        if ds.skeleton != first.skeleton or ds.action_names != first.action_names \
                or ds.subject_names != first.subject_names:
            raise DatasetError(f"split {name!r} disagrees with the others on skeleton or vocabularies")
    norm = first.normalization
    meta = {
        "format": MAGIC.decode(),
        "version": FORMAT_VERSION,
        "skeleton": first.skeleton.to_dict(),
        "num_joints": first.skeleton.num_joints,
        "units": {
            "keypoints": "normalized",
            "joints": "mm",
            "image_width": norm.image_width,
            "image_height": norm.image_height,
            "pose_scale_mm": norm.pose_scale_mm,
        },
        "subjects": list(first.subject_names),
        "splits": {
            name: {
                "file": f"{name}.bin",
                "count": len(ds),
                "subjects": sorted({ds.subject_names[i] for i in ds.subject_ids}),
            }
            for name, ds in splits.items()
        },
    }
    for name, ds in splits.items():
        atomic_write(path / f"{name}.bin", _encode_split(ds))
    atomic_write(path / "actions", "".join(a + "\n" for a in first.action_names))
    atomic_write(path / "meta", json.dumps(meta, indent=2) + "\n")


def save_dataset(path: str | Path, dataset: PoseDataset, split: str = "all") -> None:
    save_splits(path, {split: dataset})


def read_meta(path: str | Path) -> dict:
    meta_path = Path(path) / "meta"
    if not meta_path.is_file():
        raise FileNotFoundError(f"no pose dataset at {path} (missing meta)")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed meta file: {exc}") from None
    if meta.get("format") != MAGIC.decode():
        raise DatasetError("meta does not describe a P3DS dataset")
    return meta


def load_dataset(path: str | Path, skeleton: SkeletonSpec | None = None,
                 split: str | None = None) -> PoseDataset:
    """Load one split (or all splits concatenated in meta order)."""
    path = Path(path)
    meta = read_meta(path)
    file_skeleton = load_skeleton(meta["skeleton"])
    if skeleton is None:
        skeleton = file_skeleton
    j = skeleton.num_joints
    if meta.get("num_joints", file_skeleton.num_joints) != j:
        raise JointCountError(f"dataset has {meta.get('num_joints')} joints, skeleton has {j}")
    actions = tuple((path / "actions").read_text().splitlines())
    units = meta.get("units", {})
    norm = NormalizationSpec(units.get("image_width", 1000.0), units.get("image_height", 1000.0),
                             units.get("pose_scale_mm", 1000.0))
    names = [split] if split is not None else list(meta["splits"])
    parts = []
    for name in names:
        if name not in meta["splits"]:
            raise DatasetError(f"no split {name!r}; available: {sorted(meta['splits'])}")
        raw = (path / meta["splits"][name]["file"]).read_bytes()
        if len(raw) < HEADER.size:
            raise DatasetError(f"split {name!r}: truncated header")
        magic, version, count, nj = HEADER.unpack_from(raw)
        if magic != MAGIC or version != FORMAT_VERSION:
            raise DatasetError(f"split {name!r}: bad magic or unsupported version {version}")
        if nj != j:
            raise JointCountError(f"split {name!r} has {nj} joints, skeleton has {j}")
        width = j * 5 + 2
        if len(raw) != HEADER.size + count * width * 4:
            raise DatasetError(f"split {name!r}: size does not match {count} items")
        rec = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(count, width).astype(np.float64)
        ids = rec[:, -2:]
        if not np.all(np.isfinite(ids)) or np.any(ids != np.round(ids)):
            raise DatasetError(f"split {name!r}: malformed label ids")
        parts.append(PoseDataset(
            keypoints=rec[:, : 2 * j],
            joints=rec[:, 2 * j : 5 * j],
            action_ids=ids[:, 0].astype(np.int64),
            subject_ids=ids[:, 1].astype(np.int64),
            skeleton=skeleton,
            action_names=actions,
            subject_names=tuple(meta.get("subjects", H36M_SUBJECTS)),
            normalization=norm,
        ))
    if not parts:
        return PoseDataset(np.zeros((0, j, 2)), None, [], [], skeleton, actions,
                           tuple(meta.get("subjects", H36M_SUBJECTS)), norm)
    return parts[0] if len(parts) == 1 else concat_datasets(parts)


def load_csv(path: str | Path, skeleton: SkeletonSpec,
             pixel_spec: NormalizationSpec | None = None) -> PoseDataset:
    """Read a small hand-written fixture.

    Columns: ``action, subject, k{j}_x, k{j}_y`` for every joint and optionally
    ``p{j}_x, p{j}_y, p{j}_z`` (millimetres; blank cells mean no ground
    truth). With ``pixel_spec`` the keypoints are taken as pixels and
    normalized.
    """
    j = skeleton.num_joints
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and f"k{j - 1}_x" not in rows[0]:
        raise JointCountError(f"CSV lacks keypoint columns for {j} joints")
    if rows and f"k{j}_x" in rows[0]:
        raise JointCountError(f"CSV has more than {j} joints")
    actions: list[str] = []
    subjects: list[str] = []
    kp, jt, aid, sid = [], [], [], []
    for row in rows:
        if row["action"] not in actions:
            actions.append(row["action"])
        if row["subject"] not in subjects:
            subjects.append(row["subject"])
        aid.append(actions.index(row["action"]))
        sid.append(subjects.index(row["subject"]))
        kp.append([[float(row[f"k{i}_{c}"]) for c in "xy"] for i in range(j)])
        if row.get("p0_x", "").strip():
            jt.append([[float(row[f"p{i}_{c}"]) for c in "xyz"] for i in range(j)])
        else:
            jt.append(np.full((j, 3), np.nan))
    keypoints = np.array(kp, dtype=np.float64).reshape(len(rows), j, 2)
    if pixel_spec is not None:
        keypoints = normalize_2d(keypoints, pixel_spec)
    return PoseDataset(keypoints, np.array(jt, dtype=np.float64).reshape(len(rows), j, 3), aid, sid,
                       skeleton, tuple(actions) or H36M_ACTIONS, tuple(subjects) or H36M_SUBJECTS,
                       pixel_spec or NormalizationSpec())


# -- synthetic data ------------------------------------------------------------


@dataclass(frozen=True)
class PinholeCamera:
    focal: float = 1145.0
    cx: float = 500.0
    cy: float = 500.0
    width: float = 1000.0
    height: float = 1000.0

    def project(self, points_mm: np.ndarray) -> np.ndarray:
        p = np.asarray(points_mm, dtype=np.float64)
        z = p[..., 2]
        return np.stack([self.focal * p[..., 0] / z + self.cx, self.focal * p[..., 1] / z + self.cy], axis=-1)

    def normalization(self, pose_scale_mm: float = 1000.0) -> NormalizationSpec:
        return NormalizationSpec(self.width, self.height, pose_scale_mm)


def default_template(skeleton: SkeletonSpec, bone_mm: float = 200.0) -> np.ndarray:
    """A planar fan-out rest pose for skeletons without a hand-made template."""
    if skeleton.name == "h36m17" and skeleton.num_joints == 17:
        return H36M17_TEMPLATE_MM.copy()
    parents = skeleton.parents()
    children: dict[int, list[int]] = {i: [] for i in range(skeleton.num_joints)}
    for c, p in enumerate(parents):
        if p >= 0:
            children[p].append(c)
    pos = np.zeros((skeleton.num_joints, 3))
    heading = {skeleton.root_index: -math.pi / 2}
    order = [skeleton.root_index]
    for node in order:
        kids = children[node]
        for k, c in enumerate(kids):
            if node == skeleton.root_index:
                ang = -math.pi / 2 + 2 * math.pi * k / len(kids)
            else:
                ang = heading[node] + 0.5 * (k - (len(kids) - 1) / 2)
            heading[c] = ang
            pos[c] = pos[node] + bone_mm * np.array([math.cos(ang), math.sin(ang), 0.0])
            order.append(c)
    return pos


def _joint_limits(skeleton: SkeletonSpec) -> np.ndarray:
    limits = np.full(skeleton.num_joints, 0.5)
    if skeleton.name == "h36m17" and skeleton.num_joints == 17:
        limits[[1, 4, 7]] = 0.15
        limits[[9, 11, 14]] = 0.2
        limits[[2, 5, 12, 15]] = 0.7
        limits[[3, 6, 13, 16]] = 0.6
    return limits


def synth_toy_dataset(
    seed: int,
    size: int,
    skeleton: SkeletonSpec | None = None,
    camera: PinholeCamera | None = None,
    noise_sigma: float = 0.0,
    template_mm: np.ndarray | None = None,
    actions: Sequence[str] = H36M_ACTIONS,
    subjects: Sequence[str] = H36M_SUBJECTS,
    pose_scale_mm: float = 1000.0,
) -> PoseDataset:
    """Random articulated poses seen by a pinhole camera.

    Every bone keeps its rest length; each joint applies a bounded random
    rotation relative to its parent's frame, and the whole body gets a random
    heading and a placement 4-6 m in front of the camera. With
    ``noise_sigma > 0`` Gaussian noise (normalized units) perturbs the 2D
    keypoints to mimic detector error.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    skeleton = skeleton or h36m17()
    camera = camera or PinholeCamera()
    template = default_template(skeleton) if template_mm is None else np.asarray(template_mm, dtype=np.float64)
    parents = skeleton.parents()
    limits = _joint_limits(skeleton)
    rng = numpy_rng(seed, STREAM_SYNTH)

    n, j = size, skeleton.num_joints
    yaw = rng.uniform(-math.pi, math.pi, n)
    tilt = rng.uniform(-0.15, 0.15, (n, 2))
    global_rot = Rotation.from_euler("yxz", np.column_stack([yaw, tilt])).as_matrix()
    local = rng.uniform(-1.0, 1.0, (n, j, 3)) * limits[None, :, None]
    root_pos = np.column_stack([rng.uniform(-400, 400, n), rng.uniform(-150, 250, n), rng.uniform(4000, 6000, n)])

    frames = np.empty((n, j, 3, 3))
    body = np.zeros((n, j, 3))
    order = sorted(range(j), key=lambda c: _depth(parents, c))
    for c in order:
        p = parents[c]
        if p < 0:
            frames[:, c] = global_rot
            continue
        frames[:, c] = frames[:, p] @ Rotation.from_rotvec(local[:, c]).as_matrix()
        bone = template[c] - template[p]
        body[:, c] = body[:, p] + frames[:, c] @ bone
    body = body - body[:, skeleton.root_index : skeleton.root_index + 1]
    # body frame is y-up; camera frame is y-down with z pointing into the scene
    cam = body * np.array([1.0, -1.0, -1.0]) + root_pos[:, None, :]

    norm = camera.normalization(pose_scale_mm)
    keypoints = normalize_2d(camera.project(cam), norm)
    if noise_sigma > 0:
        keypoints = keypoints + rng.normal(0.0, noise_sigma, keypoints.shape)
    idx = np.arange(n)
    return PoseDataset(keypoints, cam, idx % len(actions), idx % len(subjects), skeleton,
                       tuple(actions), tuple(subjects), norm)


def _depth(parents: Sequence[int], node: int) -> int:
    d = 0
    while parents[node] >= 0:
        node = parents[node]
        d += 1
    return d


def bone_lengths(joints: np.ndarray, skeleton: SkeletonSpec) -> np.ndarray:
    """Per-edge lengths ``(..., E)`` in the same order as ``skeleton.edges``."""
    e = np.array(skeleton.edges)
    return np.linalg.norm(joints[..., e[:, 0], :] - joints[..., e[:, 1], :], axis=-1)
