"""16-joint skeleton, synthetic forward-kinematics data, dataset CSV I/O,
mean-subtraction preprocessing and missing-joint scenarios.

Coordinates: 3D joints are in millimetres in the camera frame (x right,
y down, z forward); 2D joints are pixels.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng

JOINT_NAMES = (
    "pelvis", "spine", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)
N_JOINTS = len(JOINT_NAMES)
ROOT = 0
JOINT_INDEX = {name: i for i, name in enumerate(JOINT_NAMES)}

PARENTS = (-1, 0, 1, 2, 2, 4, 5, 2, 7, 8, 0, 10, 11, 0, 13, 14)

# left arm, right arm, left leg, right leg, torso
GROUPS = ((4, 5, 6), (7, 8, 9), (10, 11, 12), (13, 14, 15), (0, 1, 2, 3))
GROUP_NAMES = ("left_arm", "right_arm", "left_leg", "right_leg", "torso")

# Rest-pose bone offsets in the body frame (x: subject's left, y: up,
# z: facing direction), millimetres. Arms are held out sideways.
REST_OFFSETS = np.array([
    [0.0, 0.0, 0.0],
    [0.0, 250.0, 0.0],
    [0.0, 300.0, 0.0],
    [0.0, 180.0, 0.0],
    [180.0, 0.0, 0.0],
    [280.0, 0.0, 0.0],
    [250.0, 0.0, 0.0],
    [-180.0, 0.0, 0.0],
    [-280.0, 0.0, 0.0],
    [-250.0, 0.0, 0.0],
    [120.0, -50.0, 0.0],
    [0.0, -440.0, 0.0],
    [0.0, -430.0, 0.0],
    [-120.0, -50.0, 0.0],
    [0.0, -440.0, 0.0],
    [0.0, -430.0, 0.0],
])

# Per-joint Euler limits (radians) about the local x, y, z axes; rows are
# (lo, hi) pairs. Leaf joints carry no rotation. Right-side y/z ranges are
# the mirror of the left side.
_L = {
    "pelvis": ((-0.3, 0.3), (0.0, 0.0), (-0.15, 0.15)),
    "spine": ((-0.2, 0.6), (-0.5, 0.5), (-0.3, 0.3)),
    "neck": ((-0.4, 0.4), (-0.6, 0.6), (-0.3, 0.3)),
    "l_shoulder": ((-1.5, 1.5), (-0.8, 0.8), (-1.3, 0.5)),
    "l_elbow": ((0.0, 0.0), (0.0, 2.3), (0.0, 0.0)),
    "l_hip": ((-1.6, 0.4), (-0.4, 0.4), (-0.3, 0.6)),
    "l_knee": ((0.0, 2.2), (0.0, 0.0), (0.0, 0.0)),
}


def _mirror(lim):
    (xl, xh), (yl, yh), (zl, zh) = lim
    return (xl, xh), (-yh, -yl), (-zh, -zl)


def _build_limits() -> np.ndarray:
    lim = np.zeros((N_JOINTS, 3, 2))
    for name, value in _L.items():
        lim[JOINT_INDEX[name]] = value
        if name.startswith("l_"):
            lim[JOINT_INDEX["r_" + name[2:]]] = _mirror(value)
    return lim


ANGLE_LIMITS = _build_limits()

# body frame -> camera frame for a subject facing the camera
BODY_TO_CAMERA = np.diag([1.0, -1.0, -1.0])


@dataclass(frozen=True)
class SkeletonLayout:
    names: tuple = JOINT_NAMES
    parents: tuple = PARENTS
    offsets: np.ndarray = field(default_factory=lambda: REST_OFFSETS.copy())
    limits: np.ndarray = field(default_factory=lambda: ANGLE_LIMITS.copy())

    @property
    def bone_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.offsets[1:], axis=1)

    def bones(self) -> list[tuple[int, int]]:
        return [(p, j) for j, p in enumerate(self.parents) if p >= 0]


DEFAULT_LAYOUT = SkeletonLayout()


@dataclass(frozen=True)
class Camera:
    focal: float = 1000.0
    cx: float = 500.0
    cy: float = 500.0

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError("focal length must be positive")


def euler_matrix(ax: float, ay: float, az: float) -> np.ndarray:
    """R = Rz(az) @ Ry(ay) @ Rx(ax)."""
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def fk_pose(layout: SkeletonLayout, joint_angles, root_rotation=None,
            root_position=None) -> np.ndarray:
    """Forward kinematics; returns (16, 3) joint positions.

    ``joint_angles`` is (16, 3) local Euler angles. The root rotation and
    position place the body frame into the target frame.
    """
    angles = np.asarray(joint_angles, dtype=np.float64).reshape(N_JOINTS, 3)
    tol = 1e-12
    if np.any(angles < layout.limits[..., 0] - tol) or np.any(angles > layout.limits[..., 1] + tol):
        bad = np.argwhere((angles < layout.limits[..., 0] - tol) | (angles > layout.limits[..., 1] + tol))
        j, a = bad[0]
        raise ValueError(f"angle {'xyz'[a]} of {layout.names[j]} outside its limits")
    rot0 = np.eye(3) if root_rotation is None else np.asarray(root_rotation, dtype=np.float64)
    pos0 = np.zeros(3) if root_position is None else np.asarray(root_position, dtype=np.float64)
    glob = [None] * N_JOINTS
    pos = np.zeros((N_JOINTS, 3))
    for j, p in enumerate(layout.parents):
        local = euler_matrix(*angles[j])
        if p < 0:
            glob[j] = rot0 @ local
            pos[j] = pos0
        else:
            glob[j] = glob[p] @ local
            pos[j] = pos[p] + glob[p] @ layout.offsets[j]
    return pos


def project(pose3d, camera: Camera) -> np.ndarray:
    pose3d = np.asarray(pose3d, dtype=np.float64)
    z = pose3d[..., 2]
    if np.any(z <= 0):
        raise ValueError("cannot project points at or behind the camera (z <= 0)")
    u = camera.focal * pose3d[..., 0] / z + camera.cx
    v = camera.focal * pose3d[..., 1] / z + camera.cy
    return np.stack([u, v], axis=-1)


# --------------------------------------------------------------------------
# dataset


@dataclass
class Dataset:
    sample_ids: list[str]
    subjects: list[str]
    actions: list[str]
    joints2d: np.ndarray  # (N, 16, 2)
    joints3d: np.ndarray  # (N, 16, 3)
    visibility: np.ndarray  # (N, 16) bool

    def __len__(self) -> int:
        return len(self.sample_ids)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return Dataset(
            [self.sample_ids[i] for i in index],
            [self.subjects[i] for i in index],
            [self.actions[i] for i in index],
            self.joints2d[index],
            self.joints3d[index],
            self.visibility[index],
        )


@dataclass(frozen=True)
class SynthConfig:
    camera: Camera = Camera()
    depth_range: tuple[float, float] = (3500.0, 5500.0)
    lateral_range: tuple[float, float] = (-400.0, 400.0)
    height_range: tuple[float, float] = (-200.0, 200.0)
    n_actions: int = 4
    action_width: float = 0.4  # fraction of each joint range spanned per action
    noise2d: float = 0.0  # std of additive pixel noise


def action_box(layout: SkeletonLayout, action: int, width: float) -> np.ndarray:
    """Sub-box of the joint limits that samples of ``action`` are drawn from."""
    rng = Rng(0xAC7).split(action)
    lo, hi = layout.limits[..., 0], layout.limits[..., 1]
    span = hi - lo
    half = 0.5 * width * span
    centre = lo + half + rng.random(lo.shape) * (span - 2 * half)
    return np.stack([centre - half, centre + half], axis=-1)


def _yaw(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def synth_sample(layout: SkeletonLayout, cfg: SynthConfig, seed: int, index: int,
                 boxes=None):
    """One synthetic sample; randomness depends only on (seed, index)."""
    rng = Rng(seed).split(index)
    action = rng.choice(cfg.n_actions)
    if boxes is None:
        box = action_box(layout, action, cfg.action_width)
    else:
        box = boxes[action]
    u = rng.random((N_JOINTS, 3))
    angles = box[..., 0] + u * (box[..., 1] - box[..., 0])
    yaw = rng.uniform(-math.pi, math.pi)
    position = np.array([
        rng.uniform(*cfg.lateral_range),
        rng.uniform(*cfg.height_range),
        rng.uniform(*cfg.depth_range),
    ])
    pose = fk_pose(layout, angles, BODY_TO_CAMERA @ _yaw(yaw), position)
    uv = project(pose, cfg.camera)
    if cfg.noise2d > 0:
        uv = uv + rng.normal(0.0, cfg.noise2d, uv.shape)
    return f"act{action:02d}", pose, uv


def synth_generate(n: int, seed: int, layout: SkeletonLayout = DEFAULT_LAYOUT,
                   cfg: SynthConfig = SynthConfig()) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    boxes = [action_box(layout, a, cfg.action_width) for a in range(cfg.n_actions)]
    ids, actions = [], []
    j2 = np.zeros((n, N_JOINTS, 2))
    j3 = np.zeros((n, N_JOINTS, 3))
    for i in range(n):
        action, pose, uv = synth_sample(layout, cfg, seed, i, boxes)
        ids.append(f"s{seed}-{i:06d}")
        actions.append(action)
        j3[i] = pose
        j2[i] = uv
    return Dataset(ids, ["synth"] * n, actions, j2, j3, np.ones((n, N_JOINTS), dtype=bool))


def csv_header() -> list[str]:
    cols = ["sample_id", "subject", "action"]
    cols += [f"j{j:02d}_{c}" for j in range(N_JOINTS) for c in "uv"]
    cols += [f"j{j:02d}_{c}" for j in range(N_JOINTS) for c in "xyz"]
    cols += [f"vis{j:02d}" for j in range(N_JOINTS)]
    return cols


def _fmt(x: float) -> str:
    return repr(float(x))


def dataset_to_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header())
    for i in range(len(ds)):
        row = [ds.sample_ids[i], ds.subjects[i], ds.actions[i]]
        row += [_fmt(v) for v in ds.joints2d[i].reshape(-1)]
        row += [_fmt(v) for v in ds.joints3d[i].reshape(-1)]
        row += ["1" if v else "0" for v in ds.visibility[i]]
        w.writerow(row)
    return buf.getvalue()


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(dataset_to_csv(ds), encoding="utf-8")


class DataFormatError(ValueError):
    pass


def load_dataset(path) -> Dataset:
    header = csv_header()
    ids, subjects, actions, j2, j3, vis = [], [], [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if first != header:
            raise DataFormatError(f"{path}: line 1: unexpected header")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataFormatError(
                    f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                nums = [float(v) for v in row[3:3 + 80]]
                flags = [int(v) for v in row[83:]]
            except ValueError as exc:
                raise DataFormatError(f"{path}: line {lineno}: {exc}") from None
            if any(f not in (0, 1) for f in flags):
                raise DataFormatError(f"{path}: line {lineno}: visibility must be 0/1")
            uv = np.array(nums[:32]).reshape(N_JOINTS, 2)
            xyz = np.array(nums[32:]).reshape(N_JOINTS, 3)
            v = np.array(flags, dtype=bool)
            if not (np.all(np.isfinite(uv[v])) and np.all(np.isfinite(xyz))):
                raise DataFormatError(f"{path}: line {lineno}: non-finite joint values")
            ids.append(row[0])
            subjects.append(row[1])
            actions.append(row[2])
            j2.append(uv)
            j3.append(xyz)
            vis.append(v)
    if not ids:
        raise DataFormatError(f"{path}: no samples")
    return Dataset(ids, subjects, actions, np.array(j2), np.array(j3), np.array(vis))


def dataset_digest(ds: Dataset) -> str:
    return hashlib.sha256(dataset_to_csv(ds).encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# preprocessing


@dataclass
class NormStats:
    mean2d: np.ndarray  # (32,)
    mean3d: np.ndarray  # (45,)


def root_relative(joints3d: np.ndarray) -> np.ndarray:
    """(N, 16, 3) -> (N, 45): non-root joints minus root."""
    rel = joints3d - joints3d[:, ROOT:ROOT + 1]
    return np.delete(rel, ROOT, axis=1).reshape(len(joints3d), -1)


def compute_stats(ds: Dataset) -> NormStats:
    if len(ds) == 0:
        raise ValueError("cannot compute statistics of an empty dataset")
    seen = np.repeat(ds.visibility, 2, axis=1)
    total = np.where(seen, ds.joints2d.reshape(len(ds), -1), 0.0).sum(axis=0)
    count = seen.sum(axis=0)
    # a joint never visible gets mean 0; its inputs are zeroed anyway
    mean2d = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return NormStats(mean2d=mean2d, mean3d=root_relative(ds.joints3d).mean(axis=0))


def preprocess(ds: Dataset, stats: NormStats | None = None):
    """Mean-subtracted inputs (N, 32) and root-relative targets (N, 45).

    Invisible joints are set to 0 after mean subtraction, i.e. to the mean.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    if stats is None:
        stats = compute_stats(ds)
    inputs = ds.joints2d.reshape(len(ds), -1) - stats.mean2d
    inputs = np.where(np.repeat(ds.visibility, 2, axis=1), inputs, 0.0)
    targets = root_relative(ds.joints3d) - stats.mean3d
    return inputs, targets, stats


def postprocess(pred: np.ndarray, stats: NormStats, root=None) -> np.ndarray:
    """Network output (N, 45) -> (N, 16, 3) with the root at ``root``."""
    pred = np.asarray(pred).reshape(-1, 45) + stats.mean3d
    n = len(pred)
    out = np.insert(pred.reshape(n, N_JOINTS - 1, 3), ROOT, 0.0, axis=1)
    if root is not None:
        out = out + np.asarray(root).reshape(n, 1, 3)
    return out


# --------------------------------------------------------------------------
# missing-joint scenarios

SCENARIOS = ("none", "rand2", "larm", "rleg")
LEFT_ARM = GROUPS[0]
RIGHT_LEG = GROUPS[3]


def make_missing(scenario: str, rng: Rng | None, n: int) -> np.ndarray:
    """Visibility flags (n, 16) for a missing-joint scenario.

    ``rand2`` hides two distinct non-root joints per sample.
    """
    scenario = scenario.lower()
    vis = np.ones((n, N_JOINTS), dtype=bool)
    if scenario == "none":
        return vis
    if scenario == "larm":
        vis[:, LEFT_ARM] = False
        return vis
    if scenario == "rleg":
        vis[:, RIGHT_LEG] = False
        return vis
    if scenario == "rand2":
        if rng is None:
            raise ValueError("rand2 needs an rng")
        candidates = np.array([j for j in range(N_JOINTS) if j != ROOT])
        m = len(candidates)
        a = rng.choices(m, n)
        b = rng.choices(m - 1, n)
        b = b + (b >= a)
        rows = np.arange(n)
        vis[rows, candidates[a]] = False
        vis[rows, candidates[b]] = False
        return vis
    raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
