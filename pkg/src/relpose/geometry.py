"""Rotation/pose algebra, relative-pose conventions and error metrics.

Conventions
-----------
* Quaternions are (w, x, y, z), Hamilton product, unit norm.
* Absolute poses map world to camera: ``x_cam = R @ x_world + t``.
  The camera center is ``c = -R.T @ t``.
* Relative pose of B w.r.t. A: ``R = R_B @ R_A.T`` and
  ``t = t_A - R.T @ t_B``, which equals ``R_A @ (c_B - c_A)``.  Hence
  ``|t|`` is the distance between the two camera centers.

Everything here runs in float64 and is a pure function of its inputs.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from relpose.errors import DegenerateScale, NearZeroQuaternion

QUAT_EPS = 1e-12


class UnitQuaternion(NamedTuple):
    w: float
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)


def quat_normalize_canonical(q) -> UnitQuaternion:
    """Normalize ``q`` and flip its sign so that ``w >= 0``."""
    q = np.asarray(q, dtype=np.float64).reshape(4)
    norm = float(np.linalg.norm(q))
    if not norm > QUAT_EPS:
        raise NearZeroQuaternion(f"quaternion norm {norm:g} <= {QUAT_EPS:g}")
    q = q / norm
    if q[0] < 0:
        q = -q
    return UnitQuaternion(*(float(v) for v in q))


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = np.asarray(a, dtype=np.float64)
    bw, bx, by, bz = np.asarray(b, dtype=np.float64)
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = quat_normalize_canonical(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> UnitQuaternion:
    """Shepperd's method; picks the largest pivot for stability."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize_canonical(q)


def axis_angle_to_quat(axis, angle_rad: float) -> UnitQuaternion:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle_rad
    return quat_normalize_canonical([math.cos(half), *(axis * math.sin(half))])


def rot_z(angle_deg: float) -> np.ndarray:
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class AbsolutePose:
    """World-to-camera pose ``x_cam = R x_world + t``."""

    rotation: UnitQuaternion
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_normalize_canonical(self.rotation))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def from_matrix(cls, R, t) -> "AbsolutePose":
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_center(cls, R, center) -> "AbsolutePose":
        R = np.asarray(R, dtype=np.float64)
        return cls(matrix_to_quat(R), -R @ np.asarray(center, dtype=np.float64))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.translation

    def transform(self, points) -> np.ndarray:
        """Map (N, 3) world points into this camera's frame."""
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.translation


@dataclass(frozen=True)
class RelativePose:
    rotation: UnitQuaternion
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_normalize_canonical(self.rotation))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)


def relative_pose(pose_a: AbsolutePose, pose_b: AbsolutePose) -> RelativePose:
    R_a, R_b = pose_a.R, pose_b.R
    R = R_b @ R_a.T
    t = pose_a.translation - R.T @ pose_b.translation
    return RelativePose(matrix_to_quat(R), t)


def erroneous_relative_translation(pose_a: AbsolutePose, pose_b: AbsolutePose) -> np.ndarray:
    """Raw ``t_A - t_B``; ignores the relative rotation (kept for diagnostics)."""
    return pose_a.translation - pose_b.translation


def rotation_error_deg(q, q_hat) -> float:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    q_hat = np.asarray(q_hat, dtype=np.float64).reshape(4)
    norm = float(np.linalg.norm(q_hat))
    if not norm > QUAT_EPS:
        raise NearZeroQuaternion(f"predicted quaternion norm {norm:g} <= {QUAT_EPS:g}")
    # 2 acos(|<q_hat, q>| / |q_hat|) for unit q, evaluated through the relative
    # quaternion q_hat q* with atan2 so small angles keep full precision; the
    # grouping makes the vector part exactly zero when q_hat = +-q
    w, v = float(q @ q_hat), q[0] * q_hat[1:] - q_hat[0] * q[1:] - np.cross(q_hat[1:], q[1:])
    return math.degrees(2.0 * math.atan2(float(np.linalg.norm(v)), abs(w)))


def translation_error(t, t_hat) -> float:
    diff = np.asarray(t_hat, dtype=np.float64) - np.asarray(t, dtype=np.float64)
    return float(np.linalg.norm(diff))


def _golden_section(f, lo: float, hi: float, tol: float = 1e-10, max_iter: int = 200) -> float:
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) < tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def align_scale(pred: Sequence, gt: Sequence, mode: str = "lsq", eps: float = 1e-12):
    """Find a global scale for predicted translations.

    ``mode="lsq"`` returns the closed-form minimizer of
    ``sum |s * pred_k - gt_k|^2``.  ``mode="median"`` minimizes the median
    error with a golden-section search over ``log s`` in ``[1e-3, 1e3]``;
    the objective is not guaranteed unimodal so this is a local search
    seeded by the bracket.

    Returns ``(scale, errors)`` where ``errors[k] = |s * pred_k - gt_k|``.
    """
    P = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    G = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(P) == 0 or P.shape != G.shape:
        raise ValueError(f"need equal-length nonempty lists, got {P.shape} and {G.shape}")
    denom = float(np.sum(P * P))
    if not denom > eps:
        raise DegenerateScale(f"sum of squared prediction norms {denom:g} <= {eps:g}")

    if mode == "lsq":
        s = float(np.sum(P * G)) / denom
    elif mode == "median":
        def objective(log_s):
            return float(np.median(np.linalg.norm(math.exp(log_s) * P - G, axis=1)))
        s = math.exp(_golden_section(objective, math.log(1e-3), math.log(1e3)))
    else:
        raise ValueError(f"unknown scale mode {mode!r}")
    errors = np.linalg.norm(s * P - G, axis=1)
    return s, [float(e) for e in errors]


@dataclass(frozen=True)
class SceneErrorSummary:
    scene: str
    median_rotation_deg: float
    median_translation_m: float
    pair_count: int


def per_scene_median(records: Iterable[tuple[str, float, float]]) -> list[SceneErrorSummary]:
    """Median rotation/translation error for each scene, in first-seen order."""
    grouped: dict[str, tuple[list, list]] = defaultdict(lambda: ([], []))
    for scene, r_err, t_err in records:
        grouped[scene][0].append(float(r_err))
        grouped[scene][1].append(float(t_err))
    if not grouped:
        raise ValueError("per_scene_median needs at least one record")
    return [
        SceneErrorSummary(scene, float(np.median(r)), float(np.median(t)), len(r))
        for scene, (r, t) in grouped.items()
    ]
