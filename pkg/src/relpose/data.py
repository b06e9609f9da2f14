"""Pair manifests, image loading, synthetic scenes and dataset splits.

Manifest lines (whitespace separated, ``#`` starts a comment)::

    scene img_a img_b qwA qxA qyA qzA txA tyA tzA qwB qxB qyB qzB txB tyB tzB

Poses are absolute world-to-camera. Image paths are relative to the
manifest's directory unless absolute.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from relpose.errors import (
    BadQuaternion,
    BadRatios,
    DegenerateGeometry,
    EmptyDataset,
    NearZeroQuaternion,
    ParseError,
)
from relpose.geometry import (
    AbsolutePose,
    RelativePose,
    axis_angle_to_quat,
    erroneous_relative_translation,
    quat_to_matrix,
    relative_pose,
)
from relpose.tensorio import load_tensor, save_tensor

CONVENTIONS = ("rectified", "erroneous")


@dataclass
class PairRecord:
    scene: str
    img_a: str | np.ndarray
    img_b: str | np.ndarray
    pose_a: AbsolutePose
    pose_b: AbsolutePose
    target: RelativePose
    pair_id: str = ""


def make_target(pose_a: AbsolutePose, pose_b: AbsolutePose, convention: str = "rectified") -> RelativePose:
    rel = relative_pose(pose_a, pose_b)
    if convention == "rectified":
        return rel
    if convention == "erroneous":
        return RelativePose(rel.rotation, erroneous_relative_translation(pose_a, pose_b))
    raise ValueError(f"convention must be one of {CONVENTIONS}, got {convention!r}")


def _pose(values: list[float], lineno: int) -> AbsolutePose:
    try:
        return AbsolutePose(tuple(values[:4]), values[4:7])
    except NearZeroQuaternion as exc:
        raise BadQuaternion(f"line {lineno}: {exc}") from None


def load_pairs(manifest, convention: str = "rectified", swap: bool = False) -> list[PairRecord]:
    manifest = Path(manifest)
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {CONVENTIONS}, got {convention!r}")
    base = manifest.parent
    records = []
    with open(manifest) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 17:
                raise ParseError(f"expected 17 fields, got {len(parts)}", line=lineno)
            scene, img_a, img_b = parts[:3]
            try:
                values = [float(v) for v in parts[3:]]
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if not all(math.isfinite(v) for v in values):
                raise ParseError("non-finite pose value", line=lineno)
            pose_a, pose_b = _pose(values[:7], lineno), _pose(values[7:], lineno)
            path_a, path_b = str(base / img_a), str(base / img_b)
            if swap:
                pose_a, pose_b, path_a, path_b = pose_b, pose_a, path_b, path_a
            records.append(PairRecord(scene, path_a, path_b, pose_a, pose_b,
                                      make_target(pose_a, pose_b, convention), pair_id=f"{len(records)}"))
    if not records:
        raise EmptyDataset(f"no pairs in {manifest}")
    return records


def _fmt(v: float) -> str:
    return repr(float(v))


def save_pairs(manifest, records: list[PairRecord]) -> None:
    """Write records as a manifest; image paths are written relative to the
    manifest directory when possible."""
    manifest = Path(manifest)
    base = manifest.parent.resolve()
    lines = []
    for r in records:
        if not isinstance(r.img_a, str) or not isinstance(r.img_b, str):
            raise ValueError("save_pairs needs file-backed images")
        names = []
        for p in (r.img_a, r.img_b):
            try:
                names.append(os.path.relpath(Path(p).resolve(), base))
            except ValueError:
                names.append(str(Path(p).resolve()))
        fields = [r.scene, *names]
        for pose in (r.pose_a, r.pose_b):
            fields += [_fmt(v) for v in pose.rotation] + [_fmt(v) for v in pose.translation]
        lines.append(" ".join(fields))
    manifest.write_text("\n".join(lines) + "\n")


def load_image(path, channels: int = 1) -> np.ndarray:
    """Load an image as float32 (channels, H, W) in [0, 1]. RPTN files are
    taken as-is (2-D arrays get a channel axis)."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == b"RPTN":
        arr = load_tensor(path)
        if arr.ndim == 2:
            arr = arr[None]
        return arr
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("L" if channels == 1 else "RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1).copy()


def record_images(record: PairRecord, channels: int = 1) -> tuple[np.ndarray, np.ndarray]:
    def get(ref):
        if isinstance(ref, np.ndarray):
            return ref[None].astype(np.float32) if ref.ndim == 2 else ref.astype(np.float32)
        return load_image(ref, channels)

    return get(record.img_a), get(record.img_b)


# synthetic scenes ---------------------------------------------------------------

@dataclass(frozen=True)
class Intrinsics:
    focal: float
    cx: float
    cy: float

    def project(self, points_cam: np.ndarray) -> np.ndarray:
        """(N, 3) camera-frame points -> (N, 2) pixel (u, v)."""
        z = points_cam[:, 2]
        return np.stack([self.focal * points_cam[:, 0] / z + self.cx,
                         self.focal * points_cam[:, 1] / z + self.cy], axis=1)


@dataclass
class SyntheticScene:
    points: np.ndarray  # (P, 3) meters
    brightness: np.ndarray  # (P,)
    intrinsics: Intrinsics
    image_size: tuple[int, int]  # (H, W)
    cameras: list[tuple[AbsolutePose, AbsolutePose]]
    images: list[tuple[np.ndarray, np.ndarray]]
    # per pair: (k, 2) int array of (cell_a, cell_b) at 1/8 grid resolution
    correspondences: list[np.ndarray] = field(default_factory=list)

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // 8, self.image_size[1] // 8


def look_at(center, target, up=(0.0, -1.0, 0.0)) -> np.ndarray:
    """World-to-camera rotation with +z toward ``target`` and image rows
    (+y) pointing roughly along -``up``."""
    z = np.asarray(target, float) - np.asarray(center, float)
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, float), z)
    if np.linalg.norm(x) < 1e-8:
        x = np.cross([1.0, 0.0, 0.0], z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


def render(points_cam, brightness, intrinsics: Intrinsics, size, sigma_px: float = 1.2) -> np.ndarray:
    """Gaussian splats of per-point brightness, squashed to [0, 1)."""
    h, w = size
    uv = intrinsics.project(points_cam)
    sig = sigma_px * 3.0 / points_cam[:, 2]  # nearer points splat larger
    vs, us = np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64)
    gy = np.exp(-((vs[None, :] - uv[:, 1:2]) ** 2) / (2 * sig[:, None] ** 2))  # P, H
    gx = np.exp(-((us[None, :] - uv[:, 0:1]) ** 2) / (2 * sig[:, None] ** 2))  # P, W
    field_ = np.einsum("p,ph,pw->hw", brightness, gy, gx)
    return (1.0 - np.exp(-field_)).astype(np.float32)


def visible_cells(points_cam, intrinsics: Intrinsics, size) -> dict[int, int]:
    """Map grid cell -> index of the nearest point projecting into it."""
    h, w = size
    uv = intrinsics.project(points_cam)
    inside = (points_cam[:, 2] > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
    gw = w // 8
    best: dict[int, int] = {}
    for p in np.flatnonzero(inside):
        col, row = int(uv[p, 0] // 8), int(uv[p, 1] // 8)
        if row >= h // 8 or col >= gw:
            continue
        cell = row * gw + col
        if cell not in best or points_cam[p, 2] < points_cam[best[cell], 2]:
            best[cell] = p
    return best


def _sample_camera(rng, distance_range):
    direction = rng.normal(size=3)
    direction[2] = -abs(direction[2]) - 1.5  # stay on the -z side of the box
    direction /= np.linalg.norm(direction)
    return direction * rng.uniform(*distance_range)


def synth_scene(seed: int, n_points: int = 300, n_pairs: int = 32, baseline_range=(0.3, 1.0),
                rotation_range_deg: float = 30.0, image_size=(64, 64), scene: str = "synthetic",
                min_covisible: int = 8, max_tries: int = 1000):
    """Random points in [-1, 1]^3 viewed by ``n_pairs`` camera pairs.

    Camera A sits about 3 m from the origin looking at a jittered target;
    camera B is offset by a baseline drawn from ``baseline_range`` and
    rotated by an axis-angle rotation of at most ``rotation_range_deg``.
    Returns ``(scene, records)``.
    """
    lo, hi = baseline_range
    if not (0 < lo <= hi) or not (0 < rotation_range_deg <= 60):
        raise ValueError("baseline range must be positive and rotation range in (0, 60] degrees")
    rng = np.random.default_rng(seed)
    h, w = image_size
    intr = Intrinsics(focal=0.9 * w, cx=w / 2.0, cy=h / 2.0)
    points = rng.uniform(-1.0, 1.0, size=(n_points, 3))
    brightness = rng.uniform(0.3, 1.5, size=n_points)

    cameras, images, corrs, records = [], [], [], []
    for k in range(n_pairs):
        for _ in range(max_tries):
            c_a = _sample_camera(rng, (2.8, 3.4))
            R_a = look_at(c_a, rng.normal(scale=0.15, size=3))
            roll = axis_angle_to_quat([0, 0, 1], math.radians(rng.uniform(-10, 10)))
            R_a = quat_to_matrix(roll) @ R_a
            angle = math.radians(rng.uniform(0, rotation_range_deg))
            R_rel = quat_to_matrix(axis_angle_to_quat(rng.normal(size=3), angle))
            R_b = R_rel @ R_a
            offset = rng.normal(size=3)
            c_b = c_a + offset / np.linalg.norm(offset) * rng.uniform(lo, hi)
            pose_a, pose_b = AbsolutePose.from_center(R_a, c_a), AbsolutePose.from_center(R_b, c_b)
            pa, pb = pose_a.transform(points), pose_b.transform(points)
            if pa[:, 2].min() <= 0.1 or pb[:, 2].min() <= 0.1:
                continue
            cells_a = visible_cells(pa, intr, image_size)
            uv_b = intr.project(pb)
            pairs = []
            for cell_a, p in sorted(cells_a.items()):
                u, v = uv_b[p]
                if 0 <= u < (w // 8) * 8 and 0 <= v < (h // 8) * 8:
                    pairs.append((cell_a, int(v // 8) * (w // 8) + int(u // 8)))
            if len(pairs) >= min_covisible:
                break
        else:
            raise DegenerateGeometry(f"pair {k}: fewer than {min_covisible} covisible points after {max_tries} tries")
        img_a = render(pa, brightness, intr, image_size)
        img_b = render(pb, brightness, intr, image_size)
        cameras.append((pose_a, pose_b))
        images.append((img_a, img_b))
        corrs.append(np.array(pairs, dtype=np.int64).reshape(-1, 2))
        records.append(PairRecord(scene, img_a, img_b, pose_a, pose_b, relative_pose(pose_a, pose_b), pair_id=str(k)))
    return SyntheticScene(points, brightness, intr, tuple(image_size), cameras, images, corrs), records


def save_synthetic(out_dir, scene: SyntheticScene, records: list[PairRecord]) -> Path:
    """Write images (RPTN), ``pairs.txt`` and ``correspondences.csv``.
    Returns the manifest path; records are updated to reference the files."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for k, rec in enumerate(records):
        for side, arr in (("a", scene.images[k][0]), ("b", scene.images[k][1])):
            path = out / "images" / f"{rec.scene}_{k:04d}_{side}.rptn"
            save_tensor(path, arr)
            if side == "a":
                rec.img_a = str(path)
            else:
                rec.img_b = str(path)
    manifest = out / "pairs.txt"
    save_pairs(manifest, records)
    with open(out / "correspondences.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["pair_id", "cell_a", "cell_b"])
        for k, corr in enumerate(scene.correspondences):
            for a, b in corr:
                writer.writerow([k, int(a), int(b)])
    return manifest


def split(records: list, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded shuffle, then consecutive train/val/test slices."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatios(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    order = np.random.default_rng(seed).permutation(len(records))
    n = len(records)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_val = min(n_val, n - n_train)
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple([records[i] for i in part] for part in parts)
