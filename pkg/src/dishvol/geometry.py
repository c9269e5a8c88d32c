"""Projective-geometry primitives shared by all reconstruction stages.

Conventions used throughout the package:

* camera frame: x right, y down, z forward (in front of the camera is z > 0)
* pixel coordinates: u right, v down
* relative pose maps camera-1 coordinates to camera-2 coordinates via
  ``X2 = R @ X1 + t * scale`` with ``t`` unit-norm and ``scale`` in mm
* essential matrix ``E = [t]x R`` so that ``x2^T E x1 = 0`` for normalized
  image coordinates ``x = ((u - cx)/fx, (v - cy)/fy, 1)``
* plane: ``normal . p = offset`` with a unit normal
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateLine, DegenerateRays, PointBehindCamera

MIN_TRIANGULATION_ANGLE_RAD = 1e-4


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix so that skew(v) @ w == cross(v, w)."""
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


@dataclass(frozen=True)
class ImagePoint:
    u: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v], dtype=float)


@dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    @staticmethod
    def from_array(a) -> "Point3":
        a = np.asarray(a, dtype=float)
        return Point3(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; lens distortion is out of scope."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    def normalize(self, uv: np.ndarray) -> np.ndarray:
        """Pixel coordinates (..., 2) -> normalized coordinates (..., 2)."""
        uv = np.asarray(uv, dtype=float)
        out = np.empty_like(uv)
        out[..., 0] = (uv[..., 0] - self.cx) / self.fx
        out[..., 1] = (uv[..., 1] - self.cy) / self.fy
        return out

    def denormalize(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        out = np.empty_like(xy)
        out[..., 0] = xy[..., 0] * self.fx + self.cx
        out[..., 1] = xy[..., 1] * self.fy + self.cy
        return out

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics after resizing the image by ``factor``."""
        return CameraIntrinsics(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            width=max(1, int(round(self.width * factor))),
            height=max(1, int(round(self.height * factor))),
        )

    @staticmethod
    def from_json(path) -> "CameraIntrinsics":
        data = json.loads(Path(path).read_text())
        return CameraIntrinsics(
            fx=float(data["fx"]), fy=float(data["fy"]),
            cx=float(data["cx"]), cy=float(data["cy"]),
            width=int(data["width"]), height=int(data["height"]),
        )

    def to_json_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }


@dataclass
class RelativePose:
    """Rigid motion from camera 1 to camera 2, with a metric scale.

    ``translation`` is unit-norm when produced by pose estimation; the
    metric baseline is ``translation * scale`` (mm once scale is set).
    """

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float)
        if self.rotation.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if self.translation.shape != (3,):
            raise ValueError("translation must be a 3-vector")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise ValueError("rotation must have determinant +1")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation must be orthonormal")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    @staticmethod
    def identity() -> "RelativePose":
        return RelativePose(np.eye(3), np.zeros(3))

    @property
    def baseline(self) -> np.ndarray:
        """Metric translation vector (camera-2 origin expressed in its frame)."""
        return self.translation * self.scale

    def camera2_center(self) -> np.ndarray:
        """Camera-2 center in the camera-1 frame."""
        return -self.rotation.T @ self.baseline

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Camera-1 coordinates (..., 3) -> camera-2 coordinates."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.baseline

    def essential_matrix(self) -> "EssentialModel":
        t = self.translation
        n = np.linalg.norm(t)
        if n < 1e-12:
            raise ValueError("zero baseline has no essential matrix")
        return EssentialModel(skew(t / n) @ self.rotation)

    def with_scale(self, scale: float) -> "RelativePose":
        return RelativePose(self.rotation.copy(), self.translation.copy(), scale)


@dataclass(frozen=True)
class EssentialModel:
    """Essential matrix, Frobenius-normalized, defined up to sign."""

    E: np.ndarray

    def __post_init__(self):
        E = np.asarray(self.E, dtype=float)
        if E.shape != (3, 3):
            raise ValueError("E must be 3x3")
        n = np.linalg.norm(E)
        if n < 1e-15:
            raise ValueError("E must be nonzero")
        object.__setattr__(self, "E", E / n)

    def singular_values(self) -> np.ndarray:
        return np.linalg.svd(self.E, compute_uv=False)

    def is_valid(self, det_rtol: float = 1e-8, sv_rtol: float = 1e-6) -> bool:
        s = self.singular_values()
        det_ok = abs(np.linalg.det(self.E)) <= det_rtol * max(1.0, s[0] ** 3)
        sv_ok = abs(s[0] - s[1]) <= sv_rtol * s[0]
        return bool(det_ok and sv_ok)


@dataclass(frozen=True)
class Plane:
    """Plane ``normal . p = offset`` with unit normal; offset in mm."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        if n.shape != (3,):
            raise ValueError("normal must be a 3-vector")
        norm = np.linalg.norm(n)
        if abs(norm - 1.0) > 1e-9:
            if norm < 1e-12:
                raise ValueError("normal must be nonzero")
            object.__setattr__(self, "normal", n / norm)
            object.__setattr__(self, "offset", float(self.offset) / norm)
        else:
            object.__setattr__(self, "normal", n)
            object.__setattr__(self, "offset", float(self.offset))

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.normal - self.offset

    def shifted(self, delta: float) -> "Plane":
        """Plane translated by ``delta`` along its normal."""
        return Plane(self.normal.copy(), self.offset + delta)

    def to_json_dict(self) -> dict:
        return {"normal": [float(x) for x in self.normal],
                "offset_mm": float(self.offset)}


# --- operations --------------------------------------------------------------

def project(p, K: CameraIntrinsics, pose: RelativePose) -> ImagePoint:
    """Project a camera-1 point into the camera defined by ``pose``.

    Use the identity pose to project into camera 1 itself.
    Raises PointBehindCamera when the transformed depth is non-positive.
    """
    p = p.as_array() if isinstance(p, Point3) else np.asarray(p, dtype=float)
    q = pose.rotation @ p + pose.baseline
    if q[2] <= 0:
        raise PointBehindCamera(f"depth {q[2]:.6g} <= 0")
    return ImagePoint(K.fx * q[0] / q[2] + K.cx, K.fy * q[1] / q[2] + K.cy)


def project_points(points: np.ndarray, K: CameraIntrinsics,
                   pose: RelativePose) -> tuple[np.ndarray, np.ndarray]:
    """Vector form of :func:`project`: returns (uv (N,2), in_front (N,))."""
    q = pose.transform(np.asarray(points, dtype=float))
    in_front = q[:, 2] > 0
    z = np.where(in_front, q[:, 2], 1.0)
    uv = np.stack([K.fx * q[:, 0] / z + K.cx, K.fy * q[:, 1] / z + K.cy], axis=1)
    return uv, in_front


def _rays_for_match(uv1, uv2, K1, K2, pose):
    x1 = np.array([(uv1[0] - K1.cx) / K1.fx, (uv1[1] - K1.cy) / K1.fy, 1.0])
    x2 = np.array([(uv2[0] - K2.cx) / K2.fx, (uv2[1] - K2.cy) / K2.fy, 1.0])
    d1 = x1 / np.linalg.norm(x1)
    d2 = pose.rotation.T @ x2
    d2 /= np.linalg.norm(d2)
    o2 = pose.camera2_center()
    return d1, d2, o2


def triangulate(m1, m2, K1: CameraIntrinsics, K2: CameraIntrinsics,
                pose: RelativePose) -> Point3:
    """Midpoint triangulation of one match, in the camera-1 frame.

    Returns the midpoint of the shortest segment between the two viewing
    rays. Raises DegenerateRays when the rays are nearly parallel.
    """
    uv1 = m1.as_array() if isinstance(m1, ImagePoint) else np.asarray(m1, float)
    uv2 = m2.as_array() if isinstance(m2, ImagePoint) else np.asarray(m2, float)
    d1, d2, o2 = _rays_for_match(uv1, uv2, K1, K2, pose)
    if np.linalg.norm(o2) < 1e-12:
        raise DegenerateRays("zero baseline: rays share a center")
    b = float(d1 @ d2)
    angle = np.arccos(min(1.0, abs(b)))
    if angle <= MIN_TRIANGULATION_ANGLE_RAD:
        raise DegenerateRays(f"triangulation angle {angle:.3g} rad")
    w0 = -o2  # o1 - o2 with o1 at the origin
    t1 = (b * (d2 @ w0) - (d1 @ w0)) / (1.0 - b * b)
    t2 = (d2 @ w0) + b * t1
    mid = 0.5 * (t1 * d1 + o2 + t2 * d2)
    return Point3.from_array(mid)


def triangulate_points(uv1: np.ndarray, uv2: np.ndarray,
                       K1: CameraIntrinsics, K2: CameraIntrinsics,
                       pose: RelativePose):
    """Vectorized midpoint triangulation.

    Args:
        uv1, uv2: pixel coordinates, shape (N, 2).

    Returns:
        (points (N, 3), valid (N,), angles (N,), depths (N, 2)) where
        ``valid`` marks non-degenerate rays and ``depths`` holds the ray
        parameters (positive when the point is in front of each camera).
    """
    uv1 = np.asarray(uv1, dtype=float)
    uv2 = np.asarray(uv2, dtype=float)
    x1 = np.stack([(uv1[:, 0] - K1.cx) / K1.fx,
                   (uv1[:, 1] - K1.cy) / K1.fy,
                   np.ones(len(uv1))], axis=1)
    x2 = np.stack([(uv2[:, 0] - K2.cx) / K2.fx,
                   (uv2[:, 1] - K2.cy) / K2.fy,
                   np.ones(len(uv2))], axis=1)
    d1 = x1 / np.linalg.norm(x1, axis=1, keepdims=True)
    d2 = x2 @ pose.rotation  # == (R^T @ x2^T)^T
    d2 /= np.linalg.norm(d2, axis=1, keepdims=True)
    o2 = pose.camera2_center()
    b = np.einsum("ij,ij->i", d1, d2)
    angles = np.arccos(np.clip(np.abs(b), 0.0, 1.0))
    denom = 1.0 - b * b
    valid = angles > MIN_TRIANGULATION_ANGLE_RAD
    if np.linalg.norm(o2) < 1e-12:
        valid = np.zeros(len(uv1), dtype=bool)
    denom = np.where(valid, denom, 1.0)
    w0 = -o2
    d1w = d1 @ w0
    d2w = d2 @ w0
    t1 = (b * d2w - d1w) / denom
    t2 = d2w + b * t1
    points = 0.5 * (t1[:, None] * d1 + o2 + t2[:, None] * d2)
    return points, valid, angles, np.stack([t1, t2], axis=1)


def _line_point_distance(line: np.ndarray, x: np.ndarray, tiny: float) -> float:
    n = np.hypot(line[0], line[1])
    if n < tiny:
        return np.nan
    return abs(line @ x) / n


def symmetric_epipolar_distance(E: EssentialModel, x1, x2,
                                tiny: float = 1e-15) -> float:
    """Sum of point-to-epipolar-line distances in both images.

    ``x1``/``x2`` are in normalized image coordinates (2-vectors).
    Zero iff the match satisfies the epipolar constraint exactly.
    """
    x1h = np.array([x1[0], x1[1], 1.0])
    x2h = np.array([x2[0], x2[1], 1.0])
    l2 = E.E @ x1h
    l1 = E.E.T @ x2h
    d2 = _line_point_distance(l2, x2h, tiny)
    d1 = _line_point_distance(l1, x1h, tiny)
    if np.isnan(d1) and np.isnan(d2):
        raise DegenerateLine("both epipolar lines are degenerate")
    if np.isnan(d1):
        d1 = 0.0
    if np.isnan(d2):
        d2 = 0.0
    return float(d1 + d2)


def epipolar_distances(E: np.ndarray, x1: np.ndarray, x2: np.ndarray,
                       tiny: float = 1e-15) -> np.ndarray:
    """Vectorized symmetric epipolar distance for normalized matches (N, 2).

    Degenerate lines contribute a large distance instead of raising, so the
    result can be used directly as a robust-fitting residual.
    """
    E = np.asarray(E, dtype=float)
    n = len(x1)
    x1h = np.concatenate([x1, np.ones((n, 1))], axis=1)
    x2h = np.concatenate([x2, np.ones((n, 1))], axis=1)
    l2 = x1h @ E.T          # lines in image 2
    l1 = x2h @ E            # lines in image 1
    alg = np.einsum("ij,ij->i", x2h, l2)  # x2^T E x1
    n2 = np.hypot(l2[:, 0], l2[:, 1])
    n1 = np.hypot(l1[:, 0], l1[:, 1])
    big = 1e12
    d2 = np.where(n2 > tiny, np.abs(alg) / np.maximum(n2, tiny), big)
    d1 = np.where(n1 > tiny, np.abs(alg) / np.maximum(n1, tiny), big)
    return d1 + d2


def point_plane_distance(p, plane: Plane) -> float:
    """Signed distance of a point to a plane (positive along the normal)."""
    p = p.as_array() if isinstance(p, Point3) else np.asarray(p, dtype=float)
    return float(plane.normal @ p - plane.offset)
