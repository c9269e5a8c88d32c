"""Stage 3: dense cloud, food surface meshing, dish plane, volume.

The food surface is sampled on a regular grid over the non-background
pixels, triangulated in 2-D, and label-filtered so no triangle spans two
segments. The dish reference plane combines the robustly fitted rim
plane with the table plane from the reference card: the rim plane is
translated along its normal to sit at the configured bottom height above
the table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .calibration import histogram_mode
from .errors import (
    DegenerateScale,
    EmptyDisparity,
    NoFoodPixels,
    NoModelFound,
    RimPlaneFailed,
    TablePlaneFailed,
)
from .geometry import CameraIntrinsics, Plane, RelativePose, triangulate_points
from .robust import (
    RansacConfig,
    bounding_box_noise,
    plane_distances,
    plane_solver,
    ransac,
)
from .stereo import DisparityMap, RectifiedPair

BACKGROUND = 0
DISH_LABEL = 1
FIRST_FOOD_LABEL = 2

MIN_RIM_POINTS = 20
MIN_TABLE_POINTS = 10
PLANE_FALLBACK_THRESHOLD_MM = 2.0


@dataclass
class DepthMap:
    values: np.ndarray           # (H, W) mm, camera-1 frame
    valid: np.ndarray


@dataclass
class LabeledMesh:
    vertices: np.ndarray         # (N, 3) mm
    vertex_px: np.ndarray        # (N, 2) source pixel (u, v)
    vertex_label: np.ndarray     # (N,)
    triangles: np.ndarray        # (M, 3) vertex indices
    tri_label: np.ndarray        # (M,)

    def __len__(self):
        return len(self.vertices)


@dataclass
class VolumeReport:
    items: dict                  # label -> milliliters
    dish_plane: Plane
    diagnostics: dict = field(default_factory=dict)

    @property
    def total_ml(self) -> float:
        return float(sum(self.items.values()))

    def to_json_dict(self) -> dict:
        return {
            "items": [{"label": int(k), "volume_ml": float(v)}
                      for k, v in sorted(self.items.items())],
            "dish_plane": self.dish_plane.to_json_dict(),
            "diagnostics": {k: v for k, v in self.diagnostics.items()
                            if k != "timings_s"},
        }


def dense_cloud(d: DisparityMap, pair: RectifiedPair, pose: RelativePose,
                K1: CameraIntrinsics, K2: CameraIntrinsics):
    """Unproject every valid disparity through the rectification maps.

    Returns (points (N, 3) mm, DepthMap on the image-1 grid). Raises
    EmptyDisparity when nothing is valid.
    """
    rows, cols = np.nonzero(d.valid)
    if len(rows) == 0:
        raise EmptyDisparity("no valid disparities to unproject")
    uv1 = pair.rect_to_original(rows, cols.astype(float), image=1)
    uv2 = pair.rect_to_original(rows, cols + d.values[rows, cols], image=2)
    pts, ok, _, depths = triangulate_points(uv1, uv2, K1, K2, pose)
    keep = ok & (depths[:, 0] > 0) & (depths[:, 1] > 0)
    pts = pts[keep]
    uv1 = uv1[keep]
    if len(pts) == 0:
        raise EmptyDisparity("all disparities triangulate behind the cameras")

    H, W = K1.height, K1.width
    acc = np.zeros((H, W), dtype=np.float64)
    cnt = np.zeros((H, W), dtype=np.int64)
    ui = np.clip(np.round(uv1[:, 0]).astype(int), 0, W - 1)
    vi = np.clip(np.round(uv1[:, 1]).astype(int), 0, H - 1)
    np.add.at(acc, (vi, ui), pts[:, 2])
    np.add.at(cnt, (vi, ui), 1)
    valid = cnt > 0
    values = np.where(valid, acc / np.maximum(cnt, 1), 0.0)
    return pts, DepthMap(values=values.astype(np.float64), valid=valid)


def fill_depth_holes(depth: DepthMap, seg: np.ndarray,
                     max_pass: int = 6) -> DepthMap:
    """Fill invalid non-background pixels from valid neighbor means."""
    values = depth.values.copy()
    valid = depth.valid.copy()
    target = seg > 0
    for _ in range(max_pass):
        holes = target & ~valid
        if not holes.any():
            break
        padded = np.pad(np.where(valid, values, 0.0), 1)
        pmask = np.pad(valid.astype(np.float64), 1)
        s = np.zeros_like(values)
        c = np.zeros_like(values)
        H, W = values.shape
        for dy in (0, 1, 2):
            for dx in (0, 1, 2):
                s += padded[dy:dy + H, dx:dx + W]
                c += pmask[dy:dy + H, dx:dx + W]
        grow = holes & (c > 0)
        values[grow] = s[grow] / c[grow]
        valid |= grow
    return DepthMap(values=values, valid=valid)


def sample_mesh(depth: DepthMap, seg: np.ndarray, mesh_size: int,
                K: CameraIntrinsics) -> LabeledMesh:
    """Regular-grid surface sampling plus label-pure Delaunay triangles.

    The grid pitch is sqrt(area / mesh_size) over the non-background
    area, so about ``mesh_size`` samples land on dish-or-food pixels.
    Triangles whose three vertices do not share a label are discarded.
    """
    from scipy.spatial import Delaunay

    if mesh_size < 16:
        raise ValueError("mesh_size must be at least 16")
    seg = np.asarray(seg)
    if not (seg >= FIRST_FOOD_LABEL).any():
        raise NoFoodPixels("segmentation has no food labels")
    area = int(np.count_nonzero(seg > 0))
    pitch = math.sqrt(area / mesh_size)
    H, W = seg.shape
    us = np.arange(pitch / 2.0, W, pitch)
    vs = np.arange(pitch / 2.0, H, pitch)
    uu, vv = np.meshgrid(us, vs)
    ui = np.round(uu.ravel()).astype(int)
    vi = np.round(vv.ravel()).astype(int)
    inb = (ui < W) & (vi < H)
    ui, vi = ui[inb], vi[inb]
    flat = np.unique(vi.astype(np.int64) * W + ui)  # sub-pixel pitch dedup
    ui = (flat % W).astype(int)
    vi = (flat // W).astype(int)
    labels = seg[vi, ui]
    ok = (labels > 0) & depth.valid[vi, ui]
    ui, vi, labels = ui[ok], vi[ok], labels[ok]

    z = depth.values[vi, ui]
    x = (ui - K.cx) / K.fx * z
    y = (vi - K.cy) / K.fy * z
    vertices = np.stack([x, y, z], axis=1)
    vertex_px = np.stack([ui, vi], axis=1).astype(float)

    if len(vertices) < 3:
        return LabeledMesh(vertices=vertices, vertex_px=vertex_px,
                           vertex_label=labels.astype(int),
                           triangles=np.empty((0, 3), dtype=int),
                           tri_label=np.empty(0, dtype=int))
    try:
        tri = Delaunay(vertex_px)
        simplices = tri.simplices
    except Exception:
        # collinear or otherwise degenerate sample set: no surface
        simplices = np.empty((0, 3), dtype=int)
    l0 = labels[simplices[:, 0]]
    same = (l0 == labels[simplices[:, 1]]) & (l0 == labels[simplices[:, 2]])
    return LabeledMesh(vertices=vertices, vertex_px=vertex_px,
                       vertex_label=labels.astype(int),
                       triangles=simplices[same],
                       tri_label=l0[same].astype(int))


def _fit_plane_ransac(points: np.ndarray, cfg: RansacConfig, seed: int,
                      threshold_mm: float | None = None):
    """Robust plane fit.

    With ``threshold_mm`` set, the inlier threshold is fixed in metric
    units (used for the rim and table, whose residual scale is known from
    the reconstruction). Otherwise the adaptive threshold runs against a
    bounding-box noise distribution, with the fixed fallback for noise
    geometries where the box degenerates onto the plane.
    """
    if threshold_mm is not None:
        fixed = RansacConfig(
            max_iterations=cfg.max_iterations, confidence=cfg.confidence,
            lo_sample_size=cfg.lo_sample_size,
            fixed_threshold=threshold_mm)
        fit = ransac(
            n_data=len(points),
            solve_fn=lambda idx: plane_solver(points[idx]),
            distance_fn=lambda m: plane_distances(m, points),
            noise_fn=None,
            sample_size=3,
            config=fixed,
            rng_seed=seed,
        )
        return fit.model, fit
    noise_pts = bounding_box_noise(points, cfg.noise_samples, seed + 1)
    try:
        fit = ransac(
            n_data=len(points),
            solve_fn=lambda idx: plane_solver(points[idx]),
            distance_fn=lambda m: plane_distances(m, points),
            noise_fn=lambda m: np.sort(plane_distances(m, noise_pts)),
            sample_size=3,
            config=cfg,
            rng_seed=seed,
        )
    except NoModelFound:
        return _fit_plane_ransac(points, cfg, seed,
                                 threshold_mm=PLANE_FALLBACK_THRESHOLD_MM)
    return fit.model, fit


def dish_plane(border_cloud: np.ndarray, card_points: np.ndarray,
               dish_bottom_height: float,
               cfg: RansacConfig | None = None, seed: int = 0) -> Plane:
    """Reference plane for the volume integration.

    Fits the dish-rim plane and the table plane (from the card points),
    takes the modal signed rim-to-table distance, and shifts the rim
    plane along its normal so it sits ``dish_bottom_height`` millimeters
    above the table.
    """
    cfg = cfg or RansacConfig(max_iterations=500)
    border_cloud = np.asarray(border_cloud, dtype=float)
    card_points = np.asarray(card_points, dtype=float)
    if len(border_cloud) < MIN_RIM_POINTS:
        raise RimPlaneFailed(f"{len(border_cloud)} rim points "
                             f"< {MIN_RIM_POINTS}")
    if len(card_points) < MIN_TABLE_POINTS:
        raise TablePlaneFailed(f"{len(card_points)} card points "
                               f"< {MIN_TABLE_POINTS}")
    try:
        rim, rim_fit = _fit_plane_ransac(
            border_cloud, cfg, seed,
            threshold_mm=PLANE_FALLBACK_THRESHOLD_MM)
    except NoModelFound as exc:
        raise RimPlaneFailed(f"rim plane fit failed: {exc}") from exc
    try:
        table, table_fit = _fit_plane_ransac(
            card_points, cfg, seed + 7,
            threshold_mm=PLANE_FALLBACK_THRESHOLD_MM)
    except NoModelFound as exc:
        raise TablePlaneFailed(f"table plane fit failed: {exc}") from exc

    table_inliers = card_points[table_fit.inliers]
    signed = rim.signed_distance(table_inliers)
    try:
        h_mode, _ = histogram_mode(signed, rel_bin_width=0.02, min_count=3)
    except DegenerateScale:
        h_mode = float(np.median(signed))
    return Plane(rim.normal.copy(), rim.offset + h_mode + dish_bottom_height)


def integrate_volume(mesh: LabeledMesh, plane: Plane,
                     diagnostics: dict | None = None) -> VolumeReport:
    """Per-item volume: projected triangle area times mean corner height.

    Corner heights below the plane clamp to zero; items are the labels
    from FIRST_FOOD_LABEL upward. An empty mesh gives zero milliliters.
    """
    items: dict = {}
    food = mesh.tri_label >= FIRST_FOOD_LABEL
    for label in np.unique(mesh.tri_label[food]) if len(mesh.tri_label) else []:
        tris = mesh.triangles[mesh.tri_label == label]
        if len(tris) == 0:
            items[int(label)] = 0.0
            continue
        corners = mesh.vertices[tris]          # (M, 3, 3)
        heights = np.maximum(
            corners @ plane.normal - plane.offset, 0.0)  # (M, 3)
        proj = corners - (corners @ plane.normal
                          - plane.offset)[..., None] * plane.normal
        a = proj[:, 1] - proj[:, 0]
        b = proj[:, 2] - proj[:, 0]
        area = 0.5 * np.linalg.norm(np.cross(a, b), axis=1)
        vol_mm3 = float(np.sum(area * heights.mean(axis=1)))
        items[int(label)] = vol_mm3 / 1000.0
    for label in np.unique(mesh.vertex_label):
        if label >= FIRST_FOOD_LABEL and int(label) not in items:
            items[int(label)] = 0.0
    return VolumeReport(items=items, dish_plane=plane,
                        diagnostics=diagnostics or {})


def rim_band_pixels(seg: np.ndarray, band_px: int = 3) -> np.ndarray:
    """Dish-side pixels within ``band_px`` of the dish/background border."""
    from scipy.ndimage import binary_dilation

    seg = np.asarray(seg)
    background = seg == BACKGROUND
    near_bg = binary_dilation(background, iterations=band_px)
    return near_bg & (seg == DISH_LABEL)
