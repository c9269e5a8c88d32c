"""End-to-end driver: two images plus a segmentation to a volume report."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import calibration, stereo, volume
from .calibration import ReferenceCard
from .config import PipelineConfig
from .errors import (
    CardNotFound,
    DishvolError,
    InsufficientParallax,
    NoModelFound,
    PipelineError,
    TooFewFeatures,
)
from .geometry import CameraIntrinsics
from .image import ImageGray, as_gray_array, load_indexed_png
from .volume import VolumeReport

_HINTS = {
    InsufficientParallax:
        "increase the relative angle between the views toward 15-25 degrees",
    TooFewFeatures:
        "the scene lacks texture; check focus, exposure, and surface detail",
    NoModelFound:
        "matches carry no epipolar structure; retake the pair with more "
        "overlap",
    CardNotFound:
        "make sure the reference card is fully visible in both images",
}


def _hint_for(exc: Exception) -> str:
    for cls, hint in _HINTS.items():
        if isinstance(exc, cls):
            return hint
    return ""


@dataclass
class PipelineArtifacts:
    """Intermediate products kept for debugging and reports."""

    disparity: object = None
    rect_pair: object = None
    depth: object = None
    mesh: object = None
    seg_scaled: np.ndarray = None
    calibration: object = None


def _resize_image(arr: np.ndarray, size, resample) -> np.ndarray:
    im = Image.fromarray(arr)
    return np.asarray(im.resize(size, resample=resample))


def _scaled_intrinsics(K: CameraIntrinsics, new_w: int,
                       new_h: int) -> CameraIntrinsics:
    sx = new_w / K.width
    sy = new_h / K.height
    return CameraIntrinsics(
        fx=K.fx * sx, fy=K.fy * sy,
        cx=(K.cx + 0.5) * sx - 0.5, cy=(K.cy + 0.5) * sy - 0.5,
        width=new_w, height=new_h)


def _scale_points(uv: np.ndarray, K: CameraIntrinsics, new_w: int,
                  new_h: int) -> np.ndarray:
    sx = new_w / K.width
    sy = new_h / K.height
    out = np.empty_like(uv, dtype=float)
    out[:, 0] = (uv[:, 0] + 0.5) * sx - 0.5
    out[:, 1] = (uv[:, 1] + 0.5) * sy - 0.5
    return out


def _rect_roi_from_seg(pair, seg: np.ndarray, band_px: int) -> np.ndarray:
    """Dish mask (dilated to include the rim border band) in rect space."""
    from scipy.ndimage import binary_dilation

    target = binary_dilation(seg > 0, iterations=band_px)
    H, W = pair.rect1.shape
    roi = np.zeros((H, W), dtype=bool)
    cols = np.arange(W, dtype=float)
    h_seg, w_seg = seg.shape
    for row in range(H):
        uv = pair.rect_to_original(np.full(W, row), cols, image=1)
        ui = np.round(uv[:, 0]).astype(int)
        vi = np.round(uv[:, 1]).astype(int)
        ok = (ui >= 0) & (ui < w_seg) & (vi >= 0) & (vi < h_seg)
        sel = np.zeros(W, dtype=bool)
        sel[ok] = target[vi[ok], ui[ok]]
        roi[row] = sel & pair.valid1[row]
    return roi


def run_pipeline_arrays(img1, img2, seg: np.ndarray, K1: CameraIntrinsics,
                        K2: CameraIntrinsics, card: ReferenceCard,
                        config: PipelineConfig | None = None,
                        seed: int | None = None):
    """Run calibration, dense matching, and volume extraction.

    Returns (VolumeReport, PipelineArtifacts). Raises PipelineError with
    the failing stage's name and a remediation hint.
    """
    cfg = config or PipelineConfig()
    seed = cfg.seed if seed is None else seed
    seeds = np.random.SeedSequence(seed).spawn(3)
    seed_cal, seed_plane, _ = [int(s.generate_state(1)[0]) for s in seeds]
    timings = {}
    art = PipelineArtifacts()

    g1 = as_gray_array(img1)
    g2 = as_gray_array(img2)
    seg = np.asarray(seg)
    if seg.shape != g1.shape:
        raise PipelineError("inputs", ValueError(
            f"segmentation {seg.shape} does not match image 1 {g1.shape}"))

    t0 = time.perf_counter()
    try:
        cal = calibration.calibrate(
            g1, g2, K1, K2, card, cfg.ransac, cfg.features, seed=seed_cal,
            distinctiveness=cfg.distinctiveness_ratio)
    except DishvolError as exc:
        raise PipelineError("calibration", exc, _hint_for(exc)) from exc
    timings["calibration"] = time.perf_counter() - t0
    art.calibration = cal

    # rescale so the dish mask area hits the configured pixel budget
    t0 = time.perf_counter()
    dish_area = int(np.count_nonzero(seg > 0))
    if dish_area == 0:
        raise PipelineError("inputs", ValueError(
            "segmentation has no dish pixels"))
    factor = float(np.sqrt(cfg.dish_area_px / dish_area))
    new_w = max(64, int(round(g1.shape[1] * factor)))
    new_h = max(64, int(round(g1.shape[0] * factor)))
    g1s = _resize_image(g1, (new_w, new_h), Image.BILINEAR)
    g2s = _resize_image(g2, (new_w, new_h), Image.BILINEAR)
    seg_s = _resize_image(seg.astype(np.uint8), (new_w, new_h),
                          Image.NEAREST)
    K1s = _scaled_intrinsics(K1, new_w, new_h)
    K2s = _scaled_intrinsics(K2, new_w, new_h)
    uv1_s = _scale_points(cal.uv1, K1, new_w, new_h)
    uv2_s = _scale_points(cal.uv2, K2, new_w, new_h)
    art.seg_scaled = seg_s
    timings["rescale"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        anchor = float(np.median(cal.cloud.points[:, 2]))
        pair = stereo.rectify(g1s, g2s, cal.pose, K1s, K2s,
                              anchor_depth=anchor)
        pair = stereo.order_check_and_mirror(pair, uv1_s, uv2_s)
        rows, col1, col2 = stereo.rectify_matches(pair, uv1_s, uv2_s)
        drange = stereo.disparity_range(col2 - col1, cfg.margin_px)
        roi = _rect_roi_from_seg(pair, seg_s, band_px=3)
        disp = stereo.dp_stereo(pair, drange, roi, cfg.stereo)
        disp = stereo.median_refine(disp, cfg.stereo.median_kernel)
    except DishvolError as exc:
        raise PipelineError("stereo", exc, _hint_for(exc)) from exc
    timings["stereo"] = time.perf_counter() - t0
    art.rect_pair = pair
    art.disparity = disp

    t0 = time.perf_counter()
    try:
        cloud, depth = volume.dense_cloud(disp, pair, cal.pose, K1s, K2s)
        depth = volume.fill_depth_holes(depth, seg_s)
        mesh = volume.sample_mesh(depth, seg_s, cfg.mesh_size, K1s)
        rim_mask = volume.rim_band_pixels(seg_s, band_px=3) & depth.valid
        vr, ur = np.nonzero(rim_mask)
        z = depth.values[vr, ur]
        rim_points = np.stack([(ur - K1s.cx) / K1s.fx * z,
                               (vr - K1s.cy) / K1s.fy * z, z], axis=1)
        plane = volume.dish_plane(rim_points, cal.card_points,
                                  cfg.dish_bottom_height_mm,
                                  cfg.ransac, seed=seed_plane)
        diagnostics = dict(cal.diagnostics)
        diagnostics.update({
            "disparity_range": list(drange),
            "rect_shape": list(pair.rect1.shape),
            "mirrored": bool(pair.mirrored),
            "n_valid_disparities": int(disp.valid.sum()),
            "n_mesh_vertices": int(len(mesh)),
            "n_rim_points": int(len(rim_points)),
        })
        report = volume.integrate_volume(mesh, plane, diagnostics)
    except DishvolError as exc:
        raise PipelineError("volume", exc, _hint_for(exc)) from exc
    timings["volume"] = time.perf_counter() - t0
    art.depth = depth
    art.mesh = mesh

    report.diagnostics["timings_s"] = {k: round(v, 3)
                                       for k, v in timings.items()}
    return report, art


@dataclass
class PairInputs:
    img1: ImageGray
    img2: ImageGray
    seg: np.ndarray
    K1: CameraIntrinsics
    K2: CameraIntrinsics
    card: ReferenceCard


def load_pair_dir(pair_dir, card_config=None) -> PairInputs:
    """Load the on-disk layout produced by the synth subcommand.

    Expects img1.png, img2.png, seg1.png, intrinsics.json, and a card
    pattern (card_pattern.png next to the images, or the path configured
    under reference_card.pattern_path).
    """
    d = Path(pair_dir)
    for name in ("img1.png", "img2.png", "seg1.png", "intrinsics.json"):
        if not (d / name).exists():
            raise FileNotFoundError(f"{d / name} is missing")
    img1 = ImageGray.load(d / "img1.png")
    img2 = ImageGray.load(d / "img2.png")
    seg = load_indexed_png(d / "seg1.png")
    K = CameraIntrinsics.from_json(d / "intrinsics.json")
    pattern_path = d / "card_pattern.png"
    width_mm = 85.6
    if card_config is not None:
        if card_config.pattern_path:
            pattern_path = Path(card_config.pattern_path)
        width_mm = card_config.physical_width_mm
    if not pattern_path.exists():
        raise FileNotFoundError(f"card pattern {pattern_path} is missing")
    card = ReferenceCard(pattern=ImageGray.load(pattern_path),
                         physical_width=width_mm)
    return PairInputs(img1=img1, img2=img2, seg=seg, K1=K, K2=K, card=card)


def run_pipeline(pair_dir, config: PipelineConfig | None = None,
                 seed: int | None = None):
    """Convenience wrapper: load a pair directory and run the pipeline."""
    cfg = config or PipelineConfig()
    inputs = load_pair_dir(pair_dir, cfg.reference_card)
    return run_pipeline_arrays(inputs.img1, inputs.img2, inputs.seg,
                               inputs.K1, inputs.K2, inputs.card,
                               cfg, seed=seed)


def report_to_json(report: VolumeReport) -> str:
    """Canonical, timing-free JSON serialization of a volume report."""
    return json.dumps(report.to_json_dict(), indent=2, sort_keys=True)
