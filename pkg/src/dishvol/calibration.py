"""Stage 1: from two images to a metrically scaled relative pose.

Composes salient point matching, robust essential-matrix fitting with the
adaptive threshold, chirality-resolved decomposition, LM refinement, and
triangulation of the inliers; then recovers the metric scale from the
reference card through pattern tracks and the mode of the card/cloud
distance ratios.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CardNotFound, DegenerateScale, InsufficientParallax
from .features import FeatureConfig, MatchSet, detect_and_describe, match_symmetric
from .geometry import CameraIntrinsics, RelativePose, epipolar_distances, triangulate_points
from .robust import (
    RansacConfig,
    decompose_essential,
    five_point_solver,
    homography_solver,
    homography_transfer_distances,
    lm_refine,
    ransac,
)

MIN_TRACKS = 8
MIN_HOMOGRAPHY_INLIERS = 8
CARD_INLIER_FRACTION = 0.03  # of the card length, per the scale procedure


@dataclass
class ReferenceCard:
    """Printed fiducial of known physical width lying on the table."""

    pattern: object              # ImageGray
    physical_width: float = 85.6  # mm, credit-card sized

    @property
    def mm_per_pattern_px(self) -> float:
        return self.physical_width / self.pattern.width


@dataclass
class ScaleEstimate:
    scale: float                 # mm per model unit
    ratio_samples: np.ndarray
    mode_bin: tuple              # (lo, hi) of the winning histogram bin
    n_tracks: int


@dataclass
class SparseCloud:
    points: np.ndarray          # (N, 3), camera-1 frame
    source_match: np.ndarray    # index into the inlier MatchSet per point


@dataclass
class CalibrationResult:
    pose: RelativePose
    inliers: MatchSet
    uv1: np.ndarray             # pixel coords of the inlier matches
    uv2: np.ndarray
    cloud: SparseCloud          # scaled to mm
    scale_estimate: ScaleEstimate
    card_points: np.ndarray     # (M, 3) mm, cloud points on the card
    diagnostics: dict = field(default_factory=dict)


def histogram_mode(values, rel_bin_width: float = 0.02, min_count: int = 3):
    """Mode of a sample as the mean of the densest histogram bin.

    Bin width is ``rel_bin_width`` times the median of the values.
    Returns (mode, (bin_lo, bin_hi)); raises DegenerateScale when no bin
    collects ``min_count`` samples.
    """
    vals = np.sort(np.asarray(values, dtype=float))
    if len(vals) == 0:
        raise DegenerateScale("no samples")
    width = rel_bin_width * abs(float(np.median(vals)))
    if width <= 0:
        width = max(1e-12, rel_bin_width * (vals[-1] - vals[0] + 1e-12))
    lo = vals[0]
    n_bins = max(1, int(np.floor((vals[-1] - lo) / width)) + 1)
    idx = np.minimum(((vals - lo) / width).astype(int), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    best = int(np.argmax(counts))
    if counts[best] < min_count:
        raise DegenerateScale(
            f"densest bin holds {counts[best]} < {min_count} samples")
    members = vals[idx == best]
    return float(members.mean()), (float(lo + best * width),
                                   float(lo + (best + 1) * width))


def _spawn_seeds(seed: int, n: int) -> list:
    ss = np.random.SeedSequence(seed)
    return [int(child.generate_state(1)[0]) for child in ss.spawn(n)]


def _fit_essential(x1n: np.ndarray, x2n: np.ndarray, all1n: np.ndarray,
                   all2n: np.ndarray, cfg: RansacConfig, seed: int):
    noise_seed, ransac_seed = _spawn_seeds(seed, 2)
    rng = np.random.default_rng(noise_seed)
    ia = rng.integers(0, len(all1n), cfg.noise_samples)
    ib = rng.integers(0, len(all2n), cfg.noise_samples)
    na = all1n[ia]
    nb = all2n[ib]

    return ransac(
        n_data=len(x1n),
        solve_fn=lambda idx: five_point_solver(x1n[idx], x2n[idx]),
        distance_fn=lambda m: epipolar_distances(m.E, x1n, x2n),
        noise_fn=lambda m: np.sort(epipolar_distances(m.E, na, nb)),
        sample_size=5,
        config=cfg,
        rng_seed=ransac_seed,
    )


def _pose_from_features(kp1, desc1, kp2, desc2, K1, K2, cfg, seed,
                        distinctiveness=1.1):
    from .errors import NoModelFound

    uv1_all = np.array([[p.x, p.y] for p in kp1])
    uv2_all = np.array([[p.x, p.y] for p in kp2])
    matches = match_symmetric(desc1, desc2, distinctiveness)
    x1n = K1.normalize(uv1_all[matches.idx1])
    x2n = K2.normalize(uv2_all[matches.idx2])
    all1n = K1.normalize(uv1_all)
    all2n = K2.normalize(uv2_all)

    try:
        fit = _fit_essential(x1n, x2n, all1n, all2n, cfg, seed)
    except NoModelFound:
        # zero-parallax inputs degenerate every five-point sample
        if len(matches) and np.median(
                np.linalg.norm(x1n - x2n, axis=1)) < 1e-4:
            raise InsufficientParallax("images are nearly identical")
        raise
    inliers = matches.take(fit.inliers)
    xi1 = x1n[fit.inliers]
    xi2 = x2n[fit.inliers]

    flow = np.linalg.norm(xi1 - xi2, axis=1)
    if np.median(flow) < 1e-4:
        raise InsufficientParallax("images are nearly identical")

    pose0 = decompose_essential(fit.model, xi1, xi2)
    refined = lm_refine(pose0, xi1, xi2)
    pose = refined.pose

    uv1 = uv1_all[inliers.idx1]
    uv2 = uv2_all[inliers.idx2]
    pts, valid, angles, depths = triangulate_points(uv1, uv2, K1, K2, pose)
    if np.median(angles[valid]) < np.deg2rad(0.5) if valid.any() else True:
        raise InsufficientParallax(
            "median triangulation angle below 0.5 degrees")
    keep = valid & (depths[:, 0] > 0) & (depths[:, 1] > 0)
    cloud = SparseCloud(points=pts[keep], source_match=np.flatnonzero(keep))
    diagnostics = {
        "n_matches": len(matches),
        "n_inliers": len(inliers),
        "inlier_threshold": fit.threshold,
        "ransac_iterations": fit.iterations_run,
        "lm_initial_cost": refined.initial_cost,
        "lm_final_cost": refined.final_cost,
        "median_triangulation_angle_deg":
            float(np.rad2deg(np.median(angles[valid]))),
    }
    return pose, inliers, uv1, uv2, cloud, diagnostics


def estimate_relative_pose(img1, img2, K1: CameraIntrinsics,
                           K2: CameraIntrinsics,
                           cfg: RansacConfig | None = None,
                           feature_cfg: FeatureConfig | None = None,
                           seed: int = 0, distinctiveness: float = 1.1):
    """Unscaled relative pose, inlier matches, and sparse cloud.

    Raises TooFewFeatures / NoModelFound / InsufficientParallax like the
    underlying stages.
    """
    cfg = cfg or RansacConfig()
    kp1, desc1 = detect_and_describe(img1, feature_cfg)
    kp2, desc2 = detect_and_describe(img2, feature_cfg)
    pose, inliers, _, _, cloud, _ = _pose_from_features(
        kp1, desc1, kp2, desc2, K1, K2, cfg, seed, distinctiveness)
    return pose, inliers, cloud


def _scale_from_features(kp1, desc1, kp2, desc2, inliers: MatchSet,
                         cloud: SparseCloud, card: ReferenceCard,
                         cfg: RansacConfig, seed: int,
                         feature_cfg=None, distinctiveness=1.1):
    card_kp, card_desc = detect_and_describe(card.pattern, feature_cfg)
    card_xy = np.array([[p.x, p.y] for p in card_kp])
    uv1_all = np.array([[p.x, p.y] for p in kp1])

    m1 = match_symmetric(card_desc, desc1, distinctiveness)
    m2 = match_symmetric(card_desc, desc2, distinctiveness)
    img1_to_card = {int(i1): int(c) for c, i1 in zip(m1.idx1, m1.idx2)}
    img2_to_card = {int(i2): int(c) for c, i2 in zip(m2.idx1, m2.idx2)}

    # tracks: an inlier pair whose two image points match the same card point
    cloud_row = {int(src): r for r, src in enumerate(cloud.source_match)}
    tracks = []
    for k in range(len(inliers)):
        c1 = img1_to_card.get(int(inliers.idx1[k]))
        c2 = img2_to_card.get(int(inliers.idx2[k]))
        if c1 is None or c1 != c2 or k not in cloud_row:
            continue
        tracks.append((c1, k, cloud_row[k]))
    if len(tracks) < MIN_TRACKS:
        raise CardNotFound(f"only {len(tracks)} card tracks formed")

    # homography image-1 -> card pattern, fixed threshold in pattern units
    src = uv1_all[m1.idx2]
    dst = card_xy[m1.idx1]
    if len(src) < 4:
        raise CardNotFound("not enough card matches for a homography")
    h_cfg = RansacConfig(
        max_iterations=min(cfg.max_iterations, 2000),
        confidence=cfg.confidence,
        fixed_threshold=CARD_INLIER_FRACTION * card.pattern.width,
        lo_sample_size=min(cfg.lo_sample_size, max(4, len(src) // 2)),
    )
    try:
        h_fit = ransac(
            n_data=len(src),
            solve_fn=lambda idx: homography_solver(src[idx], dst[idx]),
            distance_fn=lambda H: homography_transfer_distances(H, src, dst),
            noise_fn=None,
            sample_size=4,
            config=h_cfg,
            rng_seed=seed,
        )
    except Exception as exc:
        raise CardNotFound(f"card homography failed: {exc}") from exc
    if len(h_fit.inliers) < MIN_HOMOGRAPHY_INLIERS:
        raise CardNotFound(
            f"card homography has {len(h_fit.inliers)} < "
            f"{MIN_HOMOGRAPHY_INLIERS} inliers")

    inlier_img1 = set(int(i) for i in m1.idx2[h_fit.inliers])
    tracks = [t for t in tracks
              if int(inliers.idx1[t[1]]) in inlier_img1]
    if len(tracks) < MIN_TRACKS:
        raise CardNotFound(
            f"only {len(tracks)} card tracks survive the homography")

    mm = card.mm_per_pattern_px
    card_pts = card_xy[[t[0] for t in tracks]] * mm
    cloud_pts = cloud.points[[t[2] for t in tracks]]
    ratios = []
    for a in range(len(tracks)):
        for b in range(a + 1, len(tracks)):
            d_card = np.linalg.norm(card_pts[a] - card_pts[b])
            d_cloud = np.linalg.norm(cloud_pts[a] - cloud_pts[b])
            if d_card < 1e-9 or d_cloud < 1e-12:
                continue
            ratios.append(d_card / d_cloud)
    if len(ratios) < 3:
        raise DegenerateScale("not enough track pairs for a ratio mode")
    mode, mode_bin = histogram_mode(ratios)
    estimate = ScaleEstimate(scale=mode, ratio_samples=np.asarray(ratios),
                             mode_bin=mode_bin, n_tracks=len(tracks))
    return estimate, cloud_pts


def estimate_scale(img1, img2, inliers: MatchSet, cloud: SparseCloud,
                   card: ReferenceCard, cfg: RansacConfig | None = None,
                   seed: int = 0) -> ScaleEstimate:
    """Metric scale from the reference card (mode of distance ratios)."""
    cfg = cfg or RansacConfig()
    kp1, desc1 = detect_and_describe(img1)
    kp2, desc2 = detect_and_describe(img2)
    estimate, _ = _scale_from_features(kp1, desc1, kp2, desc2, inliers,
                                       cloud, card, cfg, seed)
    return estimate


def calibrate(img1, img2, K1: CameraIntrinsics, K2: CameraIntrinsics,
              card: ReferenceCard, cfg: RansacConfig | None = None,
              feature_cfg: FeatureConfig | None = None, seed: int = 0,
              distinctiveness: float = 1.1) -> CalibrationResult:
    """Full stage-1 run: scaled pose, metric sparse cloud, card points."""
    cfg = cfg or RansacConfig()
    pose_seed, scale_seed = _spawn_seeds(seed, 2)
    kp1, desc1 = detect_and_describe(img1, feature_cfg)
    kp2, desc2 = detect_and_describe(img2, feature_cfg)
    pose, inliers, uv1, uv2, cloud, diag = _pose_from_features(
        kp1, desc1, kp2, desc2, K1, K2, cfg, pose_seed, distinctiveness)
    estimate, card_cloud_pts = _scale_from_features(
        kp1, desc1, kp2, desc2, inliers, cloud, card, cfg, scale_seed,
        feature_cfg, distinctiveness)

    scaled_pose = pose.with_scale(estimate.scale)
    scaled_cloud = SparseCloud(points=cloud.points * estimate.scale,
                               source_match=cloud.source_match)
    diag.update({
        "scale_mm_per_unit": estimate.scale,
        "n_card_tracks": estimate.n_tracks,
    })
    return CalibrationResult(
        pose=scaled_pose, inliers=inliers, uv1=uv1, uv2=uv2,
        cloud=scaled_cloud, scale_estimate=estimate,
        card_points=card_cloud_pts * estimate.scale, diagnostics=diag)
