"""Stage 2: dense matching between the two views.

Rectification uses polar resampling around the epipoles, which works for
any camera configuration including epipoles inside the image: each
rectified row is one epipolar line, with angular and radial steps chosen
so no pixel is compressed, and per-row column alignment that keeps scene
disparities small. Matching runs hierarchical per-row dynamic
programming on Census costs, with a smoothness penalty inversely related
to the local variance and skip moves for occlusions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates, uniform_filter

from .errors import (
    EmptyRange,
    EmptyRoi,
    RectificationFailed,
    TooFewMatches,
)
from .geometry import CameraIntrinsics, RelativePose
from .image import as_gray_array

_FAR_EPIPOLE = 1e7  # px; stand-in distance for epipoles at infinity


@dataclass
class StereoConfig:
    census_window: int = 7
    aggregation_window: int = 5
    median_kernel: int = 5
    margin_px: int = 48
    # skip/step penalty per pixel of aggregated cost, in per-pixel Hamming
    # bits (scaled by the aggregation area internally); sigma0 controls the
    # variance-driven reduction in textured areas
    lambda0: float = 8.0
    sigma0: float = 40.0          # intensity levels
    band_halfwidth: int = 8       # per-pixel search band around coarse result
    min_pyramid_dim: int = 64


@dataclass
class RectifiedPair:
    """Polar-rectified image pair plus both coordinate maps.

    Row k samples epipolar line k in both images; column c corresponds to
    radius ``origin + c * step`` from the epipole, with per-row steps and
    origins chosen so that the anchor-plane correspondence sits near
    disparity zero and neither image is compressed radially.
    """

    rect1: np.ndarray
    rect2: np.ndarray
    valid1: np.ndarray
    valid2: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    theta1: np.ndarray            # (rows,) angle of each row in image 1
    dir1: np.ndarray              # (rows, 2) unit radial direction, image 1
    dir2: np.ndarray              # (rows, 2) unit radial direction, image 2
    origin1: np.ndarray           # (rows,) radius of column 0
    origin2: np.ndarray
    step1: np.ndarray             # (rows,) radius increment per column
    step2: np.ndarray
    mirrored: bool = False

    @property
    def shape(self):
        return self.rect1.shape

    def _cols_for_image2(self, cols):
        cols = np.asarray(cols, dtype=float)
        if self.mirrored:
            return (self.rect2.shape[1] - 1) - cols
        return cols

    def _r2_of_col(self, rows, cols):
        c = self._cols_for_image2(cols)
        return self.origin2[rows] + c * self.step2[rows]

    def rect_to_original(self, rows, cols, image: int):
        """Rectified (row, col) -> original pixel coordinates (u, v)."""
        rows = np.asarray(rows, dtype=int)
        cols = np.asarray(cols, dtype=float)
        if image == 1:
            r = self.origin1[rows] + cols * self.step1[rows]
            uv = self.e1[None, :] + r[..., None] * self.dir1[rows]
        else:
            r = self._r2_of_col(rows, cols)
            uv = self.e2[None, :] + r[..., None] * self.dir2[rows]
        return uv

    def original_to_rect(self, uv, image: int):
        """Original pixels (N, 2) -> rectified (row, col) (float cols)."""
        uv = np.asarray(uv, dtype=float)
        if image == 1:
            rel = uv - self.e1
            theta = np.arctan2(rel[:, 1], rel[:, 0])
            # unwrap against the row angles' reference
            base = self.theta1[0]
            span = np.mod(theta - base, 2 * np.pi)
            row_angles = np.mod(self.theta1 - base, 2 * np.pi)
            rows = np.clip(np.searchsorted(row_angles, span), 1,
                           len(row_angles) - 1)
            rows = np.where(
                np.abs(span - row_angles[rows - 1])
                <= np.abs(span - row_angles[rows]), rows - 1, rows)
            r = np.einsum("ij,ij->i", rel, self.dir1[rows])
            cols = (r - self.origin1[rows]) / self.step1[rows]
            return rows, cols
        # image 2: rows are defined through image 1; project onto the
        # row's radial direction instead
        raise ValueError("rows of image 2 are defined by image-1 angles; "
                         "use rectify_matches for correspondences")


@dataclass
class DisparityMap:
    values: np.ndarray           # float32, rectified-column offsets
    valid: np.ndarray
    d_min: int
    d_max: int

    def to_png16(self, path) -> None:
        """Debug dump: 16-bit PNG, value = disparity * 256 + 32768."""
        from PIL import Image
        enc = np.where(self.valid,
                       np.clip(self.values * 256.0 + 32768.0, 0, 65535),
                       0).astype(np.uint16)
        Image.fromarray(enc).save(path)


def _point_rect_radius_range(e, direction, width, height):
    """Intersection of the ray e + r*direction (r > 0) with the image box."""
    lo, hi = 0.0, np.inf
    for axis, size in ((0, width), (1, height)):
        d = direction[axis]
        o = e[axis]
        if abs(d) < 1e-12:
            if not (0.0 <= o <= size - 1.0):
                return None
            continue
        t0 = (0.0 - o) / d
        t1 = (size - 1.0 - o) / d
        if t0 > t1:
            t0, t1 = t1, t0
        lo = max(lo, t0)
        hi = min(hi, t1)
    if hi <= max(lo, 0.0):
        return None
    return max(lo, 0.0), hi


def _epipole_inhomog(h, width, height):
    """Homogeneous epipole -> pixel coordinates, pushing infinity far out."""
    xy = h[:2]
    w = h[2]
    if abs(w) < 1e-9 * max(np.linalg.norm(xy), 1e-12):
        d = xy / max(np.linalg.norm(xy), 1e-12)
        center = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
        return center + d * _FAR_EPIPOLE
    return xy / w


def rectify(img1, img2, pose: RelativePose, K1: CameraIntrinsics,
            K2: CameraIntrinsics,
            anchor_depth: float | None = None) -> RectifiedPair:
    """Polar rectification: epipolar lines become equal rows.

    The angular step per row keeps the arc length at the outermost radius
    of both images at or below one pixel, and the radial step is at most
    one pixel in both images, so no pixel is compressed along the scan
    direction. Columns are aligned per row through the homography of a
    fronto-parallel anchor plane (at ``anchor_depth`` in the same units
    as ``pose.scale``; the infinite plane when omitted), which keeps
    disparities of scene content near zero.

    Raises RectificationFailed on a (near-)zero baseline.
    """
    g1 = as_gray_array(img1)
    g2 = as_gray_array(img2)
    if np.linalg.norm(pose.translation) < 1e-9:
        raise RectificationFailed("zero baseline: epipoles undefined")
    H1, W1 = g1.shape
    H2, W2 = g2.shape

    E = pose.essential_matrix().E
    K1i = np.linalg.inv(K1.K)
    F = np.linalg.inv(K2.K).T @ E @ K1i

    # epipoles: e1 spans the right null space of F, e2 the left
    _, _, Vt = np.linalg.svd(F)
    e1 = _epipole_inhomog(Vt[-1], W1, H1)
    U, _, _ = np.linalg.svd(F)
    e2 = _epipole_inhomog(U[:, -1], W2, H2)

    A = K2.K @ pose.rotation @ K1i
    b = K2.K @ pose.translation
    if anchor_depth is not None and anchor_depth > 0:
        plane_h = pose.rotation + np.outer(
            pose.translation * pose.scale / anchor_depth,
            np.array([0.0, 0.0, 1.0]))
        M_anchor = K2.K @ plane_h @ K1i
    else:
        M_anchor = A

    def dir2_of(p1_h):
        ap = A @ p1_h
        d = ap[:2] * b[2] - b[:2] * ap[2]
        n = np.linalg.norm(d)
        if n < 1e-12:
            return None
        return d / n

    def r2_at_anchor(u1, r1, u2):
        """Image-2 radius of the anchor-plane point seen at radius r1 on
        the image-1 ray."""
        p = M_anchor @ np.array([e1[0] + r1 * u1[0],
                                 e1[1] + r1 * u1[1], 1.0])
        if abs(p[2]) < 1e-12:
            return None
        q = p[:2] / p[2] - e2
        return float(q @ u2)

    # angular interval of image 1 as seen from e1
    corners = np.array([[0.0, 0], [W1 - 1.0, 0], [W1 - 1.0, H1 - 1.0],
                        [0.0, H1 - 1.0]])
    rel = corners - e1
    inside1 = (0 <= e1[0] <= W1 - 1) and (0 <= e1[1] <= H1 - 1)
    if inside1:
        th_lo, th_hi = -math.pi, math.pi
    else:
        angs = np.arctan2(rel[:, 1], rel[:, 0])
        ref = math.atan2((H1 - 1) / 2.0 - e1[1], (W1 - 1) / 2.0 - e1[0])
        rel_angs = np.angle(np.exp(1j * (angs - ref)))
        th_lo = ref + rel_angs.min()
        th_hi = ref + rel_angs.max()

    rows = []
    theta = th_lo
    guard = 0
    while theta <= th_hi and guard < 200000:
        guard += 1
        u1 = np.array([math.cos(theta), math.sin(theta)])
        rr1 = _point_rect_radius_range(e1, u1, W1, H1)
        if rr1 is None:
            theta += 1e-3
            continue
        p1 = np.array([e1[0] + u1[0] * max(rr1[0], 1.0),
                       e1[1] + u1[1] * max(rr1[0], 1.0), 1.0])
        u2 = dir2_of(p1)
        if u2 is None:
            theta += 1e-3
            continue
        rr2 = _point_rect_radius_range(e2, u2, W2, H2)
        step = 1.0 / max(rr1[1], rr2[1] if rr2 else 1.0, 1.0)
        if rr2 is not None:
            # affine infinity-anchored column alignment along the row;
            # negative magnification (inverted radial order) is legal and
            # yields a pre-mirrored second raster
            ra, rb = rr1
            fa = r2_at_anchor(u1, ra, u2)
            fb = r2_at_anchor(u1, rb, u2)
            if fa is not None and fb is not None and rb > ra + 1e-9:
                a_mag = (fb - fa) / (rb - ra)
                if abs(a_mag) > 1e-6:
                    rows.append((theta, u1, u2, rr1, rr2, a_mag,
                                 fa - a_mag * ra))
        theta += step

    if not rows:
        raise RectificationFailed("no common epipolar region")

    theta1 = np.array([r[0] for r in rows])
    dir1 = np.array([r[1] for r in rows])
    dir2 = np.array([r[2] for r in rows])
    rmin1 = np.array([r[3][0] for r in rows])
    rmax1 = np.array([r[3][1] for r in rows])
    rmin2 = np.array([r[4][0] for r in rows])
    rmax2 = np.array([r[4][1] for r in rows])
    a_mag = np.array([r[5] for r in rows])
    b_off = np.array([r[6] for r in rows])

    # per-row radial steps: corresponding steps scale by the infinite
    # homography magnification; cap the larger step at one pixel so no
    # image is compressed along the scan direction
    step1 = np.where(np.abs(a_mag) >= 1.0, 1.0 / np.abs(a_mag), 1.0)
    step2 = a_mag * step1

    # common column range: both radii inside their images
    lo2 = np.where(a_mag > 0, (rmin2 - b_off) / a_mag,
                   (rmax2 - b_off) / a_mag)
    hi2 = np.where(a_mag > 0, (rmax2 - b_off) / a_mag,
                   (rmin2 - b_off) / a_mag)
    r1_lo = np.maximum(rmin1, lo2)
    r1_hi = np.minimum(rmax1, hi2)
    origin1 = r1_lo
    origin2 = a_mag * origin1 + b_off
    col_hi = (r1_hi - r1_lo) / step1
    keep = col_hi > 2.0
    if not keep.any():
        raise RectificationFailed("no common epipolar region")
    theta1, dir1, dir2 = theta1[keep], dir1[keep], dir2[keep]
    origin1, origin2 = origin1[keep], origin2[keep]
    step1, step2 = step1[keep], step2[keep]
    col_hi = col_hi[keep]

    width = int(math.ceil(col_hi.max())) + 1
    cols = np.arange(width, dtype=float)

    def resample(g, e, dirs, origin, step):
        rr = origin[:, None] + cols[None, :] * step[:, None]
        xs = e[0] + rr * dirs[:, 0:1]
        ys = e[1] + rr * dirs[:, 1:2]
        vals = map_coordinates(g.astype(np.float32), [ys, xs], order=1,
                               mode="constant", cval=0.0)
        valid = (cols[None, :] <= col_hi[:, None] + 1e-9) \
            & (xs >= -0.5) & (ys >= -0.5) \
            & (xs <= g.shape[1] - 0.5) & (ys <= g.shape[0] - 0.5)
        return np.clip(np.round(vals), 0, 255).astype(np.uint8), valid

    rect1, valid1 = resample(g1, e1, dir1, origin1, step1)
    rect2, valid2 = resample(g2, e2, dir2, origin2, step2)

    return RectifiedPair(rect1=rect1, rect2=rect2, valid1=valid1,
                         valid2=valid2, e1=np.asarray(e1), e2=np.asarray(e2),
                         theta1=theta1, dir1=dir1, dir2=dir2,
                         origin1=origin1, origin2=origin2,
                         step1=step1, step2=step2)


def rectify_matches(pair: RectifiedPair, uv1: np.ndarray, uv2: np.ndarray):
    """Sparse pixel matches -> (rows, col1, col2) in rectified space.

    The row comes from the image-1 angle; both radii are projections on
    that row's radial directions.
    """
    rows, col1 = pair.original_to_rect(np.asarray(uv1, dtype=float), image=1)
    rel2 = np.asarray(uv2, dtype=float) - pair.e2
    r2 = np.einsum("ij,ij->i", rel2, pair.dir2[rows])
    col2 = (r2 - pair.origin2[rows]) / pair.step2[rows]
    if pair.mirrored:
        col2 = (pair.rect2.shape[1] - 1) - col2
    return rows, col1, col2


def order_check_and_mirror(pair: RectifiedPair, uv1: np.ndarray,
                           uv2: np.ndarray) -> RectifiedPair:
    """Mirror the second rectified image iff a strict majority of match
    pairs have inverted radial order between the views."""
    if len(uv1) < 2:
        raise TooFewMatches("need at least two matches for the order check")
    rows, col1, col2 = rectify_matches(pair, uv1, uv2)
    inverted = consistent = 0
    n = len(col1)
    for i in range(n):
        d1 = col1[i] - col1[i + 1:]
        d2 = col2[i] - col2[i + 1:]
        prod = d1 * d2
        inverted += int(np.count_nonzero(prod < 0))
        consistent += int(np.count_nonzero(prod > 0))
    if inverted > (inverted + consistent) / 2.0 and inverted > consistent:
        return RectifiedPair(
            rect1=pair.rect1, rect2=pair.rect2[:, ::-1].copy(),
            valid1=pair.valid1, valid2=pair.valid2[:, ::-1].copy(),
            e1=pair.e1, e2=pair.e2, theta1=pair.theta1, dir1=pair.dir1,
            dir2=pair.dir2, origin1=pair.origin1, origin2=pair.origin2,
            step1=pair.step1, step2=pair.step2,
            mirrored=not pair.mirrored)
    return pair


def disparity_range(disparities, margin: int = 8):
    """Robust range: central 90% of the sparse disparities, widened.

    Drops the lowest and highest 5% by rank and extends both ends by
    ``margin`` pixels.
    """
    d = np.sort(np.asarray(disparities, dtype=float))
    if len(d) < 10:
        raise TooFewMatches(f"{len(d)} sparse disparities < 10")
    k = int(math.floor(0.05 * len(d)))
    core = d[k:len(d) - k] if k > 0 else d
    return (int(math.floor(core[0] - margin)),
            int(math.ceil(core[-1] + margin)))


def census_transform(img, window: int = 7):
    """Per-pixel local binary pattern over an odd window.

    Bit k (counting from the most significant used bit) is set iff the
    k-th neighbor in row-major order exceeds the center pixel. Returns
    (codes uint64, valid mask); border pixels are invalid.
    """
    g = as_gray_array(img)
    if window % 2 == 0 or window < 3:
        raise ValueError("window must be odd and >= 3")
    h = window // 2
    n_bits = window * window - 1
    if n_bits > 64:
        raise ValueError("window too large for 64-bit codes")
    H, W = g.shape
    codes = np.zeros((H, W), dtype=np.uint64)
    center = g
    bit = n_bits - 1
    for dy in range(-h, h + 1):
        for dx in range(-h, h + 1):
            if dy == 0 and dx == 0:
                continue
            shifted = np.zeros_like(g)
            ys0, ys1 = max(0, dy), min(H, H + dy)
            xs0, xs1 = max(0, dx), min(W, W + dx)
            shifted[ys0 - dy:ys1 - dy, xs0 - dx:xs1 - dx] = g[ys0:ys1, xs0:xs1]
            codes |= (shifted > center).astype(np.uint64) << np.uint64(bit)
            bit -= 1
    valid = np.zeros((H, W), dtype=bool)
    if H > 2 * h and W > 2 * h:
        valid[h:H - h, h:W - h] = True
    return codes, valid


def _box_mean(a: np.ndarray, size: int) -> np.ndarray:
    return uniform_filter(a.astype(np.float32), size=size, mode="nearest")


def _local_variance(img: np.ndarray, size: int) -> np.ndarray:
    f = img.astype(np.float32)
    m = _box_mean(f, size)
    m2 = _box_mean(f * f, size)
    return np.maximum(m2 - m * m, 0.0)


_INF = np.float32(1e18)


def dp_rows(cost: np.ndarray, lam: np.ndarray, d_lo: int):
    """Row-wise path optimization over a banded cost volume.

    Args:
        cost: (rows, cols, D) matching cost; infeasible cells hold +inf.
        lam: (rows, cols) per-pixel skip/step penalty.
        d_lo: disparity of band index 0.

    A path over each row either matches pixel x at disparity d (cost
    ``cost[y, x, d]``), skips the left pixel, or skips a right pixel;
    both skips cost ``lam[y, x]`` and a disparity change of k steps
    forces k skips. Returns (disparity (rows, cols) int32, valid mask,
    total cost per row).
    """
    R, W, D = cost.shape
    M_prev = np.zeros((R, D), dtype=np.float32)
    choice = np.empty((W, R, D), dtype=np.uint8)  # 0 match, 1 skip-L, 2 skip-R
    for x in range(W):
        lam_x = lam[:, x][:, None]
        via_match = M_prev + cost[:, x, :]
        via_skip_l = np.empty_like(M_prev)
        via_skip_l[:, :D - 1] = M_prev[:, 1:] + lam_x
        via_skip_l[:, D - 1] = _INF
        base = np.minimum(via_match, via_skip_l)
        pick = np.where(via_match <= via_skip_l, np.uint8(0), np.uint8(1))
        # resolve the in-row skip-right chain with a running minimum of
        # base[d'] + lam * (d - d')
        drift = lam[:, x][:, None] * np.arange(D, dtype=np.float32)[None, :]
        g = base - drift
        run = np.minimum.accumulate(g, axis=1)
        M = run + drift
        pick = np.where(M < base, np.uint8(2), pick)
        choice[x] = pick
        M_prev = M

    end_d = np.argmin(M_prev, axis=1)
    total = M_prev[np.arange(R), end_d]

    disp = np.full((R, W), 0, dtype=np.int32)
    valid = np.zeros((R, W), dtype=bool)
    x_cur = np.full(R, W - 1, dtype=np.int64)
    d_cur = end_d.astype(np.int64)
    active = np.ones(R, dtype=bool)
    for _ in range(2 * (W + D) + 4):
        if not active.any():
            break
        rows_idx = np.flatnonzero(active)
        ch = choice[x_cur[rows_idx], rows_idx, d_cur[rows_idx]]
        is_match = ch == 0
        is_skip_l = ch == 1
        is_skip_r = ch == 2
        mrows = rows_idx[is_match]
        disp[mrows, x_cur[mrows]] = d_cur[mrows] + d_lo
        valid[mrows, x_cur[mrows]] = True
        x_cur[mrows] -= 1
        lrows = rows_idx[is_skip_l]
        x_cur[lrows] -= 1
        d_cur[lrows] += 1
        rrows = rows_idx[is_skip_r]
        d_cur[rrows] -= 1
        active &= x_cur >= 0
        # guard against band-edge inconsistencies
        active &= (d_cur >= 0) & (d_cur < D)
    return disp, valid, total


def _build_cost_volume(rect1, rect2, valid1, valid2, roi, d_lo, d_hi, cfg):
    c1, cv1 = census_transform(rect1, cfg.census_window)
    c2, cv2 = census_transform(rect2, cfg.census_window)
    H, W = rect1.shape
    D = d_hi - d_lo + 1
    cost = np.full((H, W, D), _INF, dtype=np.float32)
    ok1 = cv1 & valid1 & roi
    for k in range(D):
        d = d_lo + k
        x0 = max(0, -d)
        x1 = min(W, W - d)
        if x1 <= x0:
            continue
        ham = np.bitwise_count(
            c1[:, x0:x1] ^ c2[:, x0 + d:x1 + d]).astype(np.float32)
        agg = _box_mean(ham, cfg.aggregation_window) * (
            cfg.aggregation_window ** 2)
        feasible = ok1[:, x0:x1] & cv2[:, x0 + d:x1 + d] \
            & valid2[:, x0 + d:x1 + d]
        cost[:, x0:x1, k] = np.where(feasible, agg, _INF)
    return cost


def _halve(img):
    H, W = img.shape
    H2, W2 = H // 2, W // 2
    return img[:H2 * 2, :W2 * 2].reshape(H2, 2, W2, 2).mean(axis=(1, 3))


def _halve_bool(m):
    H, W = m.shape
    H2, W2 = H // 2, W // 2
    return m[:H2 * 2, :W2 * 2].reshape(H2, 2, W2, 2).any(axis=(1, 3))


def dp_stereo(pair: RectifiedPair, drange, roi_mask: np.ndarray,
              cfg: StereoConfig | None = None) -> DisparityMap:
    """Hierarchical dynamic-programming stereo over the rectified pair.

    The coarsest pyramid level searches the full (scaled) disparity
    range; finer levels search a band of ``band_halfwidth`` around the
    upsampled coarse result. Pixels outside ``roi_mask`` stay invalid.
    """
    cfg = cfg or StereoConfig()
    d_lo, d_hi = int(drange[0]), int(drange[1])
    if d_hi < d_lo:
        raise EmptyRange(f"empty disparity range [{d_lo}, {d_hi}]")
    roi = np.asarray(roi_mask, dtype=bool)
    if roi.shape != pair.rect1.shape:
        raise ValueError("roi mask must match the rectified shape")
    if not roi.any():
        raise EmptyRoi("region of interest is empty")

    # crop to the roi bounding box (with a filter- and range-sized pad)
    ys, xs = np.nonzero(roi)
    pad = (cfg.census_window + cfg.aggregation_window
           + max(abs(d_lo), abs(d_hi)))
    y0 = max(0, ys.min() - cfg.census_window)
    y1 = min(roi.shape[0], ys.max() + cfg.census_window + 1)
    x0 = max(0, xs.min() - pad)
    x1 = min(roi.shape[1], xs.max() + pad + 1)

    im1 = pair.rect1[y0:y1, x0:x1].astype(np.float32)
    im2 = pair.rect2[y0:y1, x0:x1].astype(np.float32)
    v1 = pair.valid1[y0:y1, x0:x1]
    v2 = pair.valid2[y0:y1, x0:x1]
    roi_c = roi[y0:y1, x0:x1]

    levels = [(im1, im2, v1, v2, roi_c)]
    while min(levels[-1][0].shape) >= 2 * cfg.min_pyramid_dim:
        a, b, m1, m2, r = levels[-1]
        levels.append((_halve(a), _halve(b), _halve_bool(m1),
                       _halve_bool(m2), _halve_bool(r)))
    levels.reverse()  # coarse -> fine

    n_levels = len(levels)
    disp = None
    dvalid = None
    for li, (a, b, m1, m2, r) in enumerate(levels):
        scale = 2 ** (n_levels - 1 - li)
        lo = int(math.floor(d_lo / scale)) - 1
        hi = int(math.ceil(d_hi / scale)) + 1
        H, W = a.shape
        if disp is not None:
            # upsample previous level disparity to band centers
            centers = np.repeat(np.repeat(disp * 2, 2, axis=0), 2, axis=1)
            cvalid = np.repeat(np.repeat(dvalid, 2, axis=0), 2, axis=1)
            centers = centers[:H, :W]
            cvalid = cvalid[:H, :W]
            if centers.shape != (H, W):
                grown = np.zeros((H, W), dtype=centers.dtype)
                grown[:centers.shape[0], :centers.shape[1]] = centers
                gv = np.zeros((H, W), dtype=bool)
                gv[:cvalid.shape[0], :cvalid.shape[1]] = cvalid
                centers, cvalid = grown, gv
            fill = np.int32(np.median(centers[cvalid])) if cvalid.any() \
                else np.int32((lo + hi) // 2)
            centers = np.where(cvalid, centers, fill)
            band_lo = np.maximum(centers - cfg.band_halfwidth, lo)
            band_hi = np.minimum(centers + cfg.band_halfwidth, hi)
            lo = int(band_lo.min())
            hi = int(band_hi.max())
        cost = _build_cost_volume(
            np.clip(np.round(a), 0, 255).astype(np.uint8),
            np.clip(np.round(b), 0, 255).astype(np.uint8),
            m1, m2, r, lo, hi, cfg)
        if disp is not None:
            D = hi - lo + 1
            idx = np.arange(D, dtype=np.int32)[None, None, :] + lo
            outside = (idx < band_lo[:, :, None]) | (idx > band_hi[:, :, None])
            cost[outside] = _INF
        var = _local_variance(a, cfg.aggregation_window)
        lam_scale = cfg.lambda0 * cfg.aggregation_window ** 2
        lam = np.float32(lam_scale) / (1.0 + var / cfg.sigma0 ** 2)
        lam = lam.astype(np.float32)
        disp, dvalid, _ = dp_rows(cost, lam, lo)
        # drop matches whose cell was infeasible (all-inf degenerate rows)
        yy, xx = np.nonzero(dvalid)
        if len(yy):
            picked = cost[yy, xx, disp[yy, xx] - lo]
            dvalid[yy, xx] &= picked < _INF
        dvalid &= r  # never report pixels outside the roi

    values = np.zeros(pair.rect1.shape, dtype=np.float32)
    valid = np.zeros(pair.rect1.shape, dtype=bool)
    values[y0:y1, x0:x1] = disp.astype(np.float32)
    valid[y0:y1, x0:x1] = dvalid
    valid &= roi
    values = np.clip(values, d_lo, d_hi)
    values[~valid] = 0.0
    return DisparityMap(values=values, valid=valid, d_min=d_lo, d_max=d_hi)


def median_refine(d: DisparityMap, kernel: int = 5) -> DisparityMap:
    """Median filter over valid neighbors; the validity mask is unchanged."""
    if kernel % 2 == 0:
        raise ValueError("kernel must be odd")
    h = kernel // 2
    H, W = d.values.shape
    pad_v = np.pad(d.values, h, mode="constant")
    pad_m = np.pad(d.valid, h, mode="constant")
    stack_v = []
    stack_m = []
    for dy in range(kernel):
        for dx in range(kernel):
            stack_v.append(pad_v[dy:dy + H, dx:dx + W])
            stack_m.append(pad_m[dy:dy + H, dx:dx + W])
    vals = np.stack(stack_v)
    mask = np.stack(stack_m)
    big = np.where(mask, vals, np.inf)
    order = np.sort(big, axis=0)
    counts = mask.sum(axis=0)
    mid = (counts - 1) // 2
    even = (counts > 0) & (counts % 2 == 0)
    lo_idx = np.clip(mid, 0, kernel * kernel - 1)
    hi_idx = np.clip(np.where(even, mid + 1, mid), 0, kernel * kernel - 1)
    take = lambda idx: np.take_along_axis(order, idx[None, :, :], axis=0)[0]
    med = 0.5 * (take(lo_idx) + take(hi_idx))
    out = np.where(d.valid & (counts > 0), med, d.values)
    return DisparityMap(values=out.astype(np.float32), valid=d.valid.copy(),
                        d_min=d.d_min, d_max=d.d_max)


def identity_pair(img1, img2) -> RectifiedPair:
    """Wrap two already row-aligned rasters as a rectified pair.

    The rasters are used untouched; the coordinate maps model an epipole
    far to the left, so rectified (row, col) matches image (v, u) to a
    tenth of a pixel. Used by fixtures and tests that drive dp_stereo
    directly.
    """
    g1 = as_gray_array(img1)
    g2 = as_gray_array(img2)
    if g1.shape != g2.shape:
        raise ValueError("images must share a shape")
    H, W = g1.shape
    rows = np.arange(H, dtype=float)
    e = np.array([-_FAR_EPIPOLE, 0.0])
    theta = np.arctan2(rows, _FAR_EPIPOLE)
    dirs = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    rmin = np.hypot(_FAR_EPIPOLE, rows)
    ones = np.ones(H)
    return RectifiedPair(
        rect1=g1, rect2=g2,
        valid1=np.ones_like(g1, dtype=bool),
        valid2=np.ones_like(g2, dtype=bool),
        e1=e.copy(), e2=e.copy(),
        theta1=theta, dir1=dirs, dir2=dirs.copy(),
        origin1=rmin, origin2=rmin.copy(),
        step1=ones, step2=ones.copy())
