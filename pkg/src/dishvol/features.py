"""Salient point detection, description, and symmetric matching.

The detector is a determinant-of-Hessian blob detector built on box
filters over an integral image (three octaves, scale-space non-maximum
suppression, sub-pixel refinement). Descriptors are 64-dimensional,
L2-normalized Haar-wavelet statistics over an orientation-aligned,
scale-proportional 4x4 grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import TooFewFeatures
from .image import as_gray_array

# filter side lengths per octave; the sampling step doubles per octave
_OCTAVE_FILTERS = [
    (1, [9, 15, 21, 27]),
    (2, [15, 27, 39, 51]),
    (4, [27, 51, 75, 99]),
]

MIN_FEATURES = 20


@dataclass
class FeatureConfig:
    # default tuned so a 1-megapixel textured image yields 500-3000 points
    hessian_threshold: float = 2e-5
    max_points: int = 5000
    min_features: int = MIN_FEATURES


@dataclass(frozen=True)
class SalientPoint:
    x: float
    y: float
    scale: float
    orientation: float
    response: float


@dataclass
class MatchSet:
    """Injective pairing of point indices across two images."""

    idx1: np.ndarray
    idx2: np.ndarray
    distance: np.ndarray

    def __len__(self) -> int:
        return len(self.idx1)

    @property
    def pairs(self):
        return list(zip(self.idx1.tolist(), self.idx2.tolist(),
                        self.distance.tolist()))

    def take(self, keep) -> "MatchSet":
        keep = np.asarray(keep)
        return MatchSet(self.idx1[keep], self.idx2[keep], self.distance[keep])

    @staticmethod
    def empty() -> "MatchSet":
        return MatchSet(np.empty(0, dtype=int), np.empty(0, dtype=int),
                        np.empty(0, dtype=float))


_PAD = 256  # covers the largest filter/descriptor reach at the top scale


def integral_image(gray: np.ndarray) -> np.ndarray:
    """Edge-padded integral image: out-of-range box corners clamp to the
    border, which reproduces clipped box sums without per-call clipping."""
    H, W = gray.shape
    ii = np.zeros((H + 1, W + 1), dtype=np.float64)
    np.cumsum(np.cumsum(gray, axis=0), axis=1, out=ii[1:, 1:])
    return np.pad(ii, _PAD, mode="edge")


def _box(ii: np.ndarray, y0, x0, h, w):
    """Box sums over [y0, y0+h) x [x0, x0+w); array arguments ok."""
    y0p = y0 + _PAD
    x0p = x0 + _PAD
    y1p = y0p + h
    x1p = x0p + w
    return ii[y1p, x1p] - ii[y0p, x1p] - ii[y1p, x0p] + ii[y0p, x0p]


def _hessian_layer(ii: np.ndarray, L: int, step: int, H: int,
                   W: int) -> np.ndarray:
    """Normalized det-of-Hessian response on the sampled grid."""
    gy = np.arange(0, H, step)
    gx = np.arange(0, W, step)
    r, c = np.meshgrid(gy, gx, indexing="ij")
    b = (L - 1) // 2
    lobe = L // 3
    inv_area = 1.0 / (L * L)
    dxx = (_box(ii, r - lobe + 1, c - b, 2 * lobe - 1, L)
           - 3.0 * _box(ii, r - lobe + 1, c - lobe // 2, 2 * lobe - 1, lobe))
    dyy = (_box(ii, r - b, c - lobe + 1, L, 2 * lobe - 1)
           - 3.0 * _box(ii, r - lobe // 2, c - lobe + 1, lobe, 2 * lobe - 1))
    dxy = (_box(ii, r - lobe, c + 1, lobe, lobe)
           + _box(ii, r + 1, c - lobe, lobe, lobe)
           - _box(ii, r - lobe, c - lobe, lobe, lobe)
           - _box(ii, r + 1, c + 1, lobe, lobe))
    dxx *= inv_area
    dyy *= inv_area
    dxy *= inv_area
    return dxx * dyy - 0.81 * dxy * dxy


def _interpolate_extremum(stack: np.ndarray, s: int, i: int, j: int):
    """Quadratic 3-D refinement; returns (ds, di, dj) or None."""
    R = stack
    g = 0.5 * np.array([
        R[s + 1, i, j] - R[s - 1, i, j],
        R[s, i + 1, j] - R[s, i - 1, j],
        R[s, i, j + 1] - R[s, i, j - 1],
    ])
    Hss = R[s + 1, i, j] + R[s - 1, i, j] - 2 * R[s, i, j]
    Hii = R[s, i + 1, j] + R[s, i - 1, j] - 2 * R[s, i, j]
    Hjj = R[s, i, j + 1] + R[s, i, j - 1] - 2 * R[s, i, j]
    Hsi = 0.25 * (R[s + 1, i + 1, j] - R[s + 1, i - 1, j]
                  - R[s - 1, i + 1, j] + R[s - 1, i - 1, j])
    Hsj = 0.25 * (R[s + 1, i, j + 1] - R[s + 1, i, j - 1]
                  - R[s - 1, i, j + 1] + R[s - 1, i, j - 1])
    Hij = 0.25 * (R[s, i + 1, j + 1] - R[s, i + 1, j - 1]
                  - R[s, i - 1, j + 1] + R[s, i - 1, j - 1])
    Hm = np.array([[Hss, Hsi, Hsj], [Hsi, Hii, Hij], [Hsj, Hij, Hjj]])
    try:
        off = np.linalg.solve(Hm, -g)
    except np.linalg.LinAlgError:
        return None
    if np.max(np.abs(off)) >= 0.75:
        return None
    return off


def _detect(gray: np.ndarray, cfg: FeatureConfig,
            ii: np.ndarray | None = None) -> np.ndarray:
    """Keypoints as rows (x, y, scale, response)."""
    from scipy.ndimage import maximum_filter

    if ii is None:
        ii = integral_image(gray.astype(np.float64) / 255.0)
    H, W = gray.shape
    found = []
    for step, filters in _OCTAVE_FILTERS:
        layers = np.stack([_hessian_layer(ii, L, step, H, W)
                           for L in filters])
        local_max = maximum_filter(layers, size=3, mode="constant", cval=-np.inf)
        cand = (layers >= local_max) & (layers > cfg.hessian_threshold)
        cand[0] = cand[-1] = False
        cand[:, :1, :] = cand[:, -1:, :] = False
        cand[:, :, :1] = cand[:, :, -1:] = False
        for s, i, j in zip(*np.nonzero(cand)):
            off = _interpolate_extremum(layers, s, i, j)
            if off is None:
                continue
            ds, di, dj = off
            spacing = (filters[s + 1] - filters[s - 1]) / 2.0
            Lref = filters[s] + ds * spacing
            x = (j + dj) * step
            y = (i + di) * step
            if not (0 <= x < W and 0 <= y < H):
                continue
            found.append((x, y, 1.2 * Lref / 9.0, layers[s, i, j]))
    if not found:
        return np.empty((0, 4))
    pts = np.asarray(found)

    # octaves overlap in filter size; keep the strongest of near-duplicates
    order = np.argsort(-pts[:, 3])
    pts = pts[order]
    kept = []
    occupied = {}
    for row in pts:
        key = (int(row[0] / 2.0), int(row[1] / 2.0))
        dup = False
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                for other in occupied.get((key[0] + dx, key[1] + dy), ()):
                    if (abs(other[0] - row[0]) < 2.0
                            and abs(other[1] - row[1]) < 2.0
                            and abs(other[2] - row[2]) < 0.5 * other[2]):
                        dup = True
                        break
                if dup:
                    break
            if dup:
                break
        if not dup:
            kept.append(row)
            occupied.setdefault(key, []).append(row)
    pts = np.asarray(kept)
    return pts[: cfg.max_points]


# precomputed orientation sampling pattern: integer offsets within radius 6
_ORI_OFFSETS = np.array([(i, j) for i in range(-6, 7) for j in range(-6, 7)
                         if i * i + j * j <= 36], dtype=float)
_ORI_WEIGHTS = np.exp(-(np.sum(_ORI_OFFSETS ** 2, axis=1)) / (2 * 2.5 ** 2))

# descriptor sampling pattern: 20x20 samples, 4x4 subregions of 5x5 samples
_DESC_UV = np.array([(u + 0.5, v + 0.5) for v in range(-10, 10)
                     for u in range(-10, 10)], dtype=float)
_DESC_SUB = np.array([(int((v + 10) // 5) * 4 + int((u + 10) // 5))
                      for v in range(-10, 10) for u in range(-10, 10)])
_DESC_WEIGHTS = np.exp(-(np.sum(_DESC_UV ** 2, axis=1)) / (2 * 3.3 ** 2))


def _haar_xy(ii, px, py, m):
    """Axis-aligned Haar responses of size 2m at integer positions."""
    dx = (_box(ii, py - m, px, 2 * m, m) - _box(ii, py - m, px - m, 2 * m, m))
    dy = (_box(ii, py, px - m, m, 2 * m) - _box(ii, py - m, px - m, m, 2 * m))
    return dx, dy


_N_ORI_BINS = 42
_ORI_WINDOW_BINS = 7  # pi/3 window


def _orientations(ii, pts):
    """Dominant Haar-response direction per keypoint.

    Responses are binned by angle; a sliding pi/3 window over the bins
    picks the direction with the largest summed response vector.
    """
    K = len(pts)
    x = pts[:, 0][:, None]
    y = pts[:, 1][:, None]
    s = pts[:, 2][:, None]
    px = np.round(x + _ORI_OFFSETS[None, :, 0] * s).astype(int)
    py = np.round(y + _ORI_OFFSETS[None, :, 1] * s).astype(int)
    m = np.maximum(np.round(2 * s).astype(int), 1)
    dx, dy = _haar_xy(ii, px, py, m)
    dx *= _ORI_WEIGHTS[None, :]
    dy *= _ORI_WEIGHTS[None, :]
    phi = np.arctan2(dy, dx)
    bins = ((phi + np.pi) / (2 * np.pi) * _N_ORI_BINS).astype(int) % _N_ORI_BINS
    sx = np.zeros((K, _N_ORI_BINS))
    sy = np.zeros((K, _N_ORI_BINS))
    rows = np.repeat(np.arange(K), phi.shape[1])
    np.add.at(sx, (rows, bins.ravel()), dx.ravel())
    np.add.at(sy, (rows, bins.ravel()), dy.ravel())
    # circular window sums over consecutive bins
    wx = np.zeros((K, _N_ORI_BINS))
    wy = np.zeros((K, _N_ORI_BINS))
    for k in range(_ORI_WINDOW_BINS):
        wx += np.roll(sx, -k, axis=1)
        wy += np.roll(sy, -k, axis=1)
    norm = wx * wx + wy * wy
    best = np.argmax(norm, axis=1)
    idx = np.arange(K)
    return np.arctan2(wy[idx, best], wx[idx, best])


def _descriptors(ii, pts, angles):
    K = len(pts)
    x = pts[:, 0][:, None]
    y = pts[:, 1][:, None]
    s = pts[:, 2][:, None]
    c = np.cos(angles)[:, None]
    sn = np.sin(angles)[:, None]
    u = _DESC_UV[None, :, 0]
    v = _DESC_UV[None, :, 1]
    px = np.round(x + s * (c * u - sn * v)).astype(int)
    py = np.round(y + s * (sn * u + c * v)).astype(int)
    m = np.maximum(np.round(s).astype(int), 1)
    dx, dy = _haar_xy(ii, px, py, m)
    # rotate image-axis responses into the keypoint frame
    rdx = (c * dx + sn * dy) * _DESC_WEIGHTS[None, :]
    rdy = (-sn * dx + c * dy) * _DESC_WEIGHTS[None, :]
    desc = np.zeros((K, 16, 4))
    for sub in range(16):
        sel = _DESC_SUB == sub
        desc[:, sub, 0] = rdx[:, sel].sum(axis=1)
        desc[:, sub, 1] = rdy[:, sel].sum(axis=1)
        desc[:, sub, 2] = np.abs(rdx[:, sel]).sum(axis=1)
        desc[:, sub, 3] = np.abs(rdy[:, sel]).sum(axis=1)
    desc = desc.reshape(K, 64)
    norms = np.linalg.norm(desc, axis=1, keepdims=True)
    norms = np.where(norms < 1e-12, 1.0, norms)
    return desc / norms


def detect_and_describe(img, config: FeatureConfig | None = None):
    """Detect salient points and compute their descriptors.

    Returns:
        (points, descriptors): points sorted by descending response,
        descriptors as an (N, 64) float array aligned with the points.

    Raises:
        TooFewFeatures: when fewer than ``config.min_features`` points are
            found (untextured input).
    """
    cfg = config or FeatureConfig()
    gray = as_gray_array(img)
    if gray.shape[0] < 64 or gray.shape[1] < 64:
        raise ValueError("image must be at least 64x64")
    ii = integral_image(gray.astype(np.float64) / 255.0)
    pts = _detect(gray, cfg, ii)
    if len(pts) < cfg.min_features:
        raise TooFewFeatures(f"only {len(pts)} salient points detected")
    order = np.argsort(-pts[:, 3])
    pts = pts[order]
    angles = _orientations(ii, pts)
    desc = _descriptors(ii, pts, angles)
    points = [SalientPoint(x=float(p[0]), y=float(p[1]), scale=float(p[2]),
                           orientation=float(a), response=float(p[3]))
              for p, a in zip(pts, angles)]
    return points, desc


def _nearest_two(dist: np.ndarray):
    """Per row: (index of nearest, nearest distance, second distance)."""
    if dist.shape[1] == 1:
        return (np.zeros(len(dist), dtype=int), dist[:, 0],
                np.full(len(dist), np.inf))
    idx = np.argpartition(dist, 1, axis=1)[:, :2]
    two = np.take_along_axis(dist, idx, axis=1)
    swap = two[:, 0] > two[:, 1]
    two[swap] = two[swap][:, ::-1]
    idx[swap] = idx[swap][:, ::-1]
    return idx[:, 0], two[:, 0], two[:, 1]


def match_symmetric(desc_a: np.ndarray, desc_b: np.ndarray,
                    distinctiveness_ratio: float = 1.1) -> MatchSet:
    """Mutual nearest-neighbor matching with a distinctiveness filter.

    A pair survives iff each point is the other's single best match and,
    in both directions, second_distance / best_distance >=
    ``distinctiveness_ratio``. Exact (brute force) search.
    """
    a = np.asarray(desc_a, dtype=float)
    b = np.asarray(desc_b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("descriptor sets must be non-empty")
    if distinctiveness_ratio < 1.0:
        raise ValueError("distinctiveness_ratio must be >= 1")
    d2 = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :]
          - 2.0 * (a @ b.T))
    dist = np.sqrt(np.clip(d2, 0.0, None))

    nn_ab, d1_ab, d2_ab = _nearest_two(dist)
    nn_ba, d1_ba, d2_ba = _nearest_two(dist.T)

    def ratio(d1, d2):
        with np.errstate(divide="ignore", invalid="ignore"):
            r = d2 / d1
        r = np.where(d1 > 0, r, np.where(d2 > 0, np.inf, 1.0))
        return r

    r_ab = ratio(d1_ab, d2_ab)
    r_ba = ratio(d1_ba, d2_ba)

    i = np.arange(len(a))
    j = nn_ab
    mutual = nn_ba[j] == i
    ok = (mutual & (r_ab >= distinctiveness_ratio)
          & (r_ba[j] >= distinctiveness_ratio))
    return MatchSet(i[ok], j[ok], d1_ab[ok])
