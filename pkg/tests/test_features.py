import numpy as np
import pytest

from dishvol.errors import TooFewFeatures
from dishvol.features import (
    FeatureConfig,
    MatchSet,
    detect_and_describe,
    match_symmetric,
)


def value_noise(h, w, seed, octaves=4, base=8):
    rng = np.random.default_rng(seed)
    out = np.zeros((h, w))
    amp = 1.0
    for o in range(octaves):
        cells = base * (2 ** o)
        grid = rng.uniform(0, 1, (cells + 2, cells + 2))
        ys = np.linspace(0, cells - 1e-9, h)
        xs = np.linspace(0, cells - 1e-9, w)
        yi = ys.astype(int)
        xi = xs.astype(int)
        fy = (ys - yi)[:, None]
        fx = (xs - xi)[None, :]
        out += amp * ((1 - fy) * (1 - fx) * grid[np.ix_(yi, xi)]
                      + (1 - fy) * fx * grid[np.ix_(yi, xi + 1)]
                      + fy * (1 - fx) * grid[np.ix_(yi + 1, xi)]
                      + fy * fx * grid[np.ix_(yi + 1, xi + 1)])
        amp *= 0.5
    out -= out.min()
    out /= out.max()
    return (out * 255).astype(np.uint8)


class TestDetect:
    def test_gaussian_blobs_recalled(self):
        rng = np.random.default_rng(3)
        H = W = 512
        img = np.zeros((H, W))
        yy, xx = np.mgrid[0:H, 0:W]
        centers = []
        for gi in range(8):
            for gj in range(8):
                if len(centers) >= 50:
                    break
                centers.append((32 + gj * 60 + rng.uniform(-8, 8),
                                32 + gi * 60 + rng.uniform(-8, 8)))
        for cx, cy in centers:
            img += 200 * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * 16.0))
        img = np.clip(img, 0, 255).astype(np.uint8)
        pts, desc = detect_and_describe(img)
        assert len(pts) >= 50
        hits = sum(
            any(abs(p.x - cx) <= 2 and abs(p.y - cy) <= 2 for p in pts)
            for cx, cy in centers)
        assert hits == 50

    def test_constant_image_raises(self):
        img = np.full((128, 128), 137, dtype=np.uint8)
        with pytest.raises(TooFewFeatures):
            detect_and_describe(img)

    def test_textured_megapixel_point_budget(self):
        img = value_noise(1000, 1000, seed=1)
        pts, _ = detect_and_describe(img)
        assert 500 <= len(pts) <= 3000

    def test_sorted_by_response_and_descriptors_normalized(self):
        img = value_noise(256, 256, seed=2)
        pts, desc = detect_and_describe(img)
        resp = [p.response for p in pts]
        assert resp == sorted(resp, reverse=True)
        assert np.allclose(np.linalg.norm(desc, axis=1), 1.0, atol=1e-6)
        assert desc.shape[1] == 64
        assert all(p.scale > 0 for p in pts)

    def test_deterministic(self):
        img = value_noise(200, 200, seed=9)
        p1, d1 = detect_and_describe(img)
        p2, d2 = detect_and_describe(img)
        assert p1 == p2
        assert np.array_equal(d1, d2)

    def test_rotation_invariant_descriptors(self):
        img = value_noise(300, 300, seed=5)
        rot = np.rot90(img, k=-1).copy()
        p1, d1 = detect_and_describe(img)
        p2, d2 = detect_and_describe(rot)
        W = img.shape[1]
        good = total = 0
        for i, p in enumerate(p1[:200]):
            tx, ty = W - 1 - p.y, p.x
            best_d = None
            for j, q in enumerate(p2):
                if (abs(q.x - tx) <= 2 and abs(q.y - ty) <= 2
                        and abs(q.scale - p.scale) < 0.5 * p.scale):
                    dd = np.linalg.norm(d1[i] - d2[j])
                    best_d = dd if best_d is None else min(best_d, dd)
            if best_d is not None:
                total += 1
                good += best_d < 0.35
        assert total > 50
        assert good / total >= 0.8


class TestMatchSymmetric:
    def test_orthonormal_identity_matching(self):
        basis = np.eye(8)
        ms = match_symmetric(basis, basis, 1.1)
        assert len(ms) == 8
        assert np.array_equal(ms.idx1, ms.idx2)
        assert np.allclose(ms.distance, 0.0)

    def test_ambiguous_duplicates_filtered(self):
        d = np.zeros((2, 4))
        d[:, 0] = 1.0  # two identical descriptors in a
        b = d[:1]
        ms = match_symmetric(d, b, 1.1)
        assert len(ms) == 0

    def test_perturbed_correspondence_recovered(self):
        rng = np.random.default_rng(17)
        a = rng.normal(size=(100, 64))
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        noise = rng.normal(size=(100, 64))
        noise *= 0.05 / np.linalg.norm(noise, axis=1, keepdims=True)
        b_main = a + noise
        b_main /= np.linalg.norm(b_main, axis=1, keepdims=True)
        extra = rng.normal(size=(50, 64))
        extra /= np.linalg.norm(extra, axis=1, keepdims=True)
        b = np.vstack([b_main, extra])
        ms = match_symmetric(a, b, 1.1)
        correct = np.count_nonzero(ms.idx1 == ms.idx2)
        assert correct >= 95
        assert np.count_nonzero(ms.idx2 >= 100) == 0

    def test_symmetry(self):
        rng = np.random.default_rng(23)
        a = rng.normal(size=(40, 64))
        b = rng.normal(size=(37, 64))
        ab = match_symmetric(a, b, 1.05)
        ba = match_symmetric(b, a, 1.05)
        assert set(zip(ab.idx1.tolist(), ab.idx2.tolist())) == \
            set(zip(ba.idx2.tolist(), ba.idx1.tolist()))

    def test_raising_ratio_never_adds_matches(self):
        rng = np.random.default_rng(29)
        a = rng.normal(size=(60, 64))
        b = a + rng.normal(scale=0.3, size=(60, 64))
        prev = None
        for ratio in (1.0, 1.05, 1.1, 1.3, 1.8):
            ms = match_symmetric(a, b, ratio)
            pairs = set(zip(ms.idx1.tolist(), ms.idx2.tolist()))
            if prev is not None:
                assert pairs.issubset(prev)
            prev = pairs

    def test_injective_both_ways(self):
        rng = np.random.default_rng(31)
        a = rng.normal(size=(50, 64))
        b = rng.normal(size=(45, 64))
        ms = match_symmetric(a, b, 1.0)
        assert len(set(ms.idx1.tolist())) == len(ms)
        assert len(set(ms.idx2.tolist())) == len(ms)
