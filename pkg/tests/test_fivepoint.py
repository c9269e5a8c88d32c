import numpy as np
import pytest

from dishvol.errors import AmbiguousChirality, DegenerateSample
from dishvol.geometry import (
    CameraIntrinsics,
    EssentialModel,
    RelativePose,
    project_points,
    skew,
)
from dishvol.robust import decompose_essential, five_point_solver, lm_refine

K_NORM = CameraIntrinsics(fx=1, fy=1, cx=0.0, cy=0.0, width=4, height=4)


def rotation(axis, degrees):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    a = np.deg2rad(degrees)
    K = skew(axis)
    return np.eye(3) + np.sin(a) * K + (1 - np.cos(a)) * (K @ K)


def rotation_error_rad(Ra, Rb):
    c = (np.trace(Ra @ Rb.T) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def direction_error_rad(ta, tb):
    c = abs(float(np.dot(ta, tb)) / (np.linalg.norm(ta) * np.linalg.norm(tb)))
    return float(np.arccos(np.clip(c, 0.0, 1.0)))


def make_matches(pose, n, rng, spread=1.0, depth=(2.0, 6.0)):
    pts = np.column_stack([
        rng.uniform(-spread, spread, n),
        rng.uniform(-spread, spread, n),
        rng.uniform(*depth, n),
    ])
    uv1, f1 = project_points(pts, K_NORM, RelativePose.identity())
    uv2, f2 = project_points(pts, K_NORM, pose)
    keep = f1 & f2
    return uv1[keep], uv2[keep]


class TestFivePointSolver:
    def test_pure_translation_contains_truth(self):
        rng = np.random.default_rng(0)
        pose = RelativePose(np.eye(3), np.array([1.0, 0.0, 0.0]))
        x1, x2 = make_matches(pose, 5, rng)
        models = five_point_solver(x1, x2)
        Et = skew([1.0, 0, 0])
        Et = Et / np.linalg.norm(Et)
        best = min(min(np.linalg.norm(m.E - Et), np.linalg.norm(m.E + Et))
                   for m in models)
        assert best < 1e-8

    def test_identical_matches_degenerate(self):
        x = np.tile([[0.1, 0.2]], (5, 1))
        with pytest.raises(DegenerateSample):
            five_point_solver(x, x + 0.05)

    def test_decomposition_recovers_known_pose(self):
        rng = np.random.default_rng(1)
        R = rotation([0, 1, 0], 10.0)
        t = np.array([0.8, 0.0, 0.6])
        pose = RelativePose(R, t)
        x1, x2 = make_matches(pose, 5, rng)
        models = five_point_solver(x1, x2)
        best_err = np.inf
        for m in models:
            try:
                rec = decompose_essential(m, x1, x2)
            except AmbiguousChirality:
                continue
            err = rotation_error_rad(rec.rotation, R)
            if err < best_err:
                best_err = err
                best_t = rec.translation
        assert best_err < 1e-6
        assert direction_error_rad(best_t, t) < 1e-6

    def test_models_satisfy_type_invariants(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            pose = RelativePose(rotation(rng.normal(size=3), rng.uniform(3, 25)),
                                rng.normal(size=3))
            pose.translation /= np.linalg.norm(pose.translation)
            x1, x2 = make_matches(pose, 5, rng)
            if len(x1) < 5:
                continue
            for m in five_point_solver(x1, x2):
                assert m.is_valid()
                alg = np.abs(np.einsum("ni,ij,nj->n",
                                       np.c_[x2, np.ones(len(x2))], m.E,
                                       np.c_[x1, np.ones(len(x1))]))
                assert np.max(alg) < 1e-8


class TestDecomposeEssential:
    def test_forward_constructed(self):
        rng = np.random.default_rng(3)
        pose = RelativePose(np.eye(3), np.array([1.0, 0.0, 0.0]))
        pts = np.column_stack([rng.uniform(-0.5, 0.5, 30),
                               rng.uniform(-0.5, 0.5, 30),
                               rng.uniform(1.0, 3.0, 30)])
        uv1, _ = project_points(pts, K_NORM, RelativePose.identity())
        uv2, f2 = project_points(pts, K_NORM, pose)
        rec = decompose_essential(pose.essential_matrix(), uv1[f2], uv2[f2])
        assert rotation_error_rad(rec.rotation, np.eye(3)) < 1e-9
        assert np.allclose(rec.translation, [1, 0, 0], atol=1e-9)

    def test_mirrored_matches_never_behind(self):
        # matches formally generated from points behind both cameras
        rng = np.random.default_rng(4)
        pose = RelativePose(rotation([0, 1, 0], 8.0), np.array([1.0, 0, 0]))
        pts = np.column_stack([rng.uniform(-0.5, 0.5, 20),
                               rng.uniform(-0.5, 0.5, 20),
                               -rng.uniform(1.0, 3.0, 20)])
        q2 = pose.transform(pts)
        x1 = pts[:, :2] / pts[:, [2]]
        x2 = q2[:, :2] / q2[:, [2]]
        try:
            rec = decompose_essential(pose.essential_matrix(), x1, x2)
        except AmbiguousChirality:
            return
        # if a pose is returned, it must place a strict majority in front
        from dishvol.robust import _depths_in_front
        assert _depths_in_front(rec.rotation, rec.translation, x1, x2) > 10

    def test_zero_disparity_ambiguous(self):
        pose = RelativePose(np.eye(3), np.array([1.0, 0.0, 0.0]))
        x = np.array([[0.1, 0.2]])
        with pytest.raises(AmbiguousChirality):
            decompose_essential(pose.essential_matrix(), x, x)


class TestLmRefine:
    def test_noiseless_is_fixed_point(self):
        rng = np.random.default_rng(5)
        pose = RelativePose(rotation([1, 2, 0], 12.0), np.array([0.6, 0.0, 0.8]))
        x1, x2 = make_matches(pose, 40, rng)
        res = lm_refine(pose, x1, x2)
        assert res.final_cost == pytest.approx(0.0, abs=1e-12)
        assert rotation_error_rad(res.pose.rotation, pose.rotation) < 1e-9

    def test_noisy_refinement_recovers_pose(self):
        rng = np.random.default_rng(6)
        R = rotation([0.3, 1, 0.1], 18.0)
        pose = RelativePose(R, np.array([0.9, 0.1, np.sqrt(1 - 0.82)]))
        x1, x2 = make_matches(pose, 60, rng)
        # 0.5 px noise at a nominal 1000 px focal length
        x1n = x1 + rng.normal(0, 0.5 / 1000.0, x1.shape)
        x2n = x2 + rng.normal(0, 0.5 / 1000.0, x2.shape)
        perturbed = RelativePose(R @ rotation([0, 0, 1], 2.0),
                                 pose.translation)
        res = lm_refine(perturbed, x1n, x2n)
        assert res.final_cost < res.initial_cost
        assert rotation_error_rad(res.pose.rotation, R) < np.deg2rad(0.2)

    def test_cost_history_non_increasing(self):
        rng = np.random.default_rng(7)
        pose = RelativePose(rotation([0, 1, 0], 15.0), np.array([1.0, 0, 0]))
        x1, x2 = make_matches(pose, 50, rng)
        x1 += rng.normal(0, 1e-3, x1.shape)
        perturbed = RelativePose(pose.rotation @ rotation([1, 0, 0], 1.0),
                                 pose.translation)
        res = lm_refine(perturbed, x1, x2)
        assert all(b <= a + 1e-15 for a, b in zip(res.cost_history,
                                                  res.cost_history[1:]))
