"""Robust model fitting: RANSAC with local optimization and an adaptive,
noise-calibrated inlier threshold, plus the model solvers the pipeline
plugs into it (essential matrix, homography, plane) and Levenberg-Marquardt
pose refinement.

The engine is data-agnostic: callers pass closures that generate models
from index samples, score a model against all data, and produce a noise
distance distribution for the threshold estimation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import (
    AmbiguousChirality,
    DegenerateSample,
    NoModelFound,
    NoReliableThreshold,
)
from .fivepoint import five_point_solver
from .geometry import EssentialModel, Plane, RelativePose, epipolar_distances, skew

__all__ = [
    "RansacConfig", "FitResult", "inlier_fitness", "adaptive_threshold",
    "build_noise_distribution", "ransac", "local_optimize",
    "five_point_solver", "decompose_essential", "lm_refine", "LmResult",
    "homography_solver", "homography_transfer_distances", "plane_solver",
    "plane_distances",
]


@dataclass
class RansacConfig:
    """Knobs of the robust fitting loop.

    ``noise_pollution_p`` bounds the false discovery rate admitted by the
    adaptive threshold. ``fixed_threshold`` bypasses the adaptive estimate
    (used for the reference-card homography, where the threshold is a
    fraction of the card size).
    """

    max_iterations: int = 10000
    # floor on the sample count: the confidence formula collapses to a
    # couple of iterations at high inlier rates, too few to surface both
    # branches of near-degenerate (plane-dominated) geometries
    min_iterations: int = 25
    confidence: float = 0.99
    noise_pollution_p: float = 0.03
    lo_sample_size: int = 10
    lo_rounds: int = 10
    lo_max_restarts: int = 3
    noise_samples: int = 1000
    fixed_threshold: Optional[float] = None
    enable_lo: bool = True
    # inlier counts within this relative band count as rate ties, which
    # the truncated-distance fitness then resolves (disambiguates e.g.
    # the two pose branches of a plane-dominated scene)
    rate_tie_rel: float = 0.02

    def __post_init__(self):
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must be in (0, 1)")
        if not 0 < self.noise_pollution_p < 1:
            raise ValueError("noise_pollution_p must be in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")


@dataclass
class FitResult:
    """Best model found by :func:`ransac`, with its support."""

    model: object
    inliers: np.ndarray          # indices into the data
    threshold: float
    fitness: float               # truncated-distance fitness of the model
    iterations_run: int
    distances: np.ndarray = field(repr=False, default=None)


def inlier_fitness(distances, threshold: float) -> float:
    """Sum of max(threshold - d, 0) over all distances."""
    d = np.asarray(distances, dtype=float)
    return float(np.maximum(threshold - d, 0.0).sum())


def adaptive_threshold(data_distances, noise_distances, p: float) -> float:
    """Largest-inlier-rate threshold keeping the false discovery bound < p.

    With Cdf_data and Cdf_noise the empirical CDFs of the model-to-data and
    model-to-noise distances, scans every data quantile delta = k/n and
    returns the k-th smallest data distance for the largest delta with
    Cdf_noise(Cdf_data^-1(delta)) / delta < p.

    Raises:
        NoReliableThreshold: when no quantile qualifies (the model is
            indistinguishable from noise).
    """
    data = np.sort(np.asarray(data_distances, dtype=float))
    noise = np.sort(np.asarray(noise_distances, dtype=float))
    if len(data) == 0 or len(noise) == 0:
        raise ValueError("distance lists must be non-empty")
    if not 0 < p < 1:
        raise ValueError("p must be in (0, 1)")
    n = len(data)
    deltas = np.arange(1, n + 1) / n
    noise_cdf = np.searchsorted(noise, data, side="right") / len(noise)
    ok = noise_cdf / deltas < p
    if not ok.any():
        raise NoReliableThreshold(
            "no inlier rate keeps the false discovery bound below p")
    return float(data[np.flatnonzero(ok)[-1]])


def build_noise_distribution(points_a, points_b, model, distance_fn,
                             n_samples: int = 1000, rng_seed: int = 0) -> np.ndarray:
    """Sorted distances of random cross-pairings of real points to a model.

    ``distance_fn(model, pa, pb)`` must return one distance per pairing.
    Deterministic for a fixed seed.
    """
    points_a = np.asarray(points_a)
    points_b = np.asarray(points_b)
    if len(points_a) < 2 or len(points_b) < 2:
        raise ValueError("need at least two points on each side")
    if n_samples < 100:
        raise ValueError("n_samples must be at least 100")
    rng = np.random.default_rng(rng_seed)
    ia = rng.integers(0, len(points_a), size=n_samples)
    ib = rng.integers(0, len(points_b), size=n_samples)
    return np.sort(np.asarray(distance_fn(model, points_a[ia], points_b[ib]),
                              dtype=float))


def _iteration_budget(rate: float, sample_size: int, confidence: float,
                      cap: int) -> int:
    if rate >= 1.0:
        return 1
    good = rate ** sample_size
    if good <= 1e-12:
        return cap
    denom = math.log(max(1e-300, 1.0 - good))
    need = math.log(1.0 - confidence) / denom
    return int(min(cap, max(1.0, math.ceil(need))))


def local_optimize(fit: FitResult, distance_fn: Callable,
                   lo_solve_fn: Callable, config: RansacConfig,
                   rng: np.random.Generator) -> FitResult:
    """Resample non-minimal subsets of the inliers to improve the fit.

    Draws ``lo_rounds`` samples of ``lo_sample_size`` inliers, scores the
    generated models by truncated-distance fitness at the current
    threshold, and restarts from the improved inlier set on every gain
    (at most ``lo_max_restarts`` restarts). Never returns a worse fit.
    """
    if len(fit.inliers) < config.lo_sample_size:
        return fit
    best = fit
    restarts = 0
    while True:
        improved = False
        pool = best.inliers
        for _ in range(config.lo_rounds):
            sample = rng.choice(pool, size=config.lo_sample_size, replace=False)
            try:
                models = lo_solve_fn(sample)
            except DegenerateSample:
                continue
            for model in models:
                dists = distance_fn(model)
                fitness = inlier_fitness(dists, best.threshold)
                if fitness > best.fitness:
                    inl = np.flatnonzero(dists <= best.threshold)
                    best = replace(best, model=model, inliers=inl,
                                   fitness=fitness, distances=dists)
                    improved = True
        if not improved or restarts >= config.lo_max_restarts:
            return best
        if len(best.inliers) < config.lo_sample_size:
            return best
        restarts += 1


def ransac(n_data: int, solve_fn: Callable, distance_fn: Callable,
           noise_fn: Optional[Callable], sample_size: int,
           config: RansacConfig, rng_seed: int,
           lo_solve_fn: Optional[Callable] = None) -> FitResult:
    """Adaptive-threshold RANSAC with local optimization.

    Args:
        n_data: number of data items; samples are drawn as index sets.
        solve_fn: indices -> list of candidate models (DegenerateSample ok).
        distance_fn: model -> distances to all data, shape (n_data,).
        noise_fn: model -> sorted noise distances for the adaptive
            threshold; unused when config.fixed_threshold is set.
        sample_size: minimal sample size of the solver.
        lo_solve_fn: non-minimal solver for local optimization; defaults
            to ``solve_fn``.

    The inlier threshold is estimated per candidate model until a
    non-trivial model is found, then kept global and re-estimated whenever
    a better model is adopted. Candidates are ranked by inlier count with
    fitness as the tie-break; each new best model goes through local
    optimization and tightens the iteration budget.

    A model counts as non-trivial when its support reaches twice the
    sample size and its inlier rate is large enough that the empirical
    noise sample can certify the false discovery bound at all (rate >=
    1 / (p * noise_samples)); below that the bound is vacuous and the
    model is indistinguishable from noise.

    Raises:
        NoModelFound: when every candidate stayed trivial.
    """
    if n_data < sample_size:
        raise NoModelFound(f"{n_data} data items < sample size {sample_size}")
    if config.fixed_threshold is None and noise_fn is None:
        raise ValueError("need a noise_fn when no fixed threshold is set")
    if lo_solve_fn is None:
        lo_solve_fn = solve_fn
    min_support = 2 * sample_size
    if config.fixed_threshold is None:
        certifiable = n_data / (config.noise_pollution_p * config.noise_samples)
        min_support = max(min_support, math.ceil(certifiable))
    rng = np.random.default_rng(rng_seed)

    best: Optional[FitResult] = None
    global_thr: Optional[float] = None
    budget = config.max_iterations
    it = 0

    def threshold_for(model, dists):
        if config.fixed_threshold is not None:
            return config.fixed_threshold
        return adaptive_threshold(dists, noise_fn(model), config.noise_pollution_p)

    while it < budget:
        it += 1
        sample = rng.choice(n_data, size=sample_size, replace=False)
        try:
            models = solve_fn(sample)
        except DegenerateSample:
            continue
        for model in models:
            dists = distance_fn(model)
            if global_thr is not None:
                thr = global_thr
            else:
                try:
                    thr = threshold_for(model, dists)
                except NoReliableThreshold:
                    continue
            inl = np.flatnonzero(dists <= thr)
            if len(inl) < min_support:
                continue  # trivial support
            if best is not None:
                n_best = len(best.inliers)
                clearly_better = len(inl) > n_best * (1 + config.rate_tie_rel)
                tied = len(inl) >= n_best * (1 - config.rate_tie_rel)
                if not clearly_better and not (
                        tied and inlier_fitness(dists, thr) > best.fitness):
                    continue

            # new best: re-estimate the global threshold from it
            try:
                thr = threshold_for(model, dists)
            except NoReliableThreshold:
                thr = thr if global_thr is None else global_thr
            global_thr = thr
            inl = np.flatnonzero(dists <= thr)
            best = FitResult(model=model, inliers=inl, threshold=thr,
                             fitness=inlier_fitness(dists, thr),
                             iterations_run=it, distances=dists)
            if config.enable_lo:
                best = local_optimize(best, distance_fn, lo_solve_fn,
                                      config, rng)
                try:
                    new_thr = threshold_for(best.model, best.distances)
                except NoReliableThreshold:
                    new_thr = best.threshold
                if new_thr != best.threshold:
                    inl = np.flatnonzero(best.distances <= new_thr)
                    best = replace(
                        best, threshold=new_thr, inliers=inl,
                        fitness=inlier_fitness(best.distances, new_thr))
                global_thr = best.threshold
            rate = len(best.inliers) / n_data
            floor = config.min_iterations if rate < 1.0 else 1
            budget = min(budget, max(
                it, floor,
                _iteration_budget(rate, sample_size, config.confidence,
                                  config.max_iterations)))

    if best is None:
        raise NoModelFound("all candidate models were trivial")
    return replace(best, iterations_run=it)


# --- essential matrix decomposition and refinement ---------------------------

def _depths_in_front(R: np.ndarray, t: np.ndarray, x1: np.ndarray,
                     x2: np.ndarray) -> int:
    """Count matches whose midpoint-triangulated depths are positive."""
    n = len(x1)
    d1 = np.concatenate([x1, np.ones((n, 1))], axis=1)
    d1 /= np.linalg.norm(d1, axis=1, keepdims=True)
    d2 = np.concatenate([x2, np.ones((n, 1))], axis=1) @ R  # rotated into cam 1
    d2 /= np.linalg.norm(d2, axis=1, keepdims=True)
    o2 = -R.T @ t
    b = np.einsum("ij,ij->i", d1, d2)
    denom = 1.0 - b * b
    usable = denom > 1e-10
    denom = np.where(usable, denom, 1.0)
    d1w = d1 @ -o2
    d2w = d2 @ -o2
    t1 = (b * d2w - d1w) / denom
    t2 = d2w + b * t1
    return int(np.count_nonzero(usable & (t1 > 0) & (t2 > 0)))


def decompose_essential(E: EssentialModel, x1: np.ndarray,
                        x2: np.ndarray) -> RelativePose:
    """Pick the (R, t) factorization that places the matches in front.

    ``x1``/``x2`` are normalized coordinates of the inlier matches.
    Raises AmbiguousChirality when no factorization wins strictly.
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    x2 = np.atleast_2d(np.asarray(x2, dtype=float))
    if len(x1) < 1:
        raise ValueError("need at least one match")
    U, _, Vt = np.linalg.svd(E.E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    candidates = [(U @ W @ Vt, t), (U @ W @ Vt, -t),
                  (U @ W.T @ Vt, t), (U @ W.T @ Vt, -t)]
    counts = [_depths_in_front(R, tt, x1, x2) for R, tt in candidates]
    order = np.argsort(counts)
    if counts[order[-1]] == 0 or counts[order[-1]] == counts[order[-2]]:
        raise AmbiguousChirality("no factorization wins the chirality vote")
    R, tt = candidates[order[-1]]
    return RelativePose(R, tt / np.linalg.norm(tt))


def _rodrigues(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3) + skew(w)
    k = w / theta
    K = skew(k)
    return np.eye(3) + math.sin(theta) * K + (1 - math.cos(theta)) * (K @ K)


def _tangent_basis(t: np.ndarray) -> np.ndarray:
    ref = np.array([1.0, 0.0, 0.0]) if abs(t[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    b1 = np.cross(t, ref)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(t, b1)
    return np.stack([b1, b2], axis=1)  # (3, 2)


@dataclass
class LmResult:
    pose: RelativePose
    essential: EssentialModel
    initial_cost: float
    final_cost: float
    cost_history: list


def lm_refine(pose: RelativePose, x1: np.ndarray, x2: np.ndarray,
              max_iterations: int = 100, cost_tol: float = 1e-10) -> LmResult:
    """Levenberg-Marquardt refinement of a pose over its five DOF.

    Minimizes the sum of symmetric epipolar distances of the matches on a
    minimal chart: an axis-angle rotation update composed onto the current
    rotation and a two-parameter tangent-plane update of the unit
    translation direction. Accepted steps never increase the cost.
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if len(x1) < 6:
        raise ValueError("LM refinement needs at least six matches")

    R0 = pose.rotation.copy()
    t0 = pose.translation / np.linalg.norm(pose.translation)

    def cost_of(R, t):
        E = skew(t) @ R
        return float(epipolar_distances(E, x1, x2).sum())

    def residuals(R, t):
        E = skew(t) @ R
        return np.sqrt(np.maximum(epipolar_distances(E, x1, x2), 0.0))

    def apply_params(p, R, t, basis):
        Rn = R @ _rodrigues(p[:3])
        tn = t + basis @ p[3:]
        return Rn, tn / np.linalg.norm(tn)

    cost = cost_of(R0, t0)
    history = [cost]
    initial_cost = cost
    mu = 1e-4
    h = 1e-7
    it = 0
    while it < max_iterations:
        it += 1
        basis = _tangent_basis(t0)
        r0 = residuals(R0, t0)
        J = np.zeros((len(r0), 5))
        for k in range(5):
            p = np.zeros(5)
            p[k] = h
            Rk, tk = apply_params(p, R0, t0, basis)
            J[:, k] = (residuals(Rk, tk) - r0) / h
        g = J.T @ r0
        H = J.T @ J
        if np.linalg.norm(g) < 1e-14:
            break
        accepted = False
        for _ in range(8):
            try:
                step = np.linalg.solve(H + mu * np.eye(5), -g)
            except np.linalg.LinAlgError:
                mu *= 10
                continue
            Rn, tn = apply_params(step, R0, t0, basis)
            new_cost = cost_of(Rn, tn)
            if new_cost < cost:
                R0, t0 = Rn, tn
                rel_change = (cost - new_cost) / max(cost, 1e-300)
                cost = new_cost
                history.append(cost)
                mu = max(mu / 3, 1e-12)
                accepted = True
                if rel_change < cost_tol:
                    it = max_iterations
                break
            mu *= 4
        if not accepted:
            break

    refined = RelativePose(R0, t0, pose.scale)
    return LmResult(pose=refined, essential=refined.essential_matrix(),
                    initial_cost=initial_cost, final_cost=cost,
                    cost_history=history)


# --- homography --------------------------------------------------------------

def _collinear_triple_exists(pts: np.ndarray, tol: float = 1e-9) -> bool:
    n = len(pts)
    span = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1e-12)
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                a = pts[j] - pts[i]
                b = pts[k] - pts[i]
                if abs(a[0] * b[1] - a[1] * b[0]) < tol * span * span:
                    return True
    return False


def homography_solver(pts1: np.ndarray, pts2: np.ndarray) -> list[np.ndarray]:
    """DLT homography from >= 4 correspondences, Frobenius-normalized.

    Raises DegenerateSample when any three sample points are collinear
    (checked for minimal samples) or the system is rank deficient.
    """
    pts1 = np.asarray(pts1, dtype=float)
    pts2 = np.asarray(pts2, dtype=float)
    n = len(pts1)
    if n < 4:
        raise ValueError("need at least four correspondences")
    if n == 4 and (_collinear_triple_exists(pts1) or _collinear_triple_exists(pts2)):
        raise DegenerateSample("three sample points are collinear")

    def normalizer(p):
        c = p.mean(axis=0)
        s = np.sqrt(2.0) / max(np.mean(np.linalg.norm(p - c, axis=1)), 1e-12)
        T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
        return T

    T1 = normalizer(pts1)
    T2 = normalizer(pts2)
    p1 = np.concatenate([pts1, np.ones((n, 1))], axis=1) @ T1.T
    p2 = np.concatenate([pts2, np.ones((n, 1))], axis=1) @ T2.T

    A = np.zeros((2 * n, 9))
    A[0::2, 0:3] = p1
    A[0::2, 6:9] = -p2[:, [0]] * p1
    A[1::2, 3:6] = p1
    A[1::2, 6:9] = -p2[:, [1]] * p1
    _, s, Vt = np.linalg.svd(A)
    if s[-2] < 1e-12:
        raise DegenerateSample("homography system is rank deficient")
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(T2) @ Hn @ T1
    H /= np.linalg.norm(H)
    if abs(H[2, 2]) > 1e-12:
        if H[2, 2] < 0:
            H = -H
    elif H.flat[np.argmax(np.abs(H))] < 0:
        H = -H
    return [H]


def homography_transfer_distances(H: np.ndarray, pts1: np.ndarray,
                                  pts2: np.ndarray) -> np.ndarray:
    """Distance between H(pts1) and pts2, one value per correspondence."""
    pts1 = np.asarray(pts1, dtype=float)
    pts2 = np.asarray(pts2, dtype=float)
    q = np.concatenate([pts1, np.ones((len(pts1), 1))], axis=1) @ H.T
    w = q[:, 2]
    bad = np.abs(w) < 1e-12
    w = np.where(bad, 1.0, w)
    proj = q[:, :2] / w[:, None]
    d = np.linalg.norm(proj - pts2, axis=1)
    return np.where(bad, 1e12, d)


# --- plane -------------------------------------------------------------------

def _orient_toward_camera(normal: np.ndarray) -> np.ndarray:
    """Flip a plane normal into the -z hemisphere (toward the camera)."""
    if normal[2] > 1e-12:
        return -normal
    if abs(normal[2]) <= 1e-12:
        if normal[0] < 0 or (normal[0] == 0 and normal[1] < 0):
            return -normal
    return normal


def plane_solver(points: np.ndarray) -> list[Plane]:
    """Plane through >= 3 points (least squares beyond 3), camera-oriented.

    Raises DegenerateSample on (near-)collinear input.
    """
    pts = np.asarray(points, dtype=float)
    if len(pts) < 3:
        raise ValueError("need at least three points")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    _, s, Vt = np.linalg.svd(centered, full_matrices=False)
    if s[1] < 1e-9 * max(s[0], 1e-12):
        raise DegenerateSample("points are collinear")
    normal = _orient_toward_camera(Vt[2] / np.linalg.norm(Vt[2]))
    return [Plane(normal, float(normal @ centroid))]


def plane_distances(plane: Plane, points: np.ndarray) -> np.ndarray:
    return np.abs(plane.signed_distance(points))


def bounding_box_noise(points: np.ndarray, n_samples: int,
                       rng_seed: int) -> np.ndarray:
    """Uniform random points in the data bounding box, for plane-fit noise."""
    pts = np.asarray(points, dtype=float)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    rng = np.random.default_rng(rng_seed)
    return rng.uniform(lo, hi, size=(n_samples, pts.shape[1]))
