"""Minimal-case essential matrix estimation from five (or more) matches.

The solver parameterizes E as a linear combination of the four null-space
basis matrices of the epipolar constraint system, expands the rank and
trace constraints into ten cubic polynomials in the three mixing
coefficients, and extracts the real solutions through the eigenvalue
decomposition of the quotient-ring action matrix. Works for exactly five
matches (minimal case) and for larger sets (least-squares null space),
which is what local optimization feeds it.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateSample
from .geometry import EssentialModel

# Monomial basis in (x, y, z): ten cubics followed by the ten monomials of
# degree <= 2. The order of the trailing block defines the quotient basis.
_MONOMIALS = [
    (3, 0, 0), (2, 1, 0), (2, 0, 1), (1, 2, 0), (1, 1, 1),
    (1, 0, 2), (0, 3, 0), (0, 2, 1), (0, 1, 2), (0, 0, 3),
    (2, 0, 0), (1, 1, 0), (1, 0, 1), (0, 2, 0), (0, 1, 1),
    (0, 0, 2), (1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0),
]
_INDEX = {m: i for i, m in enumerate(_MONOMIALS)}
_LIN = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0)]
_QUAD = _MONOMIALS[10:]


def _product_tensor(basis_a, basis_b):
    """One-hot tensor mapping coefficient outer products to the 20-basis."""
    t = np.zeros((20, len(basis_a), len(basis_b)))
    for i, ea in enumerate(basis_a):
        for j, eb in enumerate(basis_b):
            prod = (ea[0] + eb[0], ea[1] + eb[1], ea[2] + eb[2])
            t[_INDEX[prod], i, j] = 1.0
    return t


_LL = _product_tensor(_LIN, _LIN)      # linear x linear -> degree-2 poly
_QL = _product_tensor(_QUAD, _LIN)     # degree-2 x linear -> degree-3 poly

# Fixed generic remixes of the null-space basis. Structured inputs (for
# example pure translation) can make the reduction singular in the raw
# basis; a generic change of chart removes the degeneracy while leaving
# the recovered essential matrices untouched.
def _fixed_mixes():
    rng = np.random.default_rng(20240917)
    mixes = [np.eye(4)]
    for _ in range(2):
        q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        mixes.append(q)
    return mixes


_MIXES = _fixed_mixes()


def _mul_ll(a, b):
    return np.einsum("kij,i,j->k", _LL, a, b)


def _mul_ql(q, b):
    return np.einsum("kij,i,j->k", _QL, q[10:], b)


def _constraint_matrix(basis: np.ndarray) -> np.ndarray:
    """Ten cubic constraints (det and trace) as a 10x20 coefficient matrix.

    ``basis`` holds the four 3x3 null-space matrices; the essential matrix
    is x*basis[0] + y*basis[1] + z*basis[2] + basis[3].
    """
    # entry (i, j) of E as a linear polynomial over (x, y, z, 1)
    lin = basis.transpose(1, 2, 0)  # (3, 3, 4)

    def minor(r0, c0, r1, c1):
        return _mul_ll(lin[r0, c0], lin[r1, c1]) - _mul_ll(lin[r0, c1], lin[r1, c0])

    det = (
        _mul_ql(minor(1, 1, 2, 2), lin[0, 0])
        - _mul_ql(minor(1, 0, 2, 2), lin[0, 1])
        + _mul_ql(minor(1, 0, 2, 1), lin[0, 2])
    )

    # P = E E^T (symmetric, degree-2 entries)
    P = np.zeros((3, 3, 20))
    for i in range(3):
        for k in range(i, 3):
            acc = np.zeros(20)
            for j in range(3):
                acc += _mul_ll(lin[i, j], lin[k, j])
            P[i, k] = acc
            P[k, i] = acc
    trace = P[0, 0] + P[1, 1] + P[2, 2]

    rows = [det]
    for i in range(3):
        for j in range(3):
            acc = np.zeros(20)
            for k in range(3):
                acc += _mul_ql(2.0 * P[i, k], lin[k, j])
            rows.append(acc - _mul_ql(trace, lin[i, j]))
    return np.asarray(rows)


def _action_matrix(B: np.ndarray) -> np.ndarray:
    """Multiplication-by-z matrix on the quotient basis.

    ``B`` is the reduced block so that each cubic monomial m_i satisfies
    m_i = -B[i] . [x^2, xy, xz, y^2, yz, z^2, x, y, z, 1] modulo the ideal.
    """
    A = np.zeros((10, 10))
    A[0] = -B[2]   # z * x^2  = x^2 z
    A[1] = -B[4]   # z * xy   = xyz
    A[2] = -B[5]   # z * xz   = x z^2
    A[3] = -B[7]   # z * y^2  = y^2 z
    A[4] = -B[8]   # z * yz   = y z^2
    A[5] = -B[9]   # z * z^2  = z^3
    A[6, 2] = 1.0  # z * x -> xz
    A[7, 4] = 1.0  # z * y -> yz
    A[8, 5] = 1.0  # z * z -> z^2
    A[9, 8] = 1.0  # z * 1 -> z
    return A


def five_point_solver(x1: np.ndarray, x2: np.ndarray,
                      residual_tol: float = 1e-8,
                      trace_tol: float = 1e-6) -> list[EssentialModel]:
    """Essential matrix candidates from >= 5 normalized matches.

    Args:
        x1, x2: normalized image coordinates, shape (N, 2), N >= 5.

    Returns:
        Up to ten essential matrices satisfying x2^T E x1 = 0 for the
        sample, each Frobenius-normalized.

    Raises:
        DegenerateSample: when the polynomial system is rank deficient.
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    n = len(x1)
    if n < 5 or len(x2) != n:
        raise ValueError("need at least five matches in both views")

    h1 = np.concatenate([x1, np.ones((n, 1))], axis=1)
    h2 = np.concatenate([x2, np.ones((n, 1))], axis=1)
    # row . vec(E) == x2^T E x1 with row-major vec
    Q = np.einsum("ni,nj->nij", h2, h1).reshape(n, 9)

    _, s, Vt = np.linalg.svd(Q)
    if s[4] < 1e-10 * max(s[0], 1e-12):
        raise DegenerateSample("epipolar constraint matrix has rank < 5")
    raw_basis = Vt[-4:].reshape(4, 3, 3)  # E = x*B0 + y*B1 + z*B2 + B3

    basis = B = None
    for mix in _MIXES:
        candidate = np.einsum("ij,jkl->ikl", mix, raw_basis)
        M = _constraint_matrix(candidate)
        lead = M[:, :10]
        cond = np.linalg.cond(lead)
        if np.isfinite(cond) and cond < 1e14:
            basis = candidate
            B = np.linalg.solve(lead, M[:, 10:])
            break
    if basis is None:
        raise DegenerateSample("constraint system is rank deficient")

    A = _action_matrix(B)
    eigvals, eigvecs = np.linalg.eig(A)

    models: list[EssentialModel] = []
    for k in range(len(eigvals)):
        if abs(eigvals[k].imag) > 1e-6 * (1.0 + abs(eigvals[k].real)):
            continue
        v = eigvecs[:, k]
        if abs(v[9]) < 1e-12:
            continue
        xyz = v[6:9] / v[9]
        if np.max(np.abs(xyz.imag)) > 1e-6 * (1.0 + np.max(np.abs(xyz.real))):
            continue
        x, y, z = xyz.real
        E = x * basis[0] + y * basis[1] + z * basis[2] + basis[3]
        norm = np.linalg.norm(E)
        if norm < 1e-12:
            continue
        E = E / norm
        # contract checks on the normalized candidate
        if np.max(np.abs(np.einsum("ni,ij,nj->n", h2, E, h1))) > residual_tol:
            continue
        if abs(np.linalg.det(E)) > 1e-8:
            continue
        EEt = E @ E.T
        if np.linalg.norm(2.0 * EEt @ E - np.trace(EEt) * E) > trace_tol:
            continue
        if any(abs(abs(np.sum(E * m.E))) > 1.0 - 1e-9 for m in models):
            continue  # duplicate up to sign
        models.append(EssentialModel(E))
    return models
