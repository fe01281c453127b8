"""Dihedral synchronization: class grading, member grading, reflection flags.

A class of m members with pairwise rotation/reflection estimates defines a
symmetric 2m x 2m block matrix of 2x2 orthogonal blocks (det +1 rotation,
det -1 reflection), identity on the diagonal. Consistent data makes it rank
two with both leading eigenvalues equal to m, so the spectral concentration
G = (lambda1 + lambda2) / 2m grades the class and the rank-two residual per
block row grades each member.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg as sla

from .neighbors import PairTable

__all__ = [
    "build_sync_matrix",
    "class_grade",
    "rank2_member_grades",
    "prune_classes",
    "prune_members",
    "reflection_sync",
]

_EIG_TOL = 1e-8
_EIGH_CUTOFF = 64  # full decomposition below this class size
_MAX_POWER_ITERS = 200


def _wrap(angle: np.ndarray) -> np.ndarray:
    return np.mod(angle + np.pi, 2.0 * np.pi) - np.pi


def build_sync_matrix(pairs: PairTable) -> np.ndarray:
    """Assemble the 2m x 2m synchronization matrix from a symmetric pair table."""
    theta = np.asarray(pairs.theta, dtype=np.float64)
    refl = np.asarray(pairs.reflected, dtype=bool)
    m = theta.shape[0]
    if theta.shape != (m, m) or refl.shape != (m, m):
        raise ValueError("pair table must be square")

    anti = _wrap(theta + theta.T)
    sym = _wrap(theta - theta.T)
    bad_rot = ~refl & (np.abs(anti) > 1e-9)
    bad_ref = refl & (np.abs(sym) > 1e-9)
    if bad_rot.any() or bad_ref.any() or (refl != refl.T).any():
        raise ValueError("asymmetric pair table: estimates do not satisfy the group inverse")
    if refl.diagonal().any() or (np.abs(_wrap(theta.diagonal())) > 1e-9).any():
        raise ValueError("diagonal pairs must be the identity (theta 0, unreflected)")

    cos = np.cos(theta)
    sin = np.sin(theta)
    sign = np.where(refl, -1.0, 1.0)
    out = np.empty((2 * m, 2 * m))
    out[0::2, 0::2] = cos
    out[0::2, 1::2] = -sin
    out[1::2, 0::2] = sign * sin
    out[1::2, 1::2] = sign * cos
    idx = np.arange(m)
    out[2 * idx, 2 * idx] = 1.0
    out[2 * idx + 1, 2 * idx + 1] = 1.0
    out[2 * idx, 2 * idx + 1] = 0.0
    out[2 * idx + 1, 2 * idx] = 0.0
    return out


def _top_eigpairs(matrix: np.ndarray, k: int = 3):
    """Leading k eigenpairs of a symmetric matrix, descending.

    Uses a deterministic shifted block power iteration (start: first columns
    of the identity) for large matrices, falling back to the full symmetric
    decomposition for small ones or on non-convergence.
    """
    dim = matrix.shape[0]
    m = dim // 2
    if m <= _EIGH_CUTOFF or dim <= k:
        vals, vecs = np.linalg.eigh(matrix)
        order = np.argsort(vals)[::-1][:k]
        return vals[order], vecs[:, order]

    # blocks are orthogonal, so ||matrix||_2 <= m and the shift makes it PSD
    shift = float(m)
    v = np.zeros((dim, k))
    v[:k, :k] = np.eye(k)
    ritz_prev = np.full(k, np.inf)
    for _ in range(_MAX_POWER_ITERS):
        w = matrix @ v + shift * v
        v, _ = np.linalg.qr(w)
        t = v.T @ (matrix @ v)
        t = 0.5 * (t + t.T)
        tvals, tvecs = np.linalg.eigh(t)
        order = np.argsort(tvals)[::-1]
        ritz = tvals[order]
        v = v @ tvecs[:, order]
        if np.all(np.abs(ritz - ritz_prev) <= _EIG_TOL * np.maximum(1.0, np.abs(ritz))):
            return ritz, v
        ritz_prev = ritz
    # near-degenerate trailing spectrum stalls the iteration; the full
    # decomposition is exact and still cheap at these sizes
    vals, vecs = np.linalg.eigh(matrix)
    order = np.argsort(vals)[::-1][:k]
    return vals[order], vecs[:, order]


def class_grade(matrix: np.ndarray):
    """Spectral concentration G = (lambda1 + lambda2) / 2m and the eigenvalues."""
    m = matrix.shape[0] // 2
    vals, _ = _top_eigpairs(matrix, k=2)
    lam1, lam2 = float(vals[0]), float(vals[1])
    return (lam1 + lam2) / (2.0 * m), lam1, lam2


def rank2_member_grades(matrix: np.ndarray) -> np.ndarray:
    """Member grades g_i = -(1/m) sum_j ||Rhat[i,j] - R[i,j]||_F over 2x2 blocks,
    where Rhat is the best rank-two approximation (eigenvectors scaled by
    sqrt(lambda)). Zero for a perfectly consistent class; more negative is worse.
    """
    dim = matrix.shape[0]
    m = dim // 2
    vals, vecs = _top_eigpairs(matrix, k=3)
    if vals[1] - vals[2] <= 1e-6 * max(1.0, abs(vals[1])):
        warnings.warn(
            f"degenerate spectrum lambda2={vals[1]:.6g} ~ lambda3={vals[2]:.6g}; "
            "rank-two approximation is not unique"
        )
    scaled = vecs[:, :2] * np.sqrt(np.maximum(vals[:2], 0.0))[None, :]
    resid = scaled @ scaled.T - matrix
    blocks = resid.reshape(m, 2, m, 2)
    norms = np.sqrt(np.einsum("iajb,iajb->ij", blocks, blocks))
    return -norms.sum(axis=1) / m


def prune_classes(grades, keep: int) -> np.ndarray:
    """Indices of the keep highest-graded classes, descending, ties by index."""
    grades = np.asarray(grades, dtype=float)
    order = np.argsort(-grades, kind="stable")
    return order[: min(keep, len(grades))]


def prune_members(grades, keep: int) -> np.ndarray:
    """Indices of the keep highest-graded members, descending, ties by index."""
    return prune_classes(grades, keep)


def reflection_sync(pairs: PairTable) -> np.ndarray:
    """Global per-member reflection flags by Z/2 spectral synchronization.

    Builds J in {+-1}^(K x K) with -1 on reflected pairs and reads the sign
    pattern of its leading eigenvector; the global sign is fixed so member 0
    is unreflected. Entries within 1e-8 of zero are decided by majority vote
    over their row.
    """
    refl = np.asarray(pairs.reflected, dtype=bool)
    if (refl != refl.T).any():
        raise ValueError("reflection table must be symmetric")
    k = refl.shape[0]
    j = np.where(refl, -1.0, 1.0)
    np.fill_diagonal(j, 1.0)
    vals, vecs = sla.eigh(j, subset_by_index=(k - 1, k - 1))
    lead = vecs[:, 0]
    scale = np.abs(lead).max()
    near_zero = np.abs(lead) <= 1e-8 * max(scale, 1e-300)
    signs = np.where(lead >= 0, 1.0, -1.0)
    if near_zero.any():
        warnings.warn(
            f"{int(near_zero.sum())} eigenvector entries near zero; using row majority vote"
        )
        solid = ~near_zero
        for i in np.nonzero(near_zero)[0]:
            vote = float(j[i, solid] @ signs[solid])
            signs[i] = 1.0 if vote >= 0 else -1.0
    return signs != signs[0]
