"""Rotation/reflection-invariant nearest-neighbor search on steerable coefficients.

The invariant correlation of two coefficient vectors is the maximum over a
fixed angle grid of the centered correlation between the steered first
vector and the second vector or its conjugate (reflected branch). The
returned angle is the one that steers the first image onto the second.

The batched search embeds complex vectors in R^(2d) so each seed costs one
real matrix product of shape (2*n_theta, 2d) x (2d, N); ties are broken by
the lowest angle index, then the unreflected branch.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AngleGrid",
    "NeighborTable",
    "PairTable",
    "centered_corr",
    "invariant_corr",
    "knn_search",
    "pairwise_table",
    "select_seeds",
]


@dataclass
class AngleGrid:
    """Uniform angle grid theta_i = i * 2*pi / n_theta over [0, 2*pi)."""

    n_theta: int = 72

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.n_theta) * (2.0 * np.pi / self.n_theta)


@dataclass
class NeighborTable:
    """Per-seed neighbor lists sorted by descending invariant correlation."""

    seeds: np.ndarray       # (n_seeds,)
    neighbors: np.ndarray   # (n_seeds, class_size) image indices
    corr: np.ndarray        # (n_seeds, class_size)
    angle: np.ndarray       # (n_seeds, class_size) radians, seed -> neighbor
    reflected: np.ndarray   # (n_seeds, class_size) bool
    n_images: int = 0
    n_theta: int = 0
    class_size: int = 0


@dataclass
class PairTable:
    """Symmetric pairwise rotation/reflection estimates within one class."""

    theta: np.ndarray      # (m, m) radians in [0, 2*pi)
    reflected: np.ndarray  # (m, m) bool
    corr: np.ndarray       # (m, m)


def centered_corr(u: np.ndarray, v: np.ndarray) -> float:
    """Pearson-style correlation of complex vectors: Re of the normalized
    inner product of the mean-centered vectors."""
    u = np.asarray(u).ravel()
    v = np.asarray(v).ravel()
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    cu = u - u.mean()
    cv = v - v.mean()
    nu = np.linalg.norm(cu)
    nv = np.linalg.norm(cv)
    if nu == 0 or nv == 0:
        warnings.warn("centered_corr: zero-variance vector, correlation defined as 0")
        return 0.0
    return float(np.vdot(cu, cv).real / (nu * nv))


def _center_normalize(rows: np.ndarray) -> np.ndarray:
    """Center each row to zero mean and scale to unit norm (zero rows stay zero)."""
    out = rows - rows.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    bad = norms[:, 0] == 0
    if bad.any():
        warnings.warn(f"{int(bad.sum())} zero-variance coefficient vectors")
        norms[bad] = 1.0
    out /= norms
    return out


def _steered_rows(vec: np.ndarray, freqs: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """steer(vec, theta_t) for every grid angle, centered and normalized."""
    phases = np.exp(-1j * np.outer(angles, freqs.astype(vec.real.dtype)))
    return _center_normalize(phases * vec[None, :])


def _interleaved_query(shat: np.ndarray, real_dtype) -> np.ndarray:
    """Stack [Re s, Im s] / [Re s, -Im s] rows so row 2t is the unreflected
    branch of angle t and row 2t+1 the reflected one (argmax tie order)."""
    n_theta, d = shat.shape
    q = np.empty((2 * n_theta, 2 * d), dtype=real_dtype)
    q[0::2, :d] = shat.real
    q[0::2, d:] = shat.imag
    q[1::2, :d] = shat.real
    q[1::2, d:] = -shat.imag
    return q


def _embed_targets(chat: np.ndarray, real_dtype) -> np.ndarray:
    d = chat.shape[1]
    out = np.empty((2 * d, chat.shape[0]), dtype=real_dtype)
    out[:d] = chat.real.T
    out[d:] = chat.imag.T
    return out


def _real_dtype(coeffs: np.ndarray):
    return np.float32 if coeffs.dtype == np.complex64 else np.float64


def invariant_corr(a_i, a_j, grid: AngleGrid):
    """Best invariant correlation between two coefficient vectors.

    Returns (value, best_angle, reflected) where best_angle steers a_i onto
    a_j (or onto the mirror of a_j when reflected is True).
    """
    u = np.asarray(getattr(a_i, "coeffs", a_i)).ravel()
    v = np.asarray(getattr(a_j, "coeffs", a_j)).ravel()
    freqs = np.asarray(getattr(a_i, "freqs", getattr(a_j, "freqs", None)))
    if freqs is None or freqs.shape != u.shape:
        raise ValueError("coefficient vectors must carry a matching freq vector")
    if u.shape != v.shape:
        raise ValueError("coefficient vectors must have equal length")

    angles = grid.angles
    shat = _steered_rows(u, freqs, angles)
    chat = _center_normalize(v[None, :])[0]
    v1 = (shat.conj() @ chat).real
    v2 = (shat.conj() @ chat.conj()).real
    stacked = np.empty(2 * len(angles))
    stacked[0::2] = v1
    stacked[1::2] = v2
    best = int(np.argmax(stacked))
    return float(stacked[best]), float(angles[best // 2]), bool(best % 2)


def knn_search(
    seeds: np.ndarray,
    all_coeffs,
    grid: AngleGrid,
    class_size: int,
) -> NeighborTable:
    """For each seed, the class_size images with the highest invariant correlation.

    Implemented as one (2*n_theta, 2d) x (2d, N) product per seed against the
    pre-centered, pre-normalized coefficient matrix.
    """
    coeffs = np.asarray(getattr(all_coeffs, "coeffs", all_coeffs))
    freqs = np.asarray(getattr(all_coeffs, "freqs", None))
    if freqs is None:
        raise ValueError("all_coeffs must carry a freq vector")
    n, d = coeffs.shape
    if class_size > n:
        raise ValueError(f"class_size {class_size} exceeds {n} images")

    rdt = _real_dtype(coeffs)
    chat = _center_normalize(coeffs)
    targets = _embed_targets(chat, rdt)

    seeds = np.asarray(seeds, dtype=int)
    angles = grid.angles
    n_seeds = len(seeds)
    nb_idx = np.empty((n_seeds, class_size), dtype=int)
    nb_corr = np.empty((n_seeds, class_size))
    nb_angle = np.empty((n_seeds, class_size))
    nb_refl = np.empty((n_seeds, class_size), dtype=bool)

    for s, seed in enumerate(seeds):
        shat = _steered_rows(coeffs[seed], freqs, angles).astype(
            np.complex64 if rdt == np.float32 else np.complex128, copy=False
        )
        query = _interleaved_query(shat, rdt)
        vals = query @ targets                        # (2*n_theta, N)
        rows = np.argmax(vals, axis=0)                # first max: lowest angle, unreflected
        best = vals[rows, np.arange(n)]
        # the seed is its own best match; pin it first so float ties between
        # exact duplicates cannot displace it
        rest = np.argsort(-best, kind="stable")
        rest = rest[rest != seed]
        order = np.concatenate([[seed], rest])[:class_size]
        nb_idx[s] = order
        nb_corr[s] = best[order]
        nb_angle[s] = angles[rows[order] // 2]
        nb_refl[s] = (rows[order] % 2).astype(bool)

    return NeighborTable(
        seeds=seeds,
        neighbors=nb_idx,
        corr=nb_corr,
        angle=nb_angle,
        reflected=nb_refl,
        n_images=n,
        n_theta=grid.n_theta,
        class_size=class_size,
    )


def pairwise_table(member_coeffs, grid: AngleGrid, chunk: int = 64) -> PairTable:
    """All-pairs invariant estimates within one class, symmetrized by the
    dihedral group inverse (theta_ji = -theta_ij unreflected, theta_ij reflected)."""
    coeffs = np.asarray(getattr(member_coeffs, "coeffs", member_coeffs))
    freqs = np.asarray(getattr(member_coeffs, "freqs", None))
    if freqs is None:
        raise ValueError("member_coeffs must carry a freq vector")
    m, d = coeffs.shape
    rdt = _real_dtype(coeffs)
    angles = grid.angles
    n_theta = len(angles)

    chat = _center_normalize(coeffs)
    targets = _embed_targets(chat, rdt)

    theta = np.zeros((m, m))
    refl = np.zeros((m, m), dtype=bool)
    corr = np.ones((m, m))
    cdt = np.complex64 if rdt == np.float32 else np.complex128

    for lo in range(0, m, chunk):
        hi = min(lo + chunk, m)
        queries = np.concatenate(
            [
                _interleaved_query(
                    _steered_rows(coeffs[i], freqs, angles).astype(cdt, copy=False), rdt
                )
                for i in range(lo, hi)
            ]
        )                                             # ((hi-lo)*2T, 2d)
        vals = (queries @ targets).reshape(hi - lo, 2 * n_theta, m)
        rows = np.argmax(vals, axis=1)
        best = np.take_along_axis(vals, rows[:, None, :], axis=1)[:, 0, :]
        theta[lo:hi] = angles[rows // 2]
        refl[lo:hi] = (rows % 2).astype(bool)
        corr[lo:hi] = best

    # canonical estimate from the upper triangle; lower filled by group inverse
    iu, ju = np.triu_indices(m, k=1)
    theta[ju, iu] = np.where(
        refl[iu, ju], theta[iu, ju], (-theta[iu, ju]) % (2.0 * np.pi)
    )
    refl[ju, iu] = refl[iu, ju]
    corr[ju, iu] = corr[iu, ju]
    np.fill_diagonal(theta, 0.0)
    np.fill_diagonal(refl, False)
    np.fill_diagonal(corr, 1.0)
    return PairTable(theta=theta, reflected=refl, corr=corr)


def select_seeds(n: int, n_c: int, rng_seed: int) -> np.ndarray:
    """n_c distinct uniform image indices, sorted, reproducible from rng_seed."""
    if n_c > n:
        raise ValueError(f"cannot select {n_c} seeds from {n} images")
    rng = np.random.default_rng(rng_seed)
    return np.sort(rng.choice(n, size=n_c, replace=False))
