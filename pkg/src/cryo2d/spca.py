"""Steerable (Fourier-Bessel) image expansion with per-frequency PCA compression.

Images are expanded on the inscribed disk in the basis
psi_{k,q}(r, theta) = N_{k,q} J_k(R_{k,q} r/R) exp(i k theta), with the
admission rule R_{k,q} <= 2*pi*c*R (c = bandlimit, R = support radius).
Coefficients are stored for k >= 0 only (negative frequencies are the
conjugates for real images). Per-k PCA rotations are real, so an in-plane
rotation acts on the compressed coefficients as exp(-i*k*alpha) and a
reflection acts as complex conjugation, both exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.special as spl

__all__ = [
    "SteerableBasis",
    "SteerableCoeffs",
    "build_basis",
    "expand",
    "reconstruct",
    "steer",
    "reflect",
]

_RIDGE = 1e-10  # Tikhonov factor on the expansion Gram, relative to mean diagonal


@dataclass
class SteerableCoeffs:
    """Per-image compressed coefficient vectors with their angular frequencies."""

    coeffs: np.ndarray     # (n_images, n_coeffs) complex
    freqs: np.ndarray      # (n_coeffs,) int, angular frequency of each entry
    residuals: np.ndarray  # (n_images,) relative full-basis fit residual

    @property
    def n_images(self) -> int:
        return self.coeffs.shape[0]


@dataclass
class SteerableBasis:
    side: int
    bandlimit: float
    support_radius: float
    component_freqs: np.ndarray  # (n_raw,) k of every admitted (k, q) pair
    component_roots: np.ndarray  # (n_raw,) Bessel zero R_{k,q}
    mask: np.ndarray             # boolean disk support on the side x side frame
    design: np.ndarray           # (n_disk_pixels, n_real_columns) sampled basis
    cos_col: np.ndarray          # real-column index of the cosine part per raw comp
    sin_col: np.ndarray          # sine part (-1 for k = 0)
    cho: tuple                   # Cholesky factor of the regularized Gram
    ridge: float
    pca_rotations: dict = field(default_factory=dict)  # k -> (q_k, q_k) real orthogonal
    pca_eigvals: dict = field(default_factory=dict)    # k -> (q_k,) descending
    kept: np.ndarray = None      # (n_coeffs, 2) rows (k, rotated-component index)
    freq_vector: np.ndarray = None  # (n_coeffs,) k per kept coefficient

    @property
    def n_components(self) -> int:
        """Number of complex components before truncation (sum_k q_k)."""
        return len(self.component_freqs)

    @property
    def n_coeffs(self) -> int:
        return len(self.freq_vector)


def _fb_components(side: int, bandlimit: float):
    """All (k, q) pairs admitted by the Bessel-zero criterion, k >= 0."""
    radius = side // 2
    cap = 2.0 * np.pi * bandlimit * radius
    freqs, roots = [], []
    k = 0
    while True:
        nmax = max(8, int(cap / np.pi) + 2)
        zeros = spl.jn_zeros(k, nmax)
        zeros = zeros[zeros <= cap]
        if len(zeros) == 0:
            break
        freqs.extend([k] * len(zeros))
        roots.extend(zeros.tolist())
        k += 1
    return np.asarray(freqs, dtype=int), np.asarray(roots), float(radius)


def build_basis(
    side: int,
    bandlimit: float = 0.5,
    images: np.ndarray | None = None,
    n_coeffs: int = 500,
    max_sample: int = 20000,
) -> SteerableBasis:
    """Construct the Fourier-Bessel basis and its data-driven PCA compression.

    When ``images`` is given, a uniformly strided subset of at most
    ``max_sample`` of them drives the per-frequency PCA; components are then
    ranked globally by eigenvalue and the top ``n_coeffs`` kept. Without
    images the components are ranked by Bessel root (lowest frequency first)
    with identity rotations.
    """
    if side < 16:
        raise ValueError(f"side must be >= 16, got {side}")
    freqs, roots, radius = _fb_components(side, bandlimit)

    ctr = (side - 1) / 2.0
    yy, xx = np.mgrid[0:side, 0:side]
    x = xx - ctr
    y = yy - ctr
    rad = np.hypot(x, y)
    mask = rad <= radius
    theta = np.arctan2(y[mask], x[mask])
    rr = rad[mask] / radius

    n_raw = len(freqs)
    ncols = int(np.sum(np.where(freqs == 0, 1, 2)))
    design = np.empty((int(mask.sum()), ncols))
    cos_col = np.empty(n_raw, dtype=int)
    sin_col = np.full(n_raw, -1, dtype=int)
    col = 0
    for i in range(n_raw):
        k, root = int(freqs[i]), roots[i]
        radial = spl.jv(k, root * rr)
        norm = 1.0 / (np.sqrt(np.pi) * radius * abs(spl.jv(k + 1, root)))
        if k == 0:
            design[:, col] = norm * radial
            cos_col[i] = col
            col += 1
        else:
            design[:, col] = norm * np.sqrt(2.0) * radial * np.cos(k * theta)
            design[:, col + 1] = norm * np.sqrt(2.0) * radial * np.sin(k * theta)
            cos_col[i] = col
            sin_col[i] = col + 1
            col += 2

    gram = design.T @ design
    ridge = _RIDGE * np.trace(gram) / ncols
    gram[np.diag_indices_from(gram)] += ridge
    cho = sla.cho_factor(gram, lower=True)

    basis = SteerableBasis(
        side=side,
        bandlimit=bandlimit,
        support_radius=radius,
        component_freqs=freqs,
        component_roots=roots,
        mask=mask,
        design=design,
        cos_col=cos_col,
        sin_col=sin_col,
        cho=cho,
        ridge=ridge,
    )

    if images is not None:
        images = np.asarray(images)
        if images.ndim == 2:
            images = images[None]
        take = np.unique(
            np.linspace(0, len(images) - 1, min(len(images), max_sample)).round().astype(int)
        )
        raw = _expand_raw(images[take], basis)[0]
        _fit_pca(basis, raw)
    else:
        for k in np.unique(freqs):
            q_k = int(np.sum(freqs == k))
            basis.pca_rotations[int(k)] = np.eye(q_k)
            basis.pca_eigvals[int(k)] = -roots[freqs == k]  # rank by root, ascending
    _select_components(basis, n_coeffs)
    return basis


def _expand_raw(images: np.ndarray, basis: SteerableBasis, chunk: int = 2048):
    """Regularized least-squares raw (pre-PCA) coefficients plus fit residuals."""
    n = images.shape[0]
    n_raw = basis.n_components
    out = np.empty((n, n_raw), dtype=complex)
    residuals = np.empty(n)
    k0 = basis.component_freqs == 0
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        block = images[lo:hi]
        if not np.all(np.isfinite(block)):
            raise ValueError("expand: images contain NaN or infinite pixels")
        b = block[:, basis.mask].T.astype(np.float64)        # (npix, m)
        t = basis.design.T @ b                               # (ncols, m)
        c = sla.cho_solve(basis.cho, t)                      # (ncols, m)
        # exact residual of the regularized LS fit, no reconstruction needed
        bnorm2 = np.einsum("ij,ij->j", b, b)
        fit2 = np.einsum("ij,ij->j", c, t) + basis.ridge * np.einsum("ij,ij->j", c, c)
        res2 = np.maximum(bnorm2 - fit2, 0.0)
        residuals[lo:hi] = np.sqrt(res2 / np.maximum(bnorm2, 1e-300))
        a = np.empty((n_raw, hi - lo), dtype=complex)
        a[k0] = c[basis.cos_col[k0]]
        a[~k0] = (c[basis.cos_col[~k0]] - 1j * c[basis.sin_col[~k0]]) / np.sqrt(2.0)
        out[lo:hi] = a.T
    return out, residuals


def _fit_pca(basis: SteerableBasis, raw: np.ndarray) -> None:
    """Per-frequency PCA from the second-moment matrix of the sample.

    The moment matrix is symmetrized to its real part (the distribution of a
    reflection-balanced data set), which keeps the rotations real so that
    conjugation still implements reflection exactly on rotated coefficients.
    """
    n_sample = raw.shape[0]
    q_max = int(np.max(np.bincount(basis.component_freqs)))
    if n_sample < 10 * q_max:
        warnings.warn(
            f"PCA sample of {n_sample} images is small for q_max={q_max}; "
            "applying diagonal shrinkage"
        )
        shrink = 0.1
    else:
        shrink = 0.0
    for k in np.unique(basis.component_freqs):
        sel = basis.component_freqs == k
        a = raw[:, sel]
        moment = (a.conj().T @ a).real / n_sample
        if shrink > 0:
            moment = (1 - shrink) * moment
            moment[np.diag_indices_from(moment)] += shrink * np.trace(moment) / len(moment)
        vals, vecs = np.linalg.eigh(moment)
        order = np.argsort(vals)[::-1]
        basis.pca_eigvals[int(k)] = vals[order]
        basis.pca_rotations[int(k)] = vecs[:, order]


def _select_components(basis: SteerableBasis, n_coeffs: int) -> None:
    rows = []
    for k, vals in basis.pca_eigvals.items():
        for j, lam in enumerate(vals):
            rows.append((lam, k, j))
    rows.sort(key=lambda r: (-r[0], r[1], r[2]))
    keep = rows[: min(n_coeffs, len(rows))]
    basis.kept = np.array([(k, j) for _, k, j in keep], dtype=int)
    basis.freq_vector = basis.kept[:, 0].copy()


def _rotate_and_keep(basis: SteerableBasis, raw: np.ndarray) -> np.ndarray:
    n = raw.shape[0]
    out = np.empty((n, len(basis.kept)), dtype=complex)
    for k in np.unique(basis.freq_vector):
        sel = basis.component_freqs == k
        rotated = raw[:, sel] @ basis.pca_rotations[int(k)]
        cols = basis.kept[:, 0] == k
        out[:, cols] = rotated[:, basis.kept[cols, 1]]
    return out


def expand(images: np.ndarray, basis: SteerableBasis) -> SteerableCoeffs:
    """Project images onto the compressed steerable basis."""
    images = np.asarray(images)
    single = images.ndim == 2
    if single:
        images = images[None]
    if images.shape[1] != basis.side:
        raise ValueError(
            f"image side {images.shape[1]} does not match basis side {basis.side}"
        )
    raw, residuals = _expand_raw(images, basis)
    coeffs = _rotate_and_keep(basis, raw)
    return SteerableCoeffs(coeffs=coeffs, freqs=basis.freq_vector.copy(), residuals=residuals)


def reconstruct(coeffs: SteerableCoeffs, basis: SteerableBasis) -> np.ndarray:
    """Images synthesized from the kept coefficients; zero outside the disk."""
    c = np.atleast_2d(coeffs.coeffs)
    n = c.shape[0]
    raw = np.zeros((n, basis.n_components), dtype=complex)
    for k in np.unique(basis.freq_vector):
        sel = basis.component_freqs == k
        rot = basis.pca_rotations[int(k)]
        cols = basis.kept[:, 0] == k
        full = np.zeros((n, int(sel.sum())), dtype=complex)
        full[:, basis.kept[cols, 1]] = c[:, cols]
        raw[:, sel] = full @ rot.T
    creal = np.zeros((basis.design.shape[1], n))
    k0 = basis.component_freqs == 0
    creal[basis.cos_col[k0]] = raw[:, k0].real.T
    creal[basis.cos_col[~k0]] = np.sqrt(2.0) * raw[:, ~k0].real.T
    creal[basis.sin_col[~k0]] = -np.sqrt(2.0) * raw[:, ~k0].imag.T
    disk = basis.design @ creal
    out = np.zeros((n, basis.side, basis.side))
    out[:, basis.mask] = disk.T
    return out


def steer(coeffs: SteerableCoeffs, alpha: float) -> SteerableCoeffs:
    """Rotate by alpha radians: entrywise phase shift exp(-i*k*alpha)."""
    phase = np.exp(-1j * coeffs.freqs * alpha)
    return SteerableCoeffs(
        coeffs=coeffs.coeffs * phase,
        freqs=coeffs.freqs,
        residuals=coeffs.residuals,
    )


def reflect(coeffs: SteerableCoeffs) -> SteerableCoeffs:
    """Mirror the underlying images: entrywise complex conjugation."""
    return SteerableCoeffs(
        coeffs=np.conj(coeffs.coeffs),
        freqs=coeffs.freqs,
        residuals=coeffs.residuals,
    )
