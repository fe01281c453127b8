"""Per-class expectation-maximization over rotations and translations.

The generative model is I_i = L_t X + noise with L_t a rotation (bilinear,
about the geometric center) followed by a circular Fourier shift. The E-step
evaluates all grid transforms of the current estimate against each member
through FFT cross-correlation, with log-sum-exp stabilization; the M-step
back-transforms the members under the responsibility weights. The noise
variance and the transform prior are re-estimated every iteration.

The rotation convention matches the steerable coefficients: rotating an
image by alpha multiplies its coefficients by exp(-i*k*alpha).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft
import scipy.ndimage as ndi
from scipy.special import logsumexp

__all__ = [
    "TransformGrid",
    "EmState",
    "ClassAverage",
    "rotate_image",
    "mirror_image",
    "apply_transform",
    "align_members",
    "em_init",
    "em_iterate",
    "run_em",
]

SIGMA2_FLOOR_FRACTION = 1e-8


def rotate_image(image: np.ndarray, alpha: float) -> np.ndarray:
    """Rotate by alpha radians about the geometric center (bilinear).

    Matches steering: expand(rotate_image(I, a)) ~ steer(expand(I), a).
    """
    if alpha == 0.0:
        return np.array(image, dtype=np.float64, copy=True)
    return ndi.rotate(
        np.asarray(image, dtype=np.float64), -np.degrees(alpha), reshape=False, order=1
    )


def mirror_image(image: np.ndarray) -> np.ndarray:
    """Mirror about the horizontal axis (y -> -y); matches coefficient conjugation."""
    return np.asarray(image)[::-1, :].copy()


def _shift_phases(side: int, shifts: np.ndarray) -> np.ndarray:
    """exp(+2*pi*i*(fx*dx + fy*dy)) on the rfft2 half grid, one column per shift."""
    fy = sfft.fftfreq(side)[:, None]
    fx = sfft.rfftfreq(side)[None, :]
    grid = np.empty((side * (side // 2 + 1), len(shifts)), dtype=complex)
    for s, (dx, dy) in enumerate(shifts):
        grid[:, s] = np.exp(2j * np.pi * (fx * dx + fy * dy)).ravel()
    return grid


def _halfplane_weights(side: int) -> np.ndarray:
    """Multiplicity of each rfft2 bin in the full-plane sum (1 or 2)."""
    ncol = side // 2 + 1
    w = np.full((side, ncol), 2.0)
    w[:, 0] = 1.0
    if side % 2 == 0:
        w[:, -1] = 1.0
    return w.ravel()


def apply_transform(image: np.ndarray, rotation: float, shift=(0.0, 0.0)) -> np.ndarray:
    """Rotate about the center, then shift (dx, dy) circularly in Fourier space."""
    out = rotate_image(image, rotation)
    dx, dy = float(shift[0]), float(shift[1])
    if dx == 0.0 and dy == 0.0:
        return out
    side = out.shape[0]
    fy = sfft.fftfreq(side)[:, None]
    fx = sfft.rfftfreq(side)[None, :]
    phase = np.exp(-2j * np.pi * (fx * dx + fy * dy))
    return sfft.irfft2(sfft.rfft2(out) * phase, s=out.shape)


@dataclass
class TransformGrid:
    """Rotation x integer-shift search grid with a prior over grid points."""

    rotations: np.ndarray  # (R,) radians, uniform over [0, 2*pi)
    shifts: np.ndarray     # (S, 2) integer (dx, dy) offsets within the max radius
    prior: np.ndarray      # (R, S), sums to 1

    @classmethod
    def make(cls, n_rotations: int = 72, max_shift: int = 4) -> "TransformGrid":
        rotations = np.arange(n_rotations) * (2.0 * np.pi / n_rotations)
        span = np.arange(-max_shift, max_shift + 1)
        dx, dy = np.meshgrid(span, span)
        keep = dx**2 + dy**2 <= max_shift**2
        shifts = np.stack([dx[keep], dy[keep]], axis=1)
        prior = np.full((n_rotations, len(shifts)), 1.0)
        prior /= prior.sum()
        return cls(rotations=rotations, shifts=shifts, prior=prior)


@dataclass
class EmState:
    X: np.ndarray
    sigma2: float
    iteration: int = 0
    log_likelihood: float | None = None
    prior: np.ndarray | None = None
    resp_entropy: float | None = None


@dataclass
class ClassAverage:
    image: np.ndarray
    sigma2: float
    log_likelihood: float | None
    ll_history: list = field(default_factory=list)
    resp_entropy: float | None = None
    n_iter: int = 0


def align_members(members: np.ndarray, rel_angles, reflection_flags) -> np.ndarray:
    """Mirror flagged members, then counter-rotate each by its pair angle.

    A pair estimate (theta, refl) means steer(seed, theta) matches the member
    (mirrored first if refl), so rotating the (mirrored) member by -theta
    brings it into the seed frame.
    """
    members = np.asarray(members, dtype=np.float64)
    rel_angles = np.zeros(len(members)) if rel_angles is None else np.asarray(rel_angles)
    if reflection_flags is None:
        reflection_flags = np.zeros(len(members), dtype=bool)
    out = np.empty_like(members)
    for i, img in enumerate(members):
        work = mirror_image(img) if reflection_flags[i] else img
        out[i] = rotate_image(work, -float(rel_angles[i]))
    return out


def em_init(members: np.ndarray, rel_angles=None, reflection_flags=None) -> EmState:
    """Initial estimate: pixelwise mean of the aligned members.

    The noise variance comes from the corner pixels (outside the inscribed
    disk) of the raw members, where alignment artifacts cannot bias it.
    """
    members = np.asarray(members, dtype=np.float64)
    aligned = align_members(members, rel_angles, reflection_flags)
    x0 = aligned.mean(axis=0)

    side = members.shape[1]
    ctr = (side - 1) / 2.0
    yy, xx = np.mgrid[0:side, 0:side]
    corner = np.hypot(xx - ctr, yy - ctr) > side / 2.0
    sigma2 = float(members[:, corner].var())
    if sigma2 == 0.0:
        sigma2 = max(float(members.var()), 1e-12)
    return EmState(X=x0, sigma2=sigma2, iteration=0)


def _rotation_stack(x: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    return np.stack([rotate_image(x, float(a)) for a in rotations])


def _shift_correlations(member_ffts, template_fft, phases, weights, npix):
    """<I_i, shift_s(Y)> for all members and all grid shifts of one rotation."""
    prod = member_ffts * np.conj(template_fft)[None, :]
    return ((prod * weights[None, :]) @ phases).real / npix


def em_iterate(state: EmState, members: np.ndarray, grid: TransformGrid) -> EmState:
    """One EM sweep; the returned log-likelihood is the marginal objective of
    the parameters this iteration started from."""
    members = np.asarray(members, dtype=np.float64)
    k, side, _ = members.shape
    npix = side * side
    n_rot = len(grid.rotations)
    n_shift = len(grid.shifts)

    prior = grid.prior if state.prior is None else state.prior
    sigma2 = state.sigma2

    member_ffts = sfft.rfft2(members).reshape(k, -1)
    member_norm2 = np.einsum("ixy,ixy->i", members, members)

    templates = _rotation_stack(state.X, grid.rotations)
    template_ffts = sfft.rfft2(templates).reshape(n_rot, -1)
    template_norm2 = np.einsum("rxy,rxy->r", templates, templates)

    phases = _shift_phases(side, grid.shifts)
    weights = _halfplane_weights(side)

    dist2 = np.empty((k, n_rot, n_shift))
    for r in range(n_rot):
        c = _shift_correlations(member_ffts, template_ffts[r], phases, weights, npix)
        dist2[:, r, :] = member_norm2[:, None] + template_norm2[r] - 2.0 * c
    np.maximum(dist2, 0.0, out=dist2)

    with np.errstate(divide="ignore"):
        log_prior = np.log(prior)
    loggamma = log_prior[None, :, :] - dist2 / (2.0 * sigma2)
    flat = loggamma.reshape(k, -1)
    lse = logsumexp(flat, axis=1)
    log_likelihood = float(lse.sum() - 0.5 * k * npix * np.log(2.0 * np.pi * sigma2))
    gamma = np.exp(flat - lse[:, None]).reshape(k, n_rot, n_shift)

    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(gamma > 0, gamma * np.log(gamma), 0.0)
    resp_entropy = float(-ent.sum() / k)

    # M-step: X <- sum_{i,t} gamma * L_t^{-1} I_i / sum gamma (denominator = k)
    x_new = np.zeros((side, side))
    for r in range(n_rot):
        kernel = gamma[:, r, :] @ phases.T                   # (k, nfreq)
        acc = (member_ffts * kernel).sum(axis=0)
        z = sfft.irfft2(acc.reshape(side, side // 2 + 1), s=(side, side))
        x_new += rotate_image(z, -float(grid.rotations[r]))
    x_new /= k

    sigma2_new = float((gamma * dist2).sum() / (k * npix))
    floor = SIGMA2_FLOOR_FRACTION * float(member_norm2.mean()) / npix
    if sigma2_new < floor:
        warnings.warn(f"noise variance collapsed to {sigma2_new:.3e}; flooring at {floor:.3e}")
        sigma2_new = floor
    prior_new = gamma.mean(axis=0)

    return EmState(
        X=x_new,
        sigma2=sigma2_new,
        iteration=state.iteration + 1,
        log_likelihood=log_likelihood,
        prior=prior_new,
        resp_entropy=resp_entropy,
    )


def run_em(
    members: np.ndarray,
    rel_angles=None,
    reflection_flags=None,
    n_iter: int = 7,
    n_rotations: int = 72,
    max_shift: int = 4,
) -> ClassAverage:
    """Initialize from the pair estimates and run n_iter EM sweeps."""
    members = np.asarray(members, dtype=np.float64)
    aligned = align_members(members, rel_angles, reflection_flags)
    state = em_init(members, rel_angles, reflection_flags)
    grid = TransformGrid.make(n_rotations=n_rotations, max_shift=max_shift)

    history = []
    for _ in range(n_iter):
        state = em_iterate(state, aligned, grid)
        history.append(state.log_likelihood)

    return ClassAverage(
        image=state.X,
        sigma2=state.sigma2,
        log_likelihood=state.log_likelihood,
        ll_history=history,
        resp_entropy=state.resp_entropy,
        n_iter=n_iter,
    )
