"""Preprocessing: CTF phase-flipping, noise whitening, Fourier downsampling.

All operations are pure per-image linear maps; the pipeline applies them in
the fixed order phase-flip -> downsample -> whiten.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from .formats import CtfParams

__all__ = [
    "NoiseSpectrum",
    "electron_wavelength",
    "ctf_sign",
    "phase_flip",
    "estimate_noise_spectrum",
    "whiten",
    "fourier_downsample",
]

PSD_FLOOR_FRACTION = 1e-6


@dataclass
class NoiseSpectrum:
    """Radially averaged noise power per frequency bin (bins = ceil(side/2))."""

    radial_psd: np.ndarray  # strictly positive after floor clamping
    n_samples: np.ndarray   # Fourier pixels contributing per bin


def electron_wavelength(voltage_kv: float) -> float:
    """Relativistic electron wavelength in Angstrom for a voltage in kV."""
    from scipy import constants as con

    v = voltage_kv * 1e3
    num = con.h * con.c
    den = np.sqrt(con.e * v * (2 * con.m_e * con.c**2 + con.e * v))
    return num / den * 1e10


def ctf_sign(params: CtfParams, side: int, pixel_size: float) -> np.ndarray:
    """Sign of the weak-phase CTF on the (unshifted) 2-D FFT grid.

    CTF(s, phi) = -sqrt(1-w^2) sin(chi) - w cos(chi) with
    chi = pi*lambda*dz(phi)*s^2 - (pi/2)*Cs*lambda^3*s^4 + phase_shift and
    astigmatic defocus dz(phi).
    """
    lam = electron_wavelength(params.voltage)
    cs = params.spherical_aberration * 1e7  # mm -> Angstrom
    w = params.amplitude_contrast

    f = sfft.fftfreq(side, d=pixel_size)
    fx = f[None, :]
    fy = f[:, None]
    s2 = fx**2 + fy**2
    phi = np.arctan2(fy, fx)

    ang = np.deg2rad(params.astigmatism_angle)
    dz = 0.5 * (params.defocus_u + params.defocus_v) + 0.5 * (
        params.defocus_u - params.defocus_v
    ) * np.cos(2.0 * (phi - ang))

    chi = (
        np.pi * lam * dz * s2
        - 0.5 * np.pi * cs * lam**3 * s2**2
        + np.deg2rad(params.phase_shift)
    )
    ctf = -np.sqrt(1.0 - w**2) * np.sin(chi) - w * np.cos(chi)
    return np.where(ctf >= 0, 1.0, -1.0).astype(np.float64)


def ctf_radial(params: CtfParams, s: np.ndarray) -> np.ndarray:
    """CTF value along a radial frequency axis (zero astigmatism direction mix)."""
    lam = electron_wavelength(params.voltage)
    cs = params.spherical_aberration * 1e7
    w = params.amplitude_contrast
    dz = 0.5 * (params.defocus_u + params.defocus_v)
    chi = np.pi * lam * dz * s**2 - 0.5 * np.pi * cs * lam**3 * s**4 + np.deg2rad(
        params.phase_shift
    )
    return -np.sqrt(1.0 - w**2) * np.sin(chi) - w * np.cos(chi)


def _check_finite(image: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(image)):
        raise ValueError(f"{op}: image contains NaN or infinite pixels")


def phase_flip(image: np.ndarray, sign_grid: np.ndarray) -> np.ndarray:
    """Multiply the image spectrum by the CTF sign grid."""
    image = np.asarray(image)
    if image.shape != sign_grid.shape:
        raise ValueError(f"shape mismatch: image {image.shape} vs grid {sign_grid.shape}")
    _check_finite(image, "phase_flip")
    spec = sfft.fft2(image) * sign_grid
    out = sfft.ifft2(spec)
    resid = np.linalg.norm(out.imag) / max(np.linalg.norm(out.real), 1e-300)
    if resid > 1e-6:
        raise ValueError(f"phase_flip: imaginary residue {resid:.2e} exceeds 1e-6")
    return np.ascontiguousarray(out.real)


def _radius_grid(side: int) -> np.ndarray:
    # radius in frequency-pixel units on the unshifted FFT grid
    idx = sfft.fftfreq(side) * side
    return np.hypot(idx[:, None], idx[None, :])


def estimate_noise_spectrum(
    images: np.ndarray, particle_radius: float, max_images: int = 1000
) -> NoiseSpectrum:
    """Radially averaged periodogram of the corner pixels outside the particle disk.

    A uniformly strided subset of at most ``max_images`` images is used.
    The PSD is floor-clamped at PSD_FLOOR_FRACTION * max(PSD) so whitening
    never divides by ~zero.
    """
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    n, side, _ = images.shape
    if particle_radius >= side / 2:
        raise ValueError(
            f"particle radius {particle_radius} leaves no corner pixels at side {side}"
        )

    ctr = (side - 1) / 2.0
    yy, xx = np.mgrid[0:side, 0:side]
    mask = np.hypot(xx - ctr, yy - ctr) > particle_radius
    n_mask = int(mask.sum())

    take = np.unique(np.linspace(0, n - 1, min(n, max_images)).round().astype(int))
    psd2d = np.zeros((side, side))
    for i in take:
        img = images[i]
        _check_finite(img, "estimate_noise_spectrum")
        z = np.where(mask, img, 0.0)
        psd2d += np.abs(sfft.fft2(z)) ** 2
    psd2d /= len(take) * n_mask

    nbins = int(np.ceil(side / 2))
    rbin = np.minimum(np.round(_radius_grid(side)).astype(int), nbins - 1)
    counts = np.bincount(rbin.ravel(), minlength=nbins)
    sums = np.bincount(rbin.ravel(), weights=psd2d.ravel(), minlength=nbins)
    radial = sums / counts

    top = radial.max()
    if top <= 0:
        warnings.warn("noise spectrum is identically zero; clamping to a unit floor")
        radial = np.ones_like(radial)
    else:
        floor = PSD_FLOOR_FRACTION * top
        if (radial < floor).any():
            warnings.warn("noise spectrum has near-zero bins; clamping to floor")
        radial = np.maximum(radial, floor)

    return NoiseSpectrum(radial_psd=radial, n_samples=counts)


def whiten(image: np.ndarray, spectrum: NoiseSpectrum) -> np.ndarray:
    """Divide Fourier coefficients by sqrt(radial PSD), radially interpolated."""
    image = np.asarray(image)
    side = image.shape[0]
    psd = spectrum.radial_psd
    r = _radius_grid(side)
    filt = 1.0 / np.sqrt(np.interp(r, np.arange(len(psd)), psd))
    out = sfft.ifft2(sfft.fft2(image) * filt)
    return np.ascontiguousarray(out.real)


def fourier_downsample(image: np.ndarray, target_side: int) -> np.ndarray:
    """Central Fourier crop to target_side; the DC amplitude is preserved.

    For even sizes the unmatched Nyquist row/column is dropped by the
    symmetric crop about DC.
    """
    image = np.asarray(image)
    n = image.shape[0]
    m = int(target_side)
    if m > n:
        raise ValueError(f"target side {m} larger than source {n}")
    if m == n:
        return image.astype(np.float64, copy=True)
    spec = sfft.fftshift(sfft.fft2(image))
    start = n // 2 - m // 2
    block = spec[start:start + m, start:start + m]
    out = sfft.ifft2(sfft.ifftshift(block)) * (m / n) ** 2
    return np.ascontiguousarray(out.real)
