"""Synthetic particle stacks and evaluation metrics.

Templates are sums of random Gaussian bumps confined to the inner disk and
band-limited at the working bandlimit; each image is a continuously rotated,
shifted (Gaussian, clipped), optionally mirrored template plus white noise
scaled to the requested SNR (mean template power / noise variance).
Per-image RNG streams are derived from (seed, image index), so generation is
deterministic regardless of evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from .em import apply_transform, mirror_image, rotate_image

__all__ = [
    "SyntheticSpec",
    "GroundTruth",
    "generate",
    "class_purity",
    "aligned_correlation",
    "fourier_ring_correlation",
]


@dataclass
class SyntheticSpec:
    n_templates: int = 4
    images_per_template: int = 100
    side: int = 64
    snr: float = 0.1
    shift_sigma: float = 1.0
    reflection_prob: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.snr <= 0:
            raise ValueError(f"snr must be positive, got {self.snr}")
        if not 0.0 <= self.reflection_prob <= 1.0:
            raise ValueError(f"reflection_prob must be in [0,1], got {self.reflection_prob}")

    @property
    def n_images(self) -> int:
        return self.n_templates * self.images_per_template


@dataclass
class GroundTruth:
    template_id: np.ndarray  # (n,)
    angle: np.ndarray        # (n,) radians
    dx: np.ndarray           # (n,) pixels
    dy: np.ndarray
    reflected: np.ndarray    # (n,) bool

    def save_tsv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("image_id\ttemplate_id\tangle_rad\tdx\tdy\treflected\n")
            for i in range(len(self.template_id)):
                fh.write(
                    f"{i}\t{self.template_id[i]}\t{self.angle[i]:.10f}\t"
                    f"{self.dx[i]:.6f}\t{self.dy[i]:.6f}\t{int(self.reflected[i])}\n"
                )


def _bandlimit(image: np.ndarray, bandlimit: float = 0.5) -> np.ndarray:
    side = image.shape[0]
    f = sfft.fftfreq(side)
    keep = f[:, None] ** 2 + f[None, :] ** 2 <= bandlimit**2
    return sfft.ifft2(sfft.fft2(image) * keep).real


def make_template(side: int, rng: np.random.Generator) -> np.ndarray:
    """A smooth blob: 5-15 Gaussian bumps inside radius 0.8*(side/2)."""
    ctr = (side - 1) / 2.0
    yy, xx = np.mgrid[0:side, 0:side]
    img = np.zeros((side, side))
    for _ in range(int(rng.integers(5, 16))):
        r0 = rng.uniform(0.0, 0.8 * (side / 2.0))
        a0 = rng.uniform(0.0, 2.0 * np.pi)
        cx = ctr + r0 * np.cos(a0)
        cy = ctr + r0 * np.sin(a0)
        width = rng.uniform(side / 20.0, side / 10.0)
        img += rng.uniform(0.5, 1.5) * np.exp(
            -((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * width**2)
        )
    return _bandlimit(img)


def generate(spec: SyntheticSpec):
    """Synthetic stack plus the exhaustive ground-truth table.

    Image i uses template i // images_per_template and RNG stream
    (rng_seed, i); composition order is shift(rotate(mirror(template))).
    """
    n = spec.n_images
    side = spec.side
    templates = [
        make_template(side, np.random.default_rng([spec.rng_seed, 10**9 + t]))
        for t in range(spec.n_templates)
    ]
    powers = [float((t**2).mean()) for t in templates]

    stack = np.empty((n, side, side), dtype=np.float32)
    tid = np.empty(n, dtype=int)
    angle = np.empty(n)
    dx = np.empty(n)
    dy = np.empty(n)
    refl = np.empty(n, dtype=bool)

    clip = 3.0 * spec.shift_sigma
    for i in range(n):
        rng = np.random.default_rng([spec.rng_seed, i])
        t = i // spec.images_per_template
        a = rng.uniform(0.0, 2.0 * np.pi)
        sx, sy = np.clip(rng.normal(0.0, spec.shift_sigma, size=2), -clip, clip)
        m = bool(rng.random() < spec.reflection_prob)
        base = mirror_image(templates[t]) if m else templates[t]
        clean = apply_transform(base, a, (sx, sy))
        noise_sigma = np.sqrt(powers[t] / spec.snr) if np.isfinite(spec.snr) else 0.0
        stack[i] = clean + rng.normal(0.0, noise_sigma, size=clean.shape)
        tid[i], angle[i], dx[i], dy[i], refl[i] = t, a, sx, sy, m

    truth = GroundTruth(template_id=tid, angle=angle, dx=dx, dy=dy, reflected=refl)
    return stack, truth


def class_purity(neighbor_table, truth: GroundTruth):
    """Fraction of non-seed class members sharing the seed's template id."""
    seeds = neighbor_table.seeds
    neighbors = neighbor_table.neighbors
    per_class = np.empty(len(seeds))
    for s, seed in enumerate(seeds):
        members = neighbors[s]
        others = members[members != seed]
        if len(others) == 0:
            per_class[s] = 1.0
            continue
        per_class[s] = float(
            np.mean(truth.template_id[others] == truth.template_id[seed])
        )
    return per_class, float(per_class.mean())


def aligned_correlation(
    estimate: np.ndarray,
    template: np.ndarray,
    n_rotations: int = 360,
    max_shift: int | None = None,
    try_reflection: bool = True,
) -> float:
    """Max normalized cross-correlation over rotations x shifts x reflection.

    Both images are globally mean-centered; shifts are circular lags found by
    FFT cross-correlation and restricted to the given radius.
    """
    est = np.asarray(estimate, dtype=np.float64)
    tmpl = np.asarray(template, dtype=np.float64)
    side = est.shape[0]
    if max_shift is None:
        max_shift = side // 8

    a = est - est.mean()
    na = np.linalg.norm(a)
    if na == 0:
        return 0.0
    fa = sfft.rfft2(a)

    # circular lags within the shift radius
    lag = sfft.fftfreq(side) * side
    keep = np.abs(lag) <= max_shift
    angles = np.arange(n_rotations) * (2.0 * np.pi / n_rotations)

    best = -1.0
    variants = [tmpl, mirror_image(tmpl)] if try_reflection else [tmpl]
    for var in variants:
        for alpha in angles:
            b = rotate_image(var, float(alpha))
            b -= b.mean()
            nb = np.linalg.norm(b)
            if nb == 0:
                continue
            cc = sfft.irfft2(fa * np.conj(sfft.rfft2(b)), s=(side, side))
            peak = cc[np.ix_(keep, keep)].max()
            best = max(best, peak / (na * nb))
    return float(np.clip(best, -1.0, 1.0))


def fourier_ring_correlation(a: np.ndarray, b: np.ndarray):
    """Normalized correlation per integer-radius frequency ring and the
    0.5-crossing frequency (cycles/pixel; NaN when the curve never crosses)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images must have equal shape")
    side = a.shape[0]
    fa = sfft.fft2(a)
    fb = sfft.fft2(b)

    idx = sfft.fftfreq(side) * side
    r = np.round(np.hypot(idx[:, None], idx[None, :])).astype(int).ravel()
    nrings = side // 2 + 1
    sel = r < nrings

    cross = np.bincount(r[sel], weights=(fa * np.conj(fb)).real.ravel()[sel], minlength=nrings)
    pa = np.bincount(r[sel], weights=(fa * np.conj(fa)).real.ravel()[sel], minlength=nrings)
    pb = np.bincount(r[sel], weights=(fb * np.conj(fb)).real.ravel()[sel], minlength=nrings)

    denom = np.sqrt(pa * pb)
    curve = np.divide(cross, denom, out=np.zeros(nrings), where=denom > 0)

    crossing = np.nan
    for ring in range(1, nrings):
        if curve[ring] < 0.5 <= curve[ring - 1]:
            frac = (curve[ring - 1] - 0.5) / (curve[ring - 1] - curve[ring])
            crossing = (ring - 1 + frac) / side
            break
    return curve, crossing
