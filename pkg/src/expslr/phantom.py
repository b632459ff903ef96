"""Synthetic ground truth: exponential image series, coils, masks and noisy acquisition.

All generators are pure functions of their arguments.  Random streams are
derived per frame (and per coil) from the seed with ``SeedSequence`` entropy
lists, so the result does not depend on generation order.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .forward import AcquisitionOperator
from .volume import ComplexVolume, as_array, read_cser, write_cser


@dataclass(frozen=True)
class ParameterMaps:
    """Per-pixel amplitudes and T2 decay constants of ``l`` exponentials.

    Attributes
    ----------
    amplitude_maps : ndarray, complex, shape (l, p, q)
    t2_maps : ndarray, float, shape (l, p, q)
        Decay constants in milliseconds, strictly positive.
    delta_te : float
        Echo spacing in milliseconds.
    """

    amplitude_maps: np.ndarray
    t2_maps: np.ndarray
    delta_te: float

    def __post_init__(self):
        amp = np.asarray(self.amplitude_maps, dtype=np.complex128)
        t2 = np.asarray(self.t2_maps, dtype=np.float64)
        if amp.ndim == 2:
            amp = amp[None]
        if t2.ndim == 2:
            t2 = t2[None]
        if amp.shape != t2.shape:
            raise ValueError(f"amplitude maps {amp.shape} and T2 maps {t2.shape} differ in shape")
        if not np.all(t2 > 0):
            raise ValueError("T2 maps must be strictly positive")
        if not self.delta_te > 0:
            raise ValueError("delta_te must be positive")
        object.__setattr__(self, "amplitude_maps", amp)
        object.__setattr__(self, "t2_maps", t2)

    @property
    def l(self) -> int:
        return self.t2_maps.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.t2_maps.shape[1:]

    @property
    def betas(self) -> np.ndarray:
        return np.exp(-self.delta_te / self.t2_maps)

    def echo_times(self, t: int) -> list[float]:
        return [self.delta_te * (n + 1) for n in range(t)]


@dataclass(frozen=True)
class SamplingMaskSeries:
    mask: np.ndarray  # bool, (t, p, q)
    seed: int

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.mask.shape

    @property
    def fraction(self) -> float:
        return float(self.mask.mean())

    @property
    def acceleration(self) -> float:
        return float(self.mask.size / max(self.mask.sum(), 1))

    def as_volume(self) -> ComplexVolume:
        return ComplexVolume(self.mask.astype(np.float64))


@dataclass(frozen=True)
class CoilSet:
    maps: np.ndarray  # complex, (J, p, q)

    @property
    def j_coils(self) -> int:
        return self.maps.shape[0]

    def sum_of_squares(self) -> np.ndarray:
        return np.sum(np.abs(self.maps) ** 2, axis=0)


def synthesize_series(maps: ParameterMaps, t: int) -> ComplexVolume:
    """``rho[r, n] = sum_i alpha_i(r) beta_i(r)**n`` for ``n = 0 .. t-1``."""
    if t < 1:
        raise ValueError("t must be >= 1")
    n = np.arange(t)[:, None, None, None]
    terms = maps.amplitude_maps[None] * maps.betas[None] ** n
    return ComplexVolume(terms.sum(axis=1))


def _bump(yy, xx, cy, cx, width):
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width**2))


def _smooth_field(rng, p, q, n_bumps, amp_scale):
    """Sum of Gaussian bumps with widths in ``[p/8, p/4]`` and a known gradient bound."""
    yy, xx = np.mgrid[0:p, 0:q].astype(np.float64)
    out = np.zeros((p, q))
    slope = 0.0
    for _ in range(n_bumps):
        width = rng.uniform(min(p, q) / 8.0, min(p, q) / 4.0)
        cy, cx = rng.uniform(0, p), rng.uniform(0, q)
        amp = rng.uniform(-1.0, 1.0) * amp_scale
        out += amp * _bump(yy, xx, cy, cx, width)
        # max |grad| of a Gaussian bump is amp / (width * sqrt(e))
        slope += abs(amp) / (width * np.sqrt(np.e))
    return out, slope


def gaussian_blob_maps(p: int, q: int, l: int, seed: int, t2_range=(50.0, 200.0),
                       delta_te: float = 10.0) -> ParameterMaps:
    """Smooth T2 and amplitude maps for ``l`` exponential components.

    Component ``i`` takes its baseline T2 from the ``i``-th of ``l`` equal
    sub-bands of ``t2_range`` so that the components stay distinct; up to five
    Gaussian bumps are added and the result is clipped to ``t2_range``.  Bump
    amplitudes are scaled down when needed so that the per-pixel finite
    difference of every T2 map stays below a quarter of the range span.
    """
    lo, hi = (float(v) for v in t2_range)
    if not (0 < lo < hi):
        raise ValueError(f"invalid t2_range {t2_range!r}: need 0 < lo < hi")
    if p < 8 or q < 8:
        raise ValueError("p and q must be >= 8")
    if l < 1:
        raise ValueError("l must be >= 1")
    rng = np.random.default_rng(seed)
    span = hi - lo
    band = span / l
    t2 = np.empty((l, p, q))
    amp = np.empty((l, p, q))
    for i in range(l):
        base = lo + band * (i + rng.uniform(0.25, 0.75))
        n_bumps = int(rng.integers(2, 6))
        bumps, slope = _smooth_field(rng, p, q, n_bumps, band)
        if slope > span / 4:
            bumps *= (span / 4) / slope
        t2[i] = np.clip(base + bumps, lo, hi)

        field_, _ = _smooth_field(rng, p, q, int(rng.integers(2, 6)), 1.0)
        rngf = field_.max() - field_.min()
        norm = (field_ - field_.min()) / rngf if rngf > 0 else np.zeros_like(field_)
        amp[i] = 0.2 + 0.8 * norm
    return ParameterMaps(amp.astype(np.complex128), t2, delta_te)


def uniform_beta_maps(p: int, q: int, beta: float, seed: int, delta_te: float = 10.0) -> ParameterMaps:
    """Single exponential with a spatially constant base and random amplitudes."""
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    amp = rng.uniform(0.2, 1.0, (1, p, q)) * np.exp(1j * rng.uniform(-np.pi, np.pi, (1, p, q)))
    t2 = np.full((1, p, q), -delta_te / np.log(beta))
    return ParameterMaps(amp, t2, delta_te)


def coil_sensitivities(p: int, q: int, j_coils: int, seed: int) -> CoilSet:
    """Smooth complex coil maps, sum-of-squares normalised to one.

    Each coil is a broad Gaussian lobe centred just outside a distinct part of
    the image border, with a gentle linear phase.
    """
    if j_coils < 1:
        raise ValueError("j_coils must be >= 1")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:p, 0:q].astype(np.float64)
    maps = np.empty((j_coils, p, q), dtype=np.complex128)
    offset = rng.uniform(0, 2 * np.pi)
    for j in range(j_coils):
        theta = offset + 2 * np.pi * j / j_coils
        cy = (p - 1) / 2 + 0.6 * p * np.sin(theta)
        cx = (q - 1) / 2 + 0.6 * q * np.cos(theta)
        width = 0.45 * max(p, q)
        mag = _bump(yy, xx, cy, cx, width)
        ky, kx = rng.uniform(-1.0, 1.0, 2)
        phase = rng.uniform(-np.pi, np.pi) + 2 * np.pi * (ky * yy / p + kx * xx / q)
        maps[j] = mag * np.exp(1j * phase)
    sos = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return CoilSet(maps / sos[None])


def _frame_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *keys])


def mask_uniform_random(p: int, q: int, t: int, fraction: float, seed: int) -> SamplingMaskSeries:
    """Independent uniform random subsets of ``round(fraction*p*q)`` samples per frame."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    count = int(round(fraction * p * q))
    mask = np.zeros((t, p * q), dtype=bool)
    for n in range(t):
        idx = _frame_rng(seed, n).choice(p * q, size=count, replace=False)
        mask[n, idx] = True
    return SamplingMaskSeries(mask.reshape(t, p, q), seed)


def _centered_freq(n: int) -> np.ndarray:
    # signed frequency of each unshifted DFT index
    return np.fft.fftfreq(n) * n


def mask_cartesian_vd(p: int, q: int, t: int, cart_factor: int, vd_factor: float, seed: int,
                      max_tries: int = 20) -> SamplingMaskSeries:
    """Shifted uniform Cartesian lattice thinned by a Gaussian variable density.

    ``cart_factor=4`` keeps every second row and column (a 2x2 lattice),
    ``cart_factor=2`` every second row.  The lattice of each frame is shifted by
    0 or 1 along each undersampled direction.  With ``vd_factor > 1`` lattice
    points are kept with probability ``min(1, c * exp(-k^2 / (2 sigma^2)))``,
    ``sigma = n/4``, where ``c`` is calibrated so the expected acceleration is
    ``cart_factor * vd_factor``; the central 4x4 block of k-space is then
    always sampled.  Frames whose realised sample count misses the target by
    more than 5% are redrawn from the next stream (at most ``max_tries``).
    """
    if cart_factor not in (2, 4):
        raise ValueError(f"cart_factor must be 2 or 4, got {cart_factor}")
    if not vd_factor >= 1:
        raise ValueError(f"vd_factor must be >= 1, got {vd_factor}")
    fy, fx = _centered_freq(p), _centered_freq(q)
    density = np.exp(-(fy[:, None] ** 2) / (2 * (p / 4) ** 2) - (fx[None, :] ** 2) / (2 * (q / 4) ** 2))
    center = (np.abs(fy + 0.5)[:, None] <= 2) & (np.abs(fx + 0.5)[None, :] <= 2)
    target = p * q / (cart_factor * vd_factor)

    mask = np.zeros((t, p, q), dtype=bool)
    for n in range(t):
        rng = _frame_rng(seed, n)
        sy, sx = rng.integers(0, 2, size=2)
        lattice = np.zeros((p, q), dtype=bool)
        if cart_factor == 4:
            lattice[sy::2, sx::2] = True
        else:
            lattice[sy::2, :] = True
        if vd_factor == 1:
            mask[n] = lattice
            continue
        free = lattice & ~center
        need = target - center.sum()
        if need <= 0:
            mask[n] = center
            continue
        w = density[free]
        lo_c, hi_c = 0.0, 1.0
        while np.minimum(1.0, hi_c * w).sum() < need and hi_c < 1e12:
            hi_c *= 2
        for _ in range(100):
            mid = 0.5 * (lo_c + hi_c)
            if np.minimum(1.0, mid * w).sum() < need:
                lo_c = mid
            else:
                hi_c = mid
        prob = np.minimum(1.0, hi_c * w)
        for attempt in range(max_tries):
            keep = rng.random(prob.shape) < prob
            if abs(keep.sum() + center.sum() - target) <= 0.05 * target:
                break
        frame = center.copy()
        frame[free] = keep
        mask[n] = frame
    return SamplingMaskSeries(mask, seed)


@dataclass
class Measurements:
    """Masked multi-coil k-space ``(J, t, p, q)``; unsampled entries are zero."""

    kspace: np.ndarray
    mask: np.ndarray
    noise_sigma: float = 0.0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_coils(self) -> int:
        return self.kspace.shape[0]

    def samples(self) -> tuple[np.ndarray, np.ndarray]:
        """Sampled values and their ``(coil, frame, ky, kx)`` indices."""
        full = np.broadcast_to(self.mask[None], self.kspace.shape)
        idx = np.argwhere(full)
        return self.kspace[full], idx

    def save(self, directory, coils: CoilSet | None = None) -> None:
        os.makedirs(directory, exist_ok=True)
        for j in range(self.n_coils):
            write_cser(self.kspace[j], os.path.join(directory, f"kspace_c{j:02d}.cser"))
        write_cser(self.mask.astype(np.float64), os.path.join(directory, "mask.cser"))
        sidecar = {
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "coils": self.n_coils,
            "acceleration": float(self.mask.size / max(self.mask.sum(), 1)),
        }
        sidecar.update(self.meta)
        with open(os.path.join(directory, "acquisition.json"), "w") as fh:
            json.dump(sidecar, fh, indent=2)

    @classmethod
    def load(cls, directory) -> "Measurements":
        with open(os.path.join(directory, "acquisition.json")) as fh:
            sidecar = json.load(fh)
        n_coils = int(sidecar["coils"])
        kspace = np.stack([as_array(read_cser(os.path.join(directory, f"kspace_c{j:02d}.cser")))
                           for j in range(n_coils)])
        mask = as_array(read_cser(os.path.join(directory, "mask.cser"))) != 0
        if mask.shape != kspace.shape[1:]:
            raise ValueError(f"mask shape {mask.shape} does not match k-space frames {kspace.shape[1:]}")
        meta = {k: v for k, v in sidecar.items() if k not in ("noise_sigma", "seed", "coils", "acceleration")}
        return cls(kspace, mask, float(sidecar["noise_sigma"]), int(sidecar["seed"]), meta)


def acquire(truth, coils: CoilSet | None, masks: SamplingMaskSeries, noise_sigma: float,
            seed: int) -> Measurements:
    """Simulate ``b_ij = S_i F (C_j * rho_i) + eta_ij`` from an image-domain series.

    ``eta`` is circular complex white Gaussian noise with total variance
    ``noise_sigma**2`` per sample, added at sampled locations only.
    """
    img = as_array(truth)
    mask = masks.mask if isinstance(masks, SamplingMaskSeries) else np.asarray(masks, dtype=bool)
    if img.shape != mask.shape:
        raise ValueError(f"truth shape {img.shape} does not match mask shape {mask.shape}")
    maps = None if coils is None else coils.maps
    op = AcquisitionOperator(mask, maps)
    if maps is None:
        # a single unit coil: the masked DFT itself, without a round trip
        b = (np.fft.fft2(img, axes=(-2, -1), norm="ortho") * mask)[None]
    else:
        b = op.apply(np.fft.fft2(img, axes=(-2, -1), norm="ortho"))
    if noise_sigma > 0:
        std = noise_sigma / np.sqrt(2.0)
        for j in range(op.n_coils):
            for n in range(mask.shape[0]):
                rng = _frame_rng(seed, n, j)
                sel = mask[n]
                k = int(sel.sum())
                eta = rng.standard_normal(k) + 1j * rng.standard_normal(k)
                b[j, n][sel] += std * eta
    return Measurements(b, mask.copy(), float(noise_sigma), int(seed))
