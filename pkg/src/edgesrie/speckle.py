"""B-mode speckle simulator and blur/contrast degradation generator.

Pipeline: tissue echogenicity map (linear amplitude) -> multiply by iid
Gaussian white noise (the scatterer field) -> convolve with a separable
point-spread function -> per-column envelope detection via the analytic
signal -> log compression to a fixed dynamic range.

The PSF is a lateral Gaussian times an axially Gaussian-modulated cosine:

    k(x, z) = exp(-x^2 / 2 sigma_x^2) * exp(-z^2 / 2 sigma_z^2) * cos(2 pi f0 z)

with f0 chosen so `cycles` full carrier periods span [-2 sigma_z, +2 sigma_z].
Support is truncated at +-3 sigma per axis (half-width ceil(3 sigma), so
dimensions are odd) and the peak magnitude is normalized to 1.

All randomness comes from the deterministic counter-mode stream in
:mod:`edgesrie.rng`; identical configs give bit-identical images on any
machine or thread count. Realization i of a set derives its stream from
``seed XOR i`` and first draws two uniform factors in [0.8, 1.25] that
jitter sigma_x and sigma_z, then the scatterer noise, so realizations are
independent and individually reproducible.
"""

from __future__ import annotations

import concurrent.futures
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage, signal

from .errors import ConfigError, ImageTooSmall
from .image import Domain, Image, to_decibel
from .rng import Stream

JITTER_LO = 0.8
JITTER_HI = 1.25


@dataclass(frozen=True)
class SpeckleSimConfig:
    sigma_x: float = 2.0
    sigma_z: float = 1.2
    cycles: float = 3.0
    noise_std: float = 1.0
    seed: int = 0
    floor_db: float = -55.0

    def __post_init__(self):
        if self.sigma_x <= 0 or self.sigma_z <= 0:
            raise ConfigError("sigma_x and sigma_z must be > 0")
        if self.cycles < 1:
            raise ConfigError("cycles must be >= 1")
        if self.noise_std <= 0:
            raise ConfigError("noise_std must be > 0")
        if self.floor_db >= 0:
            raise ConfigError("floor_db must be negative")


@dataclass(frozen=True)
class BlurConfig:
    blur_sigma_range: tuple = (0.8, 2.0)
    narrow_alpha_range: tuple = (0.5, 0.9)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.blur_sigma_range
        if not (0 < lo <= hi):
            raise ConfigError("blur_sigma_range must satisfy 0 < lo <= hi")
        lo, hi = self.narrow_alpha_range
        if not (0 < lo <= hi <= 1):
            raise ConfigError("narrow_alpha_range must lie in (0, 1]")


def _axis(sigma: float) -> np.ndarray:
    half = math.ceil(3.0 * sigma)
    return np.arange(-half, half + 1, dtype=np.float64)


def build_psf(cfg: SpeckleSimConfig) -> np.ndarray:
    """Separable PSF sampled on the pixel grid, peak-normalized, odd dims."""
    x = _axis(cfg.sigma_x)
    z = _axis(cfg.sigma_z)
    lateral = np.exp(-(x**2) / (2.0 * cfg.sigma_x**2))
    f0 = cfg.cycles / (4.0 * cfg.sigma_z)
    axial = np.exp(-(z**2) / (2.0 * cfg.sigma_z**2)) * np.cos(2.0 * np.pi * f0 * z)
    kernel = axial[:, None] * lateral[None, :]
    return kernel / np.abs(kernel).max()


def scatter_field(echo: Image, noise_std: float, seed: int) -> np.ndarray:
    """echo * iid N(0, noise_std^2), drawn row-major from stream `seed`.

    Returns a signed float64 array (not an Image: amplitudes carry sign).
    """
    if echo.domain is not Domain.LINEAR:
        raise ConfigError("scatter_field expects a LINEAR echogenicity map")
    noise = Stream(seed).normal(echo.data.size, noise_std).reshape(echo.data.shape)
    return echo.data.astype(np.float64) * noise


def _envelope(rf: np.ndarray) -> np.ndarray:
    """Per-column analytic-signal magnitude.

    Columns are zero-padded to the next power of two before the frequency
    domain transform; the pad is cropped after inversion.
    """
    h = rf.shape[0]
    n = 1 << max(h - 1, 1).bit_length()
    analytic = signal.hilbert(rf, N=n, axis=0)[:h]
    return np.abs(analytic)


def _simulate(echo: Image, cfg: SpeckleSimConfig, stream: Stream) -> Image:
    psf = build_psf(cfg)
    if echo.height < psf.shape[0]:
        raise ImageTooSmall(
            f"image height {echo.height} < axial PSF support {psf.shape[0]}"
        )
    noise = stream.normal(echo.data.size, cfg.noise_std).reshape(echo.data.shape)
    scatter = echo.data.astype(np.float64) * noise
    rf = signal.convolve2d(scatter, psf, mode="same", boundary="fill", fillvalue=0.0)
    env = Image(_envelope(rf), Domain.LINEAR, echo.dx, echo.dz)
    return to_decibel(env, cfg.floor_db)


def simulate_bmode(echo: Image, cfg: SpeckleSimConfig) -> Image:
    """One speckle realization of an echogenicity map, log-compressed to dB."""
    return _simulate(echo, cfg, Stream(cfg.seed))


def _one_realization(echo: Image, cfg: SpeckleSimConfig, i: int) -> Image:
    stream = Stream(cfg.seed ^ i)
    jittered = replace(
        cfg,
        sigma_x=cfg.sigma_x * stream.uniform(JITTER_LO, JITTER_HI),
        sigma_z=cfg.sigma_z * stream.uniform(JITTER_LO, JITTER_HI),
    )
    return _simulate(echo, jittered, stream)


def make_realizations(echo: Image, cfg: SpeckleSimConfig, k: int, threads: int = 1) -> list[Image]:
    """k independent speckle realizations of one echogenicity map.

    Realization i is fully determined by ``cfg.seed XOR i``; the list is
    ordered by i and independent of `threads`.
    """
    if k < 2:
        raise ConfigError(f"need at least 2 realizations, got {k}")
    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_one_realization, echo, cfg, i) for i in range(k)]
            return [f.result() for f in futures]
    return [_one_realization(echo, cfg, i) for i in range(k)]


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Sampled Gaussian with support +-3 sigma, normalized to sum 1."""
    t = _axis(sigma)
    g = np.exp(-(t**2) / (2.0 * sigma**2))
    return g / g.sum()


def degrade(img: Image, cfg: BlurConfig) -> Image:
    """Blur and histogram-narrow a display image (training degradation).

    Draws sigma_b from blur_sigma_range then alpha from narrow_alpha_range,
    convolves with a normalized Gaussian (reflect padding), then contracts
    values about the blurred mean: v <- mu + alpha*(v - mu), clamped to
    [0, 255].
    """
    if img.domain is not Domain.DISPLAY8:
        raise ConfigError("degrade expects a DISPLAY8 image")
    stream = Stream(cfg.seed)
    sigma_b = stream.uniform(*cfg.blur_sigma_range)
    alpha = stream.uniform(*cfg.narrow_alpha_range)
    g = gaussian_kernel1d(sigma_b)
    blurred = ndimage.correlate1d(img.data.astype(np.float64), g, axis=0, mode="mirror")
    blurred = ndimage.correlate1d(blurred, g, axis=1, mode="mirror")
    mu = blurred.mean()
    narrowed = mu + alpha * (blurred - mu)
    return img.with_data(np.clip(narrowed, 0.0, 255.0))
