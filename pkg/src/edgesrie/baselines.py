"""Classical despeckling comparators: Lee local-statistics filter and
speckle reducing anisotropic diffusion (SRAD).

Both operate on Display8 images and return Display8 images. Lee works
directly on display values; SRAD diffuses the offset intensity
(display + 1) so the coefficient of variation is well defined everywhere,
and removes the offset afterwards. Both are deterministic and
shape-preserving, and fix constant images exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, NonPositiveTimestep
from .image import Domain, Image, RoiSpec
from .metrics import region_values


@dataclass(frozen=True)
class LeeConfig:
    """window is the side of the square statistics window (odd, >= 3).

    cu is the speckle coefficient of variation sigma/mu of a homogeneous
    area; leave it None to estimate from `roi`, a user-designated
    homogeneous region of the image being filtered.
    """

    window: int = 7
    cu: float | None = None
    roi: RoiSpec | None = None

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ConfigError("window must be odd and >= 3")
        if self.cu is not None and not self.cu > 0:
            raise ConfigError("cu must be > 0")


@dataclass(frozen=True)
class SradConfig:
    """iterations of the diffusion update with time step delta_t.

    q0 (the speckle scale) starts from cu, or from the std/mean of `roi`
    on the offset intensity image, and decays as q0 * exp(-q0_decay * t)
    with t the iteration index.
    """

    iterations: int = 50
    delta_t: float = 0.05
    q0_decay: float = 0.02
    cu: float | None = None
    roi: RoiSpec | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not 0.0 < self.delta_t <= 0.25:
            raise NonPositiveTimestep("delta_t must be in (0, 0.25]")
        if self.q0_decay < 0:
            raise ConfigError("q0_decay must be >= 0")
        if self.cu is not None and not self.cu > 0:
            raise ConfigError("cu must be > 0")


def _coeff_of_variation(values: np.ndarray, what: str) -> float:
    mu = float(values.mean())
    sd = float(values.std())
    if mu == 0 or sd == 0:
        raise ConfigError(f"{what}: designated ROI gives no usable sigma/mu")
    return sd / mu


def _resolve_cu(img: Image, cu, roi, what: str, offset: float = 0.0) -> float:
    if cu is not None:
        return float(cu)
    if roi is None:
        raise ConfigError(f"{what}: provide cu or a homogeneous roi to estimate it")
    return _coeff_of_variation(region_values(img, roi) + offset, what)


def _window_stats(x: np.ndarray, size: int, block: int = 64):
    """Per-pixel mean and population variance over a size x size window.

    Windows are materialized explicitly (reflect padding, edge repeated)
    and reduced with np.mean/np.var, so the result carries no moving-sum
    cancellation error; rows are processed in blocks to bound memory.
    """
    half = size // 2
    padded = np.pad(x, half, mode="symmetric")
    m = np.empty_like(x)
    v = np.empty_like(x)
    for r0 in range(0, x.shape[0], block):
        r1 = min(r0 + block, x.shape[0])
        windows = np.lib.stride_tricks.sliding_window_view(
            padded[r0 : r1 + 2 * half], (size, size))
        m[r0:r1] = windows.mean(axis=(2, 3))
        v[r0:r1] = windows.var(axis=(2, 3))
    return m, v


def lee_filter(img: Image, cfg: LeeConfig = LeeConfig()) -> Image:
    """Adaptive weighted average driven by local statistics.

    Per pixel, with mean m and population variance v over the window
    (reflect padding): gain k = max(0, 1 - Cu^2 m^2 / v) (k = 0 where
    v == 0) and out = m + k (x - m). Flat areas collapse to their mean,
    structure with v >> Cu^2 m^2 passes through nearly unchanged.
    """
    if img.domain is not Domain.DISPLAY8:
        raise ConfigError(f"lee_filter expects a DISPLAY8 image, got {img.domain.name}")
    cu = _resolve_cu(img, cfg.cu, cfg.roi, "lee_filter")
    x = img.data.astype(np.float64)
    m, v = _window_stats(x, cfg.window)
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.where(v > 0, np.maximum(0.0, 1.0 - cu * cu * m * m / v), 0.0)
    out = m + k * (x - m)
    return img.with_data(np.clip(out, 0.0, 255.0))


def _shift(a: np.ndarray, dz: int, dx: int) -> np.ndarray:
    # edge-replicating shift: zero-flux (Neumann) boundary for the PDE
    padded = np.pad(a, 1, mode="edge")
    return padded[1 + dz : 1 + dz + a.shape[0], 1 + dx : 1 + dx + a.shape[1]]


def srad_filter(img: Image, cfg: SradConfig = SradConfig()) -> Image:
    """Speckle reducing anisotropic diffusion on offset intensity.

    Each iteration computes the instantaneous coefficient of variation q
    from first and second differences, maps it through the diffusion
    coefficient c = 1 / (1 + (q^2 - q0^2) / (q0^2 (1 + q0^2))) clamped to
    [0, 1], and applies the divergence update I += (delta_t / 4) div(c grad I)
    with zero-flux boundaries. q0 decays as q0 * exp(-q0_decay * t).
    """
    if img.domain is not Domain.DISPLAY8:
        raise ConfigError(f"srad_filter expects a DISPLAY8 image, got {img.domain.name}")
    i0 = img.data.astype(np.float64) + 1.0
    q0_base = _resolve_cu(img, cfg.cu, cfg.roi, "srad_filter", offset=1.0)
    cur = i0
    for t in range(cfg.iterations):
        q0 = q0_base * np.exp(-cfg.q0_decay * t)
        n = _shift(cur, -1, 0)
        s = _shift(cur, 1, 0)
        w = _shift(cur, 0, -1)
        e = _shift(cur, 0, 1)
        # one-sided gradients and Laplacian, normalized by intensity
        g2 = ((s - cur) ** 2 + (e - cur) ** 2) / (cur * cur)
        lap = (n + s + w + e - 4.0 * cur) / cur
        num = 0.5 * g2 - 0.0625 * lap * lap
        den = (1.0 + 0.25 * lap) ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            q2 = np.where(den > 0, num / den, 0.0)
        q2 = np.maximum(q2, 0.0)
        c = 1.0 / (1.0 + (q2 - q0 * q0) / (q0 * q0 * (1.0 + q0 * q0)))
        c = np.clip(c, 0.0, 1.0)
        c_s = _shift(c, 1, 0)
        c_e = _shift(c, 0, 1)
        div = (c_s * (s - cur) + c * (n - cur)
               + c_e * (e - cur) + c * (w - cur))
        cur = cur + (cfg.delta_t / 4.0) * div
        cur = np.maximum(cur, 1e-12)
    return img.with_data(np.clip(cur - 1.0, 0.0, 255.0))
