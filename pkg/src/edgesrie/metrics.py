"""Image-quality metrics and the ROI evaluation protocol.

Five scalar metrics scored on display-domain (0-255) values:

- CNR: contrast-to-noise ratio between a background and a cyst region, dB
- SSNR: speckle signal-to-noise ratio mu/sigma of one region
- ENL: equivalent number of looks mu^2/sigma^2 (identically SSNR^2)
- AGM: average gradient magnitude along a 1-D intensity profile
- SSIM: global structural similarity with c1 = 6.5025, c2 = 58.5225

All statistics are population moments (divide by n) computed in float64.
SSIM is a single global application of the formula, not windowed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DomainMismatch,
    ProfileTooShort,
    ShapeMismatch,
    WrongRoiKind,
    ZeroDenominator,
    ZeroVariance,
)
from .image import Domain, Image, RoiKind, RoiSpec

SSIM_C1 = 6.5025
SSIM_C2 = 58.5225


def _display_values(img: Image) -> np.ndarray:
    if img.domain is not Domain.DISPLAY8:
        raise DomainMismatch(f"metrics are scored on DISPLAY8 images, got {img.domain.name}")
    return img.data.astype(np.float64)


def region_values(img: Image, roi: RoiSpec) -> np.ndarray:
    """Pixels of a Region ROI as a flat float64 array."""
    if roi.kind is not RoiKind.REGION:
        raise WrongRoiKind(f"ROI {roi.name!r} is {roi.kind.value}, need region")
    roi.check_inside(img)
    return _display_values(img)[roi.z0 : roi.z1, roi.x0 : roi.x1].ravel()


def cnr(img: Image, rb: RoiSpec, rc: RoiSpec) -> float:
    """Contrast-to-noise ratio between background and cyst regions, in dB.

    20*log10(|mu_B - mu_C| / sqrt(sigma_B^2 + sigma_C^2)). Returns -inf when
    the means coincide while the denominator is positive.
    """
    b = region_values(img, rb)
    c = region_values(img, rc)
    var_sum = b.var() + c.var()
    if var_sum == 0.0:
        raise ZeroDenominator(f"regions {rb.name!r} and {rc.name!r} are both constant")
    contrast = abs(b.mean() - c.mean())
    if contrast == 0.0:
        return float("-inf")
    return float(20.0 * np.log10(contrast / np.sqrt(var_sum)))


def ssnr(img: Image, r: RoiSpec) -> float:
    """Speckle signal-to-noise ratio mu/sigma over a region."""
    v = region_values(img, r)
    var = v.var()
    if var == 0.0:
        raise ZeroVariance(f"region {r.name!r} is constant")
    return float(v.mean() / np.sqrt(var))


def enl(img: Image, r: RoiSpec) -> float:
    """Equivalent number of looks mu^2/sigma^2 over a region."""
    v = region_values(img, r)
    var = v.var()
    if var == 0.0:
        raise ZeroVariance(f"region {r.name!r} is constant")
    return float(v.mean() ** 2 / var)


def agm(profile: np.ndarray) -> float:
    """Average gradient magnitude of a 1-D intensity profile.

    (1/(N-1)) * sum |I(n+1) - I(n)| over the N-1 successive steps.
    """
    p = np.asarray(profile, dtype=np.float64).ravel()
    if p.size < 2:
        raise ProfileTooShort(f"profile has {p.size} samples, need at least 2")
    return float(np.mean(np.abs(np.diff(p))))


def ssim(f: Image, g: Image) -> float:
    """Global structural similarity between two display images."""
    a = _display_values(f)
    b = _display_values(g)
    if a.shape != b.shape:
        raise ShapeMismatch(f"ssim shapes differ: {a.shape} vs {b.shape}")
    mu_f, mu_g = a.mean(), b.mean()
    var_f, var_g = a.var(), b.var()
    cov = ((a - mu_f) * (b - mu_g)).mean()
    num = (2.0 * mu_f * mu_g + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_f**2 + mu_g**2 + SSIM_C1) * (var_f + var_g + SSIM_C2)
    return float(num / den)


def extract_profile(img: Image, roi: RoiSpec) -> np.ndarray:
    """Pixel values along a one-pixel-thick profile line, in index order."""
    if roi.kind is RoiKind.LATERAL_PROFILE:
        roi.check_inside(img)
        return _display_values(img)[roi.z0, roi.x0 : roi.x1].copy()
    if roi.kind is RoiKind.AXIAL_PROFILE:
        roi.check_inside(img)
        return _display_values(img)[roi.z0 : roi.z1, roi.x0].copy()
    raise WrongRoiKind(f"ROI {roi.name!r} is {roi.kind.value}, need a profile line")


@dataclass(frozen=True)
class MetricReport:
    """Scored metrics for one image plus the ROI names they came from.

    Metrics that were not requested (for example AGM without a profile ROI)
    are stored as None and rendered as '-'.
    """

    image_id: str
    roi_names: tuple = field(default_factory=tuple)
    cnr: float | None = None
    ssnr: float | None = None
    enl: float | None = None
    agm: float | None = None
    ssim: float | None = None

    _COLUMNS = ("cnr", "ssnr", "enl", "agm", "ssim")

    def to_kv(self) -> list[str]:
        """Line-oriented key=value records, full precision."""
        lines = [f"image={self.image_id}", f"rois={','.join(self.roi_names)}"]
        for name in self._COLUMNS:
            value = getattr(self, name)
            if value is not None:
                lines.append(f"{name}={value:.10g}")
        return lines


def score(
    img: Image,
    rois: dict[str, RoiSpec],
    image_id: str = "image",
    reference: Image | None = None,
) -> MetricReport:
    """Apply the evaluation protocol to one image.

    Looks for ROIs named ``background`` (region), ``cyst`` (region), and
    ``profile`` (lateral or axial line). CNR needs both regions, SSNR/ENL the
    background, AGM the profile, SSIM a reference image.
    """
    rb = rois.get("background")
    rc = rois.get("cyst")
    prof = rois.get("profile")
    vals: dict[str, float | None] = {k: None for k in MetricReport._COLUMNS}
    if rb is not None and rc is not None:
        vals["cnr"] = cnr(img, rb, rc)
    if rb is not None:
        vals["ssnr"] = ssnr(img, rb)
        vals["enl"] = enl(img, rb)
    if prof is not None:
        vals["agm"] = agm(extract_profile(img, prof))
    if reference is not None:
        vals["ssim"] = ssim(reference, img)
    used = tuple(r.name for r in (rb, rc, prof) if r is not None)
    return MetricReport(image_id, used, **vals)


def format_table(reports: list[MetricReport]) -> str:
    """Aligned plain-text table, one row per scored image."""
    headers = ["image", "CNR(dB)", "SSNR", "ENL", "AGM", "SSIM"]
    rows = [headers]
    for rep in reports:
        cells = [rep.image_id]
        for name in MetricReport._COLUMNS:
            value = getattr(rep, name)
            cells.append("-" if value is None else f"{value:.4f}")
        rows.append(cells)
    widths = [max(len(r[i]) for r in rows) for i in range(len(headers))]
    out = []
    for r in rows:
        out.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
    return "\n".join(out)
