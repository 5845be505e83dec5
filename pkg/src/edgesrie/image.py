"""Image container, domain conversions, ROI geometry, phantoms, and file I/O.

An :class:`Image` is a 2-D float32 field tagged with the domain its values
live in:

- ``LINEAR``: linear echo amplitude, values >= 0
- ``DECIBEL``: 20*log10 relative to the image maximum, values <= 0
- ``DISPLAY8``: display gray levels in [0, 255] (values may be fractional;
  they are rounded only when written to PGM)

Axis convention: ``data[z, x]`` with z the axial (depth) row index and x the
lateral column index. ``dz`` / ``dx`` are millimeters per pixel and are
carried as metadata only.

File formats:

- binary PGM (P5, maxval 255) for DISPLAY8 images, with a single comment
  line ``# dx=<dx> dz=<dz>`` after the magic;
- a raw little-endian format for any domain: magic ``ESRI1``, u32 width,
  u32 height, u8 domain tag (0=linear, 1=decibel, 2=display8), f32 dx,
  f32 dz, then f32 row-major data.
"""

from __future__ import annotations

import enum
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AllZeroImage,
    BadMagic,
    DomainMismatch,
    InclusionOutOfBounds,
    ShapeMismatch,
    TruncatedFile,
    UnsupportedMaxval,
)

DEFAULT_SPACING_MM = 0.1
DEFAULT_RANGE_DB = 55.0

_RAW_MAGIC = b"ESRI1"


class Domain(enum.Enum):
    LINEAR = 0
    DECIBEL = 1
    DISPLAY8 = 2


def round_half_away(x):
    """Round to nearest integer, halves away from zero.

    The single rounding rule used everywhere the toolkit produces integers
    (display mapping, PGM bytes, weight/activation quantization).
    """
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class Image:
    data: np.ndarray
    domain: Domain
    dx: float = DEFAULT_SPACING_MM
    dz: float = DEFAULT_SPACING_MM

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image data must be 2-D and nonempty, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise DomainMismatch("image contains non-finite values")
        if self.domain is Domain.LINEAR and arr.min() < 0:
            raise DomainMismatch("LINEAR image has negative amplitudes")
        if self.domain is Domain.DECIBEL and arr.max() > 0:
            raise DomainMismatch("DECIBEL image has values above the 0 dB reference")
        if self.domain is Domain.DISPLAY8 and (arr.min() < 0 or arr.max() > 255):
            raise DomainMismatch("DISPLAY8 image has values outside [0, 255]")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def with_data(self, data: np.ndarray, domain: Domain | None = None) -> "Image":
        """Same spacing metadata, new pixel values."""
        return Image(data, self.domain if domain is None else domain, self.dx, self.dz)


class RoiKind(enum.Enum):
    REGION = "region"
    LATERAL_PROFILE = "lateral"
    AXIAL_PROFILE = "axial"


@dataclass(frozen=True)
class RoiSpec:
    """Rectangle in pixel coordinates, inclusive-exclusive on both axes."""

    name: str
    kind: RoiKind
    x0: int
    z0: int
    x1: int
    z1: int

    def __post_init__(self):
        if not (0 <= self.x0 < self.x1 and 0 <= self.z0 < self.z1):
            raise ValueError(f"ROI {self.name!r}: need 0 <= x0 < x1 and 0 <= z0 < z1")
        if self.kind is RoiKind.LATERAL_PROFILE and self.z1 - self.z0 != 1:
            raise ValueError(f"ROI {self.name!r}: lateral profile must be one row thick")
        if self.kind is RoiKind.AXIAL_PROFILE and self.x1 - self.x0 != 1:
            raise ValueError(f"ROI {self.name!r}: axial profile must be one column thick")

    def check_inside(self, img: Image) -> None:
        if self.x1 > img.width or self.z1 > img.height:
            raise ShapeMismatch(
                f"ROI {self.name!r} ({self.x0},{self.z0})-({self.x1},{self.z1}) "
                f"exceeds {img.width}x{img.height} image"
            )


@dataclass(frozen=True)
class PhantomSpec:
    """Uniform background with circular inclusions (cx, cz, radius, echo)."""

    width: int
    height: int
    background_echo: float = 1.0
    inclusions: tuple = field(default_factory=tuple)


def to_decibel(img: Image, floor_db: float = -DEFAULT_RANGE_DB) -> Image:
    """Log-compress a linear-amplitude image, referenced to its maximum.

    out = max(20*log10(v / max), floor_db); the image maximum maps to 0 dB.
    """
    if img.domain is not Domain.LINEAR:
        raise DomainMismatch(f"to_decibel expects a LINEAR image, got {img.domain.name}")
    if floor_db >= 0:
        raise ValueError("floor_db must be negative")
    peak = float(img.data.max())
    if peak <= 0.0:
        raise AllZeroImage("cannot log-compress an all-zero image")
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(img.data.astype(np.float64) / peak)
    return img.with_data(np.maximum(db, floor_db), Domain.DECIBEL)


def to_display(img: Image, range_db: float = DEFAULT_RANGE_DB) -> Image:
    """Map [-range_db, 0] dB linearly onto [0, 255] gray levels."""
    if img.domain is not Domain.DECIBEL:
        raise DomainMismatch(f"to_display expects a DECIBEL image, got {img.domain.name}")
    if range_db <= 0:
        raise ValueError("range_db must be positive")
    disp = (img.data.astype(np.float64) / range_db + 1.0) * 255.0
    disp = round_half_away(np.clip(disp, 0.0, 255.0))
    return img.with_data(disp, Domain.DISPLAY8)


def display_to_decibel(img: Image, range_db: float = DEFAULT_RANGE_DB) -> Image:
    """Invert the display mapping (0..255 back to -range_db..0 dB)."""
    if img.domain is not Domain.DISPLAY8:
        raise DomainMismatch("display_to_decibel expects a DISPLAY8 image")
    db = (img.data.astype(np.float64) / 255.0 - 1.0) * range_db
    return img.with_data(db, Domain.DECIBEL)


def decibel_to_linear(img: Image) -> Image:
    """10^(v/20); the 0 dB reference maps to amplitude 1."""
    if img.domain is not Domain.DECIBEL:
        raise DomainMismatch("decibel_to_linear expects a DECIBEL image")
    return img.with_data(np.power(10.0, img.data.astype(np.float64) / 20.0), Domain.LINEAR)


def to_linear_amplitude(img: Image, range_db: float = DEFAULT_RANGE_DB) -> Image:
    """Convert any domain to linear amplitude (echogenicity import path)."""
    if img.domain is Domain.LINEAR:
        return img
    if img.domain is Domain.DISPLAY8:
        img = display_to_decibel(img, range_db)
    return decibel_to_linear(img)


def make_phantom(spec: PhantomSpec) -> Image:
    """Render a cyst phantom echogenicity map.

    Inclusions must lie fully inside the image; where inclusions overlap the
    first listed one wins.
    """
    if spec.background_echo < 0:
        raise ValueError("background echo must be >= 0")
    out = np.full((spec.height, spec.width), spec.background_echo, dtype=np.float32)
    zz, xx = np.mgrid[0 : spec.height, 0 : spec.width]
    for cx, cz, radius, echo in reversed(spec.inclusions):
        if echo < 0 or radius <= 0:
            raise ValueError("inclusion echo must be >= 0 and radius > 0")
        if (
            cx - radius < 0
            or cz - radius < 0
            or cx + radius > spec.width - 1
            or cz + radius > spec.height - 1
        ):
            raise InclusionOutOfBounds(
                f"inclusion at ({cx},{cz}) r={radius} exceeds {spec.width}x{spec.height}"
            )
        mask = (xx - cx) ** 2 + (zz - cz) ** 2 <= radius**2
        out[mask] = echo
    return Image(out, Domain.LINEAR)


# --- file I/O ----------------------------------------------------------------


def write_image(img: Image, path) -> None:
    """Write PGM for ``.pgm`` paths (DISPLAY8 only), ESRI1 raw otherwise."""
    path = str(path)
    if path.endswith(".pgm"):
        _write_pgm(img, path)
    else:
        _write_raw(img, path)


def read_image(path) -> Image:
    path = str(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] == b"P5":
        return _parse_pgm(blob)
    if blob[: len(_RAW_MAGIC)] == _RAW_MAGIC:
        return _parse_raw(blob)
    raise BadMagic(f"{path}: neither P5 PGM nor ESRI1 raw")


def _fmt(x: float) -> str:
    return f"{x:g}"


def _write_pgm(img: Image, path: str) -> None:
    if img.domain is not Domain.DISPLAY8:
        raise DomainMismatch("PGM stores DISPLAY8 images only")
    header = f"P5\n# dx={_fmt(img.dx)} dz={_fmt(img.dz)}\n{img.width} {img.height}\n255\n"
    body = round_half_away(np.clip(img.data, 0, 255)).astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(body)


def _parse_pgm(blob: bytes) -> Image:
    # Tokenize the header, treating '#'-to-newline as comments. The first
    # comment may carry pixel spacing.
    pos = 2
    tokens: list[bytes] = []
    comment = b""
    while len(tokens) < 3:
        if pos >= len(blob):
            raise TruncatedFile("PGM header ends early")
        ch = blob[pos : pos + 1]
        if ch == b"#":
            end = blob.find(b"\n", pos)
            if end < 0:
                raise TruncatedFile("PGM comment is unterminated")
            if not comment:
                comment = blob[pos:end]
            pos = end + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(blob) and not blob[end : end + 1].isspace():
                end += 1
            tokens.append(blob[pos:end])
            pos = end
    pos += 1  # single whitespace byte after maxval
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise BadMagic(f"malformed PGM header tokens {tokens}") from exc
    if maxval != 255:
        raise UnsupportedMaxval(f"PGM maxval {maxval}, only 255 supported")
    n = width * height
    payload = blob[pos : pos + n]
    if len(payload) < n:
        raise TruncatedFile(f"PGM payload has {len(payload)} of {n} bytes")
    dx = dz = DEFAULT_SPACING_MM
    m = re.search(rb"dx=([0-9.eE+-]+)\s+dz=([0-9.eE+-]+)", comment)
    if m:
        dx, dz = float(m.group(1)), float(m.group(2))
    data = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return Image(data.astype(np.float32), Domain.DISPLAY8, dx, dz)


_RAW_HEADER = struct.Struct("<IIBff")


def _write_raw(img: Image, path: str) -> None:
    header = _RAW_HEADER.pack(img.width, img.height, img.domain.value, img.dx, img.dz)
    with open(path, "wb") as fh:
        fh.write(_RAW_MAGIC)
        fh.write(header)
        fh.write(img.data.astype("<f4").tobytes())


def _parse_raw(blob: bytes) -> Image:
    if blob[: len(_RAW_MAGIC)] != _RAW_MAGIC:
        raise BadMagic("missing ESRI1 magic")
    off = len(_RAW_MAGIC)
    if len(blob) < off + _RAW_HEADER.size:
        raise TruncatedFile("ESRI1 header ends early")
    width, height, tag, dx, dz = _RAW_HEADER.unpack_from(blob, off)
    try:
        domain = Domain(tag)
    except ValueError as exc:
        raise BadMagic(f"unknown ESRI1 domain tag {tag}") from exc
    off += _RAW_HEADER.size
    n = width * height
    payload = blob[off : off + 4 * n]
    if len(payload) < 4 * n:
        raise TruncatedFile(f"ESRI1 payload has {len(payload)} of {4 * n} bytes")
    data = np.frombuffer(payload, dtype="<f4").reshape(height, width)
    return Image(data, domain, dx, dz)
