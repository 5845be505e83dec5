"""Exception hierarchy shared across the toolkit.

Three broad families map onto the CLI exit codes: configuration problems
(exit 2), bad or missing data (exit 3), and numeric failures (exit 4).
"""


class EsrieError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(EsrieError):
    """Invalid configuration: unknown keys, bad values, missing settings."""


class DataError(EsrieError):
    """Invalid input data: files, images, ROIs, checkpoints."""


class NumericError(EsrieError):
    """Numeric failure: NaN/Inf encountered, degenerate statistics."""


# --- image / file formats ---------------------------------------------------

class AllZeroImage(NumericError):
    """Log compression of an image whose maximum is zero."""


class InclusionOutOfBounds(DataError):
    """Phantom inclusion extends past the image border."""


class BadMagic(DataError):
    """File does not start with the expected magic bytes."""


class TruncatedFile(DataError):
    """File ends before the declared payload is complete."""


class UnsupportedMaxval(DataError):
    """PGM maxval other than 255."""


class DomainMismatch(DataError):
    """Image domain not valid for the requested operation."""


# --- simulator --------------------------------------------------------------

class ImageTooSmall(DataError):
    """Image smaller than the kernel support it must accommodate."""


# --- metrics / ROIs ---------------------------------------------------------

class ZeroDenominator(NumericError):
    """CNR denominator is zero (both regions constant)."""


class ZeroVariance(NumericError):
    """Region variance is zero where a ratio requires it positive."""


class ProfileTooShort(DataError):
    """Intensity profile has fewer than two samples."""


class ShapeMismatch(DataError):
    """Array extents inconsistent with the operation."""


class WrongRoiKind(DataError):
    """ROI kind not valid for the requested operation."""


class MissingRoi(DataError):
    """A named ROI required by the evaluation protocol is absent."""


# --- network engine ---------------------------------------------------------

class OddSpatialDims(DataError):
    """Max pooling requires even spatial extents."""


class NonDivisibleDims(DataError):
    """Input extents not divisible by 16 and padding is disabled."""


class VersionMismatch(DataError):
    """Checkpoint version not supported by this build."""


class ChecksumError(DataError):
    """Checkpoint CRC32 does not match its payload."""


class DescriptorMismatch(DataError):
    """Two models do not share the same architecture descriptor."""


# --- training ---------------------------------------------------------------

class EmptyCorpus(DataError):
    """Corpus manifest contains no entries for the requested role."""


class NonFiniteLoss(NumericError):
    """Training produced a NaN/Inf loss or parameter."""


# --- quantization -----------------------------------------------------------

class NonFiniteWeights(NumericError):
    """Weight tensor contains NaN/Inf."""


class EmptyCalibrationSet(DataError):
    """Calibration requires at least one image."""


class MissingQuantParams(DataError):
    """Integer inference requested on a model without quantization params."""


# --- baselines --------------------------------------------------------------

class NonPositiveTimestep(ConfigError):
    """Diffusion time step must be positive."""


# --- CLI --------------------------------------------------------------------

class InvalidDuration(ConfigError):
    """Benchmark duration must be positive."""
