"""Exception types shared across the package."""


class OasicError(Exception):
    """Base class for errors raised by this package."""


class FormatError(OasicError):
    """A file is not a valid instance of one of the binary/image formats."""


class DegenerateCalibrationError(OasicError):
    """Calibration produced a_hi <= a_lo: the feature extractor cannot
    separate occluder patches from object patches on the given data."""
