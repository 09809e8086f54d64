"""
Exception hierarchy for densepose-kit.

Every error carries the process exit code the CLI reports for it:
1 for usage errors, 2 for bad input, schema or configuration,
3 for internal invariant violations.
"""


class DenseposeKitError(Exception):
    """Base class for all errors raised by the package."""

    exit_code = 2


class UsageError(DenseposeKitError):
    """Command line could not be parsed."""

    exit_code = 1


class InvariantViolation(DenseposeKitError):
    """An internal consistency check failed."""

    exit_code = 3


class ConfigError(DenseposeKitError):
    """Configuration file missing, unreadable or carrying unknown keys."""


class InvalidConfig(ConfigError):
    """Configuration values violate a component invariant."""


class ParseError(DenseposeKitError):
    """Input file is not well-formed JSON."""


class SchemaError(DenseposeKitError):
    """Input record lacks a required field or has the wrong type."""


class LengthError(SchemaError):
    """Flat keypoint array length is not 3K."""


class UnknownImageId(DenseposeKitError):
    """A record references an image id absent from the dataset."""


class ShapeMismatch(DenseposeKitError):
    """Array arguments disagree in shape."""


class OutOfRange(DenseposeKitError):
    """A score or scale lies outside its admissible range."""


class InvalidLevel(DenseposeKitError):
    """Pyramid level outside [3, 7]."""


class TooFewKeypoints(DenseposeKitError):
    """Skeleton has fewer keypoints than the operation needs."""


class NoLabeledKeypoints(DenseposeKitError):
    """Every keypoint of a pose has visibility 0."""


class NoPositives(DenseposeKitError):
    """A training strategy selected an empty positive set."""


def check_keys(section, data, allowed):
    """Reject keys of ``data`` that are not in ``allowed``."""
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected a mapping, got {type(data).__name__}")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(map(str, unknown))}")
