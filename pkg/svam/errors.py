"""
Exception hierarchy shared by every pipeline module.
The CLI maps these to process exit codes (pipeline_cli.exit_code_for).
"""

from typing import Optional, Sequence


class SvamError(Exception):
    """Base class for all pipeline failures."""


class ShapeError(SvamError):
    """An op received operands whose shapes do not conform."""

    def __init__(self, op: str, expected, actual):
        self.op = op
        self.expected = expected
        self.actual = actual
        super().__init__(f"{op}: expected shape {expected}, got {actual}")


class NumericalError(SvamError):
    """A forward value or sampler step produced NaN/Inf."""

    def __init__(self, site: str, step: Optional[int] = None):
        self.site = site
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite value in {site}{where}")


class GradientError(SvamError):
    """Optimizer was asked to update a parameter that holds no gradient."""

    def __init__(self, names: Sequence[str]):
        self.names = list(names)
        super().__init__(f"missing gradient for parameters: {', '.join(self.names)}")


class ConfigError(SvamError):
    """Malformed or unsupported run configuration."""


class CheckpointMismatchError(SvamError):
    """A checkpoint is missing or was written under an incompatible config."""

    def __init__(self, message: str, expected_hash: Optional[int] = None, found_hash: Optional[int] = None):
        self.expected_hash = expected_hash
        self.found_hash = found_hash
        if expected_hash is not None and found_hash is not None:
            message = f"{message} (expected config hash {expected_hash:016x}, found {found_hash:016x})"
        super().__init__(message)


class WorldError(SvamError):
    """The tabletop world could not be set up."""


class DatasetError(SvamError):
    """Dataset or cache file is unreadable, unwritable or malformed."""
