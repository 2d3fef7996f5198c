"""Exception types shared across the package."""

from __future__ import annotations


class PolaronError(Exception):
    """Base class for all package errors."""


class InvalidParameter(PolaronError):
    """A model or numerics parameter is out of its physical/valid range."""


class NumericalBreakdown(PolaronError):
    """An intermediate quantity left the numerically trustworthy regime
    (e.g. a phonon-dressing exponent norm exceeding the overflow guard)."""


class NotConverged(PolaronError):
    """Fixed-point iteration failed to reach tolerance.

    Carries the partial solver report in ``report`` when available.
    """

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class UndefinedField(PolaronError):
    """A derived scaling field is requested where its defining ratio is singular."""


class NonPositiveRate(PolaronError):
    """A scattering rate that must be positive came out zero/negative."""


class DegenerateZeroScattering(PolaronError):
    """Both couplings vanish: the scattering kernel is identically zero and
    band transport is unbounded (infinite relaxation time)."""


class TooLarge(PolaronError):
    """Requested exact-diagonalization space exceeds the hard size cap."""


class CutoffNotConverged(PolaronError):
    """Exact results still drift when the phonon occupation cutoff is raised."""


class ConfigError(PolaronError):
    """Bad run configuration. ``line`` is the 1-based offending line number
    (0 when the error is not tied to a specific line)."""

    def __init__(self, message: str, line: int = 0):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


class MissingDataset(PolaronError):
    """A requested output/plot needs data that the run did not produce."""
