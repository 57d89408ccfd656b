"""Exception hierarchy.

Every failure class maps to one CLI exit code so shell scripts (and the
batch runner) can tell a bad config from a solver blow-up without parsing
log output.  Non-convergence is *not* an exception: solvers return a
status and the caller decides.
"""
from __future__ import annotations

from typing import Iterable, List


class RelaxError(Exception):
    exit_code = 1


class ConfigError(RelaxError):
    """Invalid problem file.  Carries every violation, not just the first."""

    exit_code = 2

    def __init__(self, violations: Iterable[str]):
        self.violations: List[str] = list(violations)
        super().__init__("; ".join(self.violations) or "invalid config")


class InvalidInputError(RelaxError, ValueError):
    exit_code = 2


class CapacityError(RelaxError):
    exit_code = 2


class GeometryError(RelaxError):
    exit_code = 3


class GraphDisconnectedError(GeometryError):
    pass


class GridError(RelaxError):
    exit_code = 3


class LayoutError(RelaxError):
    """A psi layout cannot express some required field."""

    exit_code = 3

    def __init__(self, message: str, flagged=()):
        self.flagged = list(flagged)
        super().__init__(message)


class DivergenceError(RelaxError):
    exit_code = 4


class DegenerateInstanceError(RelaxError):
    exit_code = 4


class DumpFormatError(RelaxError):
    exit_code = 2
