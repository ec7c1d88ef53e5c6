"""Exception types raised across the package.

Every error derives from :class:`PropnetError` so callers (the CLI in
particular) can catch package failures in one place and map them to exit
codes.
"""

from __future__ import annotations


class PropnetError(Exception):
    """Base class for all package errors."""


# geodata
class ParseError(PropnetError, ValueError):
    pass


class DimensionMismatch(PropnetError, ValueError):
    pass


class InvalidResolution(PropnetError, ValueError):
    pass


class AntennaOutsideMap(PropnetError, ValueError):
    pass


class AllNoData(PropnetError, ValueError):
    pass


# antenna
class AngleOutOfRange(PropnetError, ValueError):
    pass


class MissingCut(PropnetError, ValueError):
    pass


# tensor
class ScaleOverflow(PropnetError, ValueError):
    pass


class NonSquare(PropnetError, ValueError):
    pass


# empirical
class OutOfValidityRange(PropnetError, ValueError):
    pass


class RangeWarning(UserWarning):
    """Model evaluated outside its published validity box (permissive mode)."""


class NonPositiveDistance(PropnetError, ValueError):
    pass


class RankDeficient(PropnetError, ValueError):
    pass


# raysim
class NonPositiveInput(PropnetError, ValueError):
    pass


class SamePixel(PropnetError, ValueError):
    pass


class DegenerateGeometry(PropnetError, ValueError):
    pass


# net
class ShapeMismatch(PropnetError, ValueError):
    pass


class NonDivisibleSize(PropnetError, ValueError):
    pass


class NoValidPixels(PropnetError, ValueError):
    pass


# harness
class PlacementExhausted(PropnetError, RuntimeError):
    pass


class EmptySplit(PropnetError, ValueError):
    pass
