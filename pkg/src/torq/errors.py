"""Exception types raised across the package."""


class TorqError(Exception):
    """Base class for all errors raised by :mod:`torq`."""


class InvalidInput(TorqError, ValueError):
    """Input values are empty, non-finite or otherwise unusable."""


class InvalidScale(TorqError, ValueError):
    """A block scale is not strictly positive."""


class ShapeError(TorqError, ValueError):
    """Array dimensions do not match the expected block layout."""


class NoTransferPossible(TorqError, ValueError):
    """The selected pair has no opposite-sign deviation from the target."""


class ConvergenceError(TorqError, RuntimeError):
    """Variance equalization did not reach the tolerance within the sweep cap.

    The best-effort rotation is attached so callers can keep it.
    """

    def __init__(self, message, achieved_spread, rotation=None):
        super().__init__(message)
        self.achieved_spread = achieved_spread
        self.rotation = rotation


class FormatError(TorqError, ValueError):
    """A tensor or bundle file is malformed."""
