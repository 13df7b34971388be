"""Exception types raised across the package."""


class SpdregError(Exception):
    """Base class for all errors raised by spdreg."""


class InvalidInputError(SpdregError, ValueError):
    """Input values are non-finite, asymmetric or otherwise malformed."""


class ShapeError(SpdregError, ValueError):
    """Array shapes or dimensions do not agree."""


class IllConditionedError(SpdregError, ArithmeticError):
    """A matrix is too close to singular for the requested operation."""


class NonConvergenceError(SpdregError, ArithmeticError):
    """An iterative routine hit its iteration cap.

    Parameters
    ----------
    message : str
        Human readable description.
    last_iterate : ndarray
        The iterate at the moment the routine gave up.
    residual : float
        The convergence criterion value at the last iteration.
    """

    def __init__(self, message, last_iterate=None, residual=float("nan")):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual


class DegenerateLabelsError(SpdregError, ValueError):
    """Too few distinct label values to build the requested fuzzy classes."""


class EmptyClassError(SpdregError, ValueError):
    """A fuzzy class received (almost) no membership weight."""


class InvalidBandError(SpdregError, ValueError):
    """A frequency band lies outside (0, Nyquist)."""


class FoldTooSmallError(SpdregError, ValueError):
    """A cross-validation fold holds fewer than two test points."""


class ConfigError(SpdregError, ValueError):
    """An experiment or model configuration is invalid."""


class FileFormatError(SpdregError, ValueError):
    """A data file does not follow the expected on-disk layout."""
