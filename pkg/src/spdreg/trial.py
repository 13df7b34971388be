"""The ``Trial`` record shared by every stage of the pipeline."""

from dataclasses import dataclass, replace

import numpy as np

from .exceptions import InvalidInputError


@dataclass(frozen=True)
class Trial:
    """One multichannel epoch and its reaction-time label.

    Attributes
    ----------
    data : ndarray, shape (C, S)
        Channels by samples.
    label : float
        Reaction time in seconds.
    onset_time : float
        Stimulus onset within the session, seconds. The epoch ends here.
    """

    data: np.ndarray
    label: float
    onset_time: float = 0.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 2:
            raise InvalidInputError(
                f"trial data must be 2-D (channels, samples), got {data.shape}")
        if not (np.isfinite(self.label) and self.label > 0):
            raise InvalidInputError(
                f"trial label must be a positive reaction time, got "
                f"{self.label}")
        object.__setattr__(self, "data", data)

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def samples(self):
        return self.data.shape[1]

    def with_data(self, data):
        return replace(self, data=data)


def stack_trials(trials):
    """Return ``(X, y)`` with ``X`` of shape (N, C, S) and labels ``y``."""
    x = np.stack([t.data for t in trials])
    y = np.array([t.label for t in trials], dtype=float)
    return x, y
