"""Reaction-time cleaning, FIR band-pass filtering and epoching."""

import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import scipy.signal

from .exceptions import InvalidBandError, InvalidInputError
from .trial import Trial

log = logging.getLogger(__name__)

SMOOTH_WINDOW = 60.0
PASSBAND = (1.0, 20.0)


@dataclass(frozen=True)
class SessionRecording:
    """Continuous multichannel recording with PVT events.

    ``events`` is an ``(n, 2)`` array of ``(onset_s, rt_s)`` rows sorted by
    onset.
    """

    sample_rate: float
    continuous_data: np.ndarray
    events: np.ndarray
    subject_id: str
    session_id: str = "0"

    def __post_init__(self):
        ev = np.asarray(self.events, dtype=float).reshape(-1, 2)
        if ev.size and np.any(np.diff(ev[:, 0]) < 0):
            raise InvalidInputError("events must be sorted by onset time")
        object.__setattr__(self, "events", ev)
        object.__setattr__(self, "continuous_data",
                           np.asarray(self.continuous_data))

    @property
    def channels(self):
        return self.continuous_data.shape[0]

    @property
    def duration(self):
        return self.continuous_data.shape[1] / self.sample_rate

    def with_events(self, events):
        return replace(self, events=events)


@dataclass(frozen=True)
class RtStats:
    """Per-subject outlier threshold ``mean + 3 * std``."""

    mean: float
    std: float
    threshold: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "threshold", self.mean + 3.0 * self.std)

    @classmethod
    def from_rts(cls, rts):
        rts = np.asarray(rts, dtype=float)
        return cls(float(rts.mean()), float(rts.std()))


def remove_rt_outliers(events, stats):
    """Keep the ``(time, rt)`` rows with ``rt <= stats.threshold``."""
    events = np.asarray(events, dtype=float).reshape(-1, 2)
    return events[events[:, 1] <= stats.threshold]


def smooth_rts(events, window_seconds=SMOOTH_WINDOW):
    """Centred moving average of RTs over ``+-window/2`` seconds.

    The window is truncated at the session boundaries; an event always sees
    at least itself.
    """
    events = np.asarray(events, dtype=float).reshape(-1, 2)
    if len(events) == 0:
        return events.copy()
    t, rt = events[:, 0], events[:, 1]
    half = window_seconds / 2
    lo = np.searchsorted(t, t - half, side="left")
    hi = np.searchsorted(t, t + half, side="right")
    csum = np.concatenate([[0.0], np.cumsum(rt)])
    out = events.copy()
    out[:, 1] = (csum[hi] - csum[lo]) / (hi - lo)
    return out


def clean_subject_events(recordings, window_seconds=SMOOTH_WINDOW):
    """Outlier removal with subject-wide statistics, then per-session smoothing.

    Returns new recordings with cleaned events, plus the statistics used.
    """
    all_rts = np.concatenate([r.events[:, 1] for r in recordings])
    stats = RtStats.from_rts(all_rts)
    cleaned = [r.with_events(smooth_rts(remove_rt_outliers(r.events, stats),
                                        window_seconds))
               for r in recordings]
    return cleaned, stats


@lru_cache(maxsize=32)
def design_bandpass(sample_rate, low=PASSBAND[0], high=PASSBAND[1]):
    """Hamming windowed-sinc band-pass taps with zero DC gain.

    The filter order is ``3 * fs / low`` rounded to even, giving an odd
    number of taps (751 at 250 Hz with a 1 Hz lower edge). The taps are
    nudged along the window so they sum to exactly zero.
    """
    nyq = sample_rate / 2
    if not 0 < low < high < nyq:
        raise InvalidBandError(
            f"band ({low}, {high}) Hz must lie inside (0, {nyq}) Hz")
    order = int(2 * round(1.5 * sample_rate / low))
    window = scipy.signal.get_window("hamming", order + 1, fftbins=False)
    taps = scipy.signal.firwin(order + 1, [low, high], pass_zero=False,
                               window="hamming", fs=sample_rate)
    taps = taps - window * (taps.sum() / window.sum())
    taps.setflags(write=False)
    return taps


def bandpass(data, sample_rate, low=PASSBAND[0], high=PASSBAND[1]):
    """Zero-phase FIR band-pass along the last axis.

    Each row is de-meaned, extended by odd reflection, convolved with the
    linear-phase taps and cropped so the group delay cancels. Any residual
    row mean is removed at the end.
    """
    taps = design_bandpass(float(sample_rate), float(low), float(high))
    data = np.asarray(data, dtype=float)
    data = data - data.mean(axis=-1, keepdims=True)
    half = len(taps) // 2
    pad = [(0, 0)] * (data.ndim - 1) + [(half, half)]
    ext = np.pad(data, pad, mode="reflect", reflect_type="odd")
    out = scipy.signal.fftconvolve(ext, taps[(None,) * (data.ndim - 1)],
                                   mode="valid", axes=-1)
    return out - out.mean(axis=-1, keepdims=True)


def bandpass_trial(trial, sample_rate, low=PASSBAND[0], high=PASSBAND[1]):
    """Band-pass one trial; the label is carried through."""
    return trial.with_data(bandpass(trial.data, sample_rate, low, high))


def epoch_session(rec, trial_length):
    """Cut ``[t - trial_length, t)`` before every event onset ``t``.

    Events with less than ``trial_length`` of history (or running past the
    end of the recording) are skipped and counted in the log.
    """
    n = trial_length * rec.sample_rate
    if abs(n - round(n)) > 1e-9:
        raise InvalidInputError(
            "trial_length * sample_rate must be an integer sample count")
    n = int(round(n))
    trials, skipped = [], 0
    total = rec.continuous_data.shape[1]
    for onset, rt in rec.events:
        stop = int(round(onset * rec.sample_rate))
        start = stop - n
        if start < 0 or stop > total:
            skipped += 1
            continue
        trials.append(Trial(np.asarray(rec.continuous_data[:, start:stop],
                                       dtype=float), float(rt), float(onset)))
    if skipped:
        log.warning("subject %s: skipped %d events without %.1f s of data",
                    rec.subject_id, skipped, trial_length)
    return trials


def prepare_trials(recordings, trial_length=5.0, band=PASSBAND,
                   window_seconds=SMOOTH_WINDOW):
    """Full label and signal conditioning for one subject's sessions.

    Returns the band-passed trials of all sessions in recording order.
    """
    cleaned, _ = clean_subject_events(recordings, window_seconds)
    out = []
    for rec in cleaned:
        raw = epoch_session(rec, trial_length)
        if not raw:
            continue
        filtered = bandpass(np.stack([t.data for t in raw]), rec.sample_rate,
                            *band)
        out.extend(t.with_data(x) for t, x in zip(raw, filtered))
    return out
