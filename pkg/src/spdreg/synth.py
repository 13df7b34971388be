"""Synthetic PVT sessions with a known latent driver.

A slow latent state ``z(t)`` in ``(-2, 2)`` drives both the reaction times
and the spatial covariance of the EEG. Sensor data are a random mixture of
unit-variance sources:

* background sources with a ``1/f`` spectrum over 1-30 Hz, never modulated;
* informative theta (4-8 Hz) and alpha (8-13 Hz) sources whose variance is
  multiplied by ``exp(coupling * gain * z(t))``;
* informative source pairs (13-20 Hz by default, outside the theta/alpha
  bands) whose mutual correlation is rotated by an angle
  proportional to ``coupling * z(t)``, which changes the covariance without
  changing either source's power.

Reaction times follow ``base + 0.4 * sigmoid(z) + N(0, rt_noise^2)``, floored
at 0.15 s.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import ConfigError
from .preprocess import SessionRecording

RT_FLOOR = 0.15
LATENT_RATE = 10.0
GOLDEN = (np.sqrt(5.0) - 1) / 2


@dataclass(frozen=True)
class GeneratorConfig:
    """Generator knobs. Times are in seconds, rates in Hz."""

    channels: int = 32
    sample_rate: float = 250.0
    session_length: float = 600.0
    iti_min: float = 2.0
    iti_max: float = 10.0
    coupling: float = 0.75
    noise_floor: float = 0.3
    seed: int = 0
    latent_timescale: float = 30.0
    lead_in: float = 10.0
    rt_baseline: float = 0.3
    rt_log_spread: float = 1.6
    rt_noise: float = 0.05
    n_power_sources: int = 4
    n_corr_pairs: int = 2
    power_gain: float = 0.3
    corr_gain: float = 0.3
    corr_band: tuple = (13.0, 20.0)

    def __post_init__(self):
        if not 0.0 <= self.coupling <= 1.0:
            raise ConfigError("coupling must lie in [0, 1]")
        positive = ("channels", "sample_rate", "session_length", "iti_min",
                    "iti_max", "latent_timescale", "rt_baseline")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.iti_max < self.iti_min:
            raise ConfigError("iti_max must be >= iti_min")
        if self.noise_floor < 0 or self.rt_noise < 0:
            raise ConfigError("noise levels must be non-negative")
        n_inf = self.n_power_sources + 2 * self.n_corr_pairs
        if n_inf > self.channels:
            raise ConfigError(
                f"{n_inf} informative sources do not fit in "
                f"{self.channels} channels")

    @property
    def mean_iti(self):
        return 0.5 * (self.iti_min + self.iti_max)


@dataclass(frozen=True)
class GroundTruth:
    """Latent path and noiseless RTs behind a synthetic session.

    ``mixing`` maps sources to channels; ``informative`` lists the source
    rows modulated by the latent state.
    """

    latent_times: np.ndarray
    latent_path: np.ndarray
    event_times: np.ndarray
    true_rts: np.ndarray
    mixing: np.ndarray = field(repr=False)
    informative: tuple = ()
    rt_base: float = 0.0


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _latent(rng, cfg):
    n = int(np.ceil(cfg.session_length * LATENT_RATE)) + 1
    times = np.arange(n) / LATENT_RATE
    a = np.exp(-1.0 / (cfg.latent_timescale * LATENT_RATE))
    x = np.empty(n)
    x[0] = rng.standard_normal()
    eps = rng.standard_normal(n) * np.sqrt(1 - a * a)
    for i in range(1, n):
        x[i] = a * x[i - 1] + eps[i]
    # second-order smoothing removes the OU roughness
    width = max(1, int(cfg.latent_timescale * LATENT_RATE / 4))
    kern = np.exp(-0.5 * (np.arange(-3 * width, 3 * width + 1) / width) ** 2)
    pad = np.pad(x, 3 * width, mode="reflect")
    x = np.convolve(pad, kern / kern.sum(), mode="valid")
    x = (x - x.mean()) / (x.std() + 1e-12)
    return times, 2.0 * np.tanh(0.75 * x)


def _shaped_noise(rng, n_rows, n, fs, shape):
    spec = np.fft.rfft(rng.standard_normal((n_rows, n)), axis=1)
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    out = np.fft.irfft(spec * shape(freqs), n=n, axis=1)
    out -= out.mean(axis=1, keepdims=True)
    return out / out.std(axis=1, keepdims=True)


def _pink(f):
    return np.where((f >= 1.0) & (f <= 30.0), 1.0 / np.sqrt(np.maximum(f, 1.0)),
                    0.0)


def _band(lo, hi):
    def shape(f):
        return ((f >= lo) & (f < hi)).astype(float)
    return shape


def _events(rng, cfg):
    onsets = []
    t = cfg.lead_in + rng.uniform(cfg.iti_min, cfg.iti_max)
    while t < cfg.session_length:
        onsets.append(t)
        t += rng.uniform(cfg.iti_min, cfg.iti_max)
    return np.round(np.array(onsets) * cfg.sample_rate) / cfg.sample_rate


def subject_rt_base(cfg, subject_index):
    """RT baseline of a subject, spread log-uniformly around ``rt_baseline``.

    Uses a golden-ratio sequence so any run of consecutive subjects covers
    the range evenly.
    """
    u = (subject_index * GOLDEN + _unit(cfg.seed)) % 1.0
    return cfg.rt_baseline * np.exp(cfg.rt_log_spread * (u - 0.5))


def _unit(seed):
    return np.random.default_rng([seed, 0xBA5E]).uniform()


def generate_session(cfg, subject_index=0, session_index=0):
    """One synthetic session and its ground truth.

    Deterministic in ``(cfg, subject_index, session_index)``. The mixing
    matrix depends only on ``(cfg.seed, subject_index)`` so sessions of one
    subject share a head model.
    """
    head = np.random.default_rng([cfg.seed, subject_index, 0xC0FFEE])
    rng = np.random.default_rng([cfg.seed, subject_index, session_index])
    fs = cfg.sample_rate
    n = int(round(cfg.session_length * fs))
    c = cfg.channels

    mixing = head.standard_normal((c, c)) / np.sqrt(c)
    gains = cfg.power_gain * head.uniform(0.7, 1.3, cfg.n_power_sources)
    gains *= np.where(np.arange(cfg.n_power_sources) % 2 == 0, 1.0, -1.0)
    base = subject_rt_base(cfg, subject_index)

    lat_t, z = _latent(rng, cfg)
    z_fast = np.interp(np.arange(n) / fs, lat_t, z)

    src = _shaped_noise(rng, c, n, fs, _pink)
    informative = []
    row = 0
    for i in range(cfg.n_power_sources):
        shape = _band(4.0, 8.0) if i % 2 == 0 else _band(8.0, 13.0)
        src[row] = _shaped_noise(rng, 1, n, fs, shape)[0]
        src[row] *= np.exp(0.5 * cfg.coupling * gains[i] * z_fast)
        informative.append(row)
        row += 1
    for i in range(cfg.n_corr_pairs):
        shape = _band(*cfg.corr_band)
        a, b = _shaped_noise(rng, 2, n, fs, shape)
        theta = np.pi / 4 + cfg.coupling * cfg.corr_gain * z_fast
        if i % 2:
            theta = np.pi / 4 - cfg.coupling * cfg.corr_gain * z_fast
        src[row] = a
        src[row + 1] = np.cos(theta) * b + np.sin(theta) * a
        informative.extend([row, row + 1])
        row += 2

    data = mixing @ src
    data += cfg.noise_floor * rng.standard_normal((c, n))

    onsets = _events(rng, cfg)
    z_ev = np.interp(onsets, lat_t, z)
    true_rts = np.maximum(base + 0.4 * _sigmoid(z_ev), RT_FLOOR)
    rts = np.maximum(true_rts + cfg.rt_noise * rng.standard_normal(len(onsets)),
                     RT_FLOOR)

    rec = SessionRecording(fs, data.astype(np.float32),
                           np.column_stack([onsets, rts]),
                           subject_id=f"S{subject_index + 1:02d}",
                           session_id=str(session_index))
    truth = GroundTruth(lat_t, z, onsets, true_rts, mixing, tuple(informative),
                        base)
    return rec, truth


def generate_benchmark(cfg, n_subjects, with_truth=False):
    """One session per subject, subjects ``S01 .. S{n}``."""
    out = [generate_session(cfg, i) for i in range(n_subjects)]
    if with_truth:
        return out
    return [rec for rec, _ in out]


def with_coupling(cfg, coupling):
    return replace(cfg, coupling=coupling)
