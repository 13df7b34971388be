"""Feature extraction: band powers (FS1, FS2) and tangent-space features (FS3).

FS1
    Theta/alpha band power in dB of every recorded channel.
FS2
    The same band powers after CSPR-OVR spatial filtering.
FS3
    Weighted upper triangle of ``logm(M^{-1/2} Sigma_n M^{-1/2})`` where
    ``Sigma_n`` is the covariance of the spatially filtered trial and ``M``
    the Karcher mean of the training covariances.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.signal

from .exceptions import (IllConditionedError, InvalidBandError,
                         InvalidInputError, ShapeError)
from .spatial_filter import SpatialFilterBank, apply_filter
from .spd import (MeanConfig, intrinsic_mean, matrix_sqrt_and_invsqrt, shrink,
                  tangent_vectorize)
from .trial import Trial

DB_FLOOR = 1e-15
THETA = (4.0, 8.0)
ALPHA = (8.0, 13.0)
FEATURE_SETS = ("FS1", "FS2", "FS3")


@dataclass(frozen=True)
class PsdConfig:
    """Welch parameters and the frequency bands to report.

    ``window_length`` defaults to one second of samples; ``overlap`` is the
    fraction of a window shared by consecutive segments.
    """

    sample_rate: float = 250.0
    window_length: int = None
    overlap: float = 0.5
    bands: tuple = (THETA, ALPHA)

    def __post_init__(self):
        if self.window_length is None:
            object.__setattr__(self, "window_length",
                               int(round(self.sample_rate)))
        if not 0 <= self.overlap < 1:
            raise InvalidInputError("overlap must lie in [0, 1)")
        object.__setattr__(self, "bands",
                           tuple(tuple(map(float, b)) for b in self.bands))
        nyq = self.sample_rate / 2
        for lo, hi in self.bands:
            if not 0 <= lo < hi <= nyq:
                raise InvalidBandError(
                    f"band ({lo}, {hi}) Hz is outside [0, {nyq}] Hz")


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    feature_set: str

    @property
    def dim(self):
        return self.values.shape[-1]


def welch_band_power(x, cfg):
    """Band powers in dB from a Welch estimate (Hamming taper).

    Power in a band is the PSD integrated over the frequency bins whose
    centre lies in ``[low, high)``. Values under ``1e-15`` are clamped before
    taking ``10 log10``.

    Parameters
    ----------
    x : ndarray, shape (..., S)
        One or more signals; the last axis is time.
    cfg : PsdConfig

    Returns
    -------
    ndarray, shape (..., n_bands)
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] < cfg.window_length:
        raise InvalidInputError(
            f"signal has {x.shape[-1]} samples, shorter than the "
            f"{cfg.window_length}-sample Welch window")
    freqs, psd = scipy.signal.welch(
        x, fs=cfg.sample_rate, window="hamming", nperseg=cfg.window_length,
        noverlap=int(cfg.overlap * cfg.window_length), detrend=False,
        scaling="density", axis=-1)
    df = freqs[1] - freqs[0]
    out = np.empty(x.shape[:-1] + (len(cfg.bands),))
    for i, (lo, hi) in enumerate(cfg.bands):
        sel = (freqs >= lo) & (freqs < hi)
        out[..., i] = psd[..., sel].sum(axis=-1) * df
    return 10.0 * np.log10(np.maximum(out, DB_FLOOR))


def band_cross_spectra(x, cfg):
    """Band-integrated Welch cross-spectral matrices.

    For ``x`` of shape (..., C, S) returns (..., n_bands, C, C) real
    matrices ``P`` such that the band power of the projection ``w^T x`` is
    ``w^T P w``; the segmentation and scaling match
    :func:`welch_band_power` exactly.
    """
    x = np.asarray(x, dtype=float)
    seg = cfg.window_length
    step = seg - int(cfg.overlap * seg)
    if x.shape[-1] < seg:
        raise InvalidInputError(
            f"signal has {x.shape[-1]} samples, shorter than the "
            f"{seg}-sample Welch window")
    n_seg = (x.shape[-1] - seg) // step + 1
    win = scipy.signal.get_window("hamming", seg)
    starts = np.arange(n_seg) * step
    idx = starts[:, None] + np.arange(seg)
    segs = x[..., idx] * win
    spec = np.fft.rfft(segs, axis=-1)
    freqs = np.fft.rfftfreq(seg, 1.0 / cfg.sample_rate)
    df = freqs[1] - freqs[0]
    weight = np.full(freqs.size, 2.0)
    weight[0] = 1.0
    if seg % 2 == 0:
        weight[-1] = 1.0
    scale = df / (cfg.sample_rate * (win ** 2).sum() * n_seg)
    out = []
    for lo, hi in cfg.bands:
        sel = (freqs >= lo) & (freqs < hi)
        z = spec[..., sel] * np.sqrt(weight[sel] * scale)
        p = np.einsum("...csf,...dsf->...cd", z, z.conj()).real
        out.append(0.5 * (p + np.swapaxes(p, -1, -2)))
    return np.stack(out, axis=-3)


def band_powers_from_cross_spectra(cross, weights):
    """dB band powers of the projections ``weights`` (C, R).

    Output is channel-major like :func:`band_power_features`.
    """
    p = np.sum((cross @ weights) * weights, axis=-2)
    p = np.swapaxes(p, -1, -2)
    p = 10.0 * np.log10(np.maximum(p, DB_FLOOR))
    return p.reshape(p.shape[:-2] + (-1,))


def _data(trial):
    return trial.data if isinstance(trial, Trial) else np.asarray(trial, float)


def band_power_features(data, cfg):
    """Flattened band powers, channel-major: ``[c0_b0, c0_b1, c1_b0, ...]``."""
    bp = welch_band_power(data, cfg)
    return bp.reshape(bp.shape[:-2] + (-1,))


def extract_fs1(trial, cfg):
    """Band powers of every recorded channel."""
    return FeatureVector(band_power_features(_data(trial), cfg), "FS1")


def extract_fs2(trial, bank, cfg):
    """Band powers of the spatially filtered trial."""
    return FeatureVector(
        band_power_features(apply_filter(bank, _data(trial)), cfg), "FS2")


def guarded(data, edge_guard):
    """Drop the first and last ``edge_guard`` fraction of samples."""
    if not edge_guard:
        return data
    s = data.shape[-1]
    cut = int(np.floor(edge_guard * s))
    return data[..., cut:s - cut]


def scatter_matrices(data, edge_guard=0.0):
    """Per-trial ``X X^T`` and the number of samples used.

    Parameters
    ----------
    data : ndarray, shape (N, C, S) or (C, S)
    """
    data = guarded(np.asarray(data, dtype=float), edge_guard)
    return data @ np.swapaxes(data, -1, -2), data.shape[-1]


@dataclass(frozen=True)
class TangentSpaceModel:
    """Training-set reference point for FS3.

    ``invsqrt_cache`` holds ``reference_mean^{-1/2}`` so extraction is two
    matrix products and one eigendecomposition per trial.
    """

    reference_mean: np.ndarray
    filter_bank: SpatialFilterBank
    invsqrt_cache: np.ndarray = field(repr=False)
    shrinkage: float = 0.0
    edge_guard: float = 0.0

    @property
    def dim(self):
        r = self.reference_mean.shape[0]
        return r * (r + 1) // 2


def filtered_covariances(scatter, n_samples, bank, shrinkage=0.0):
    """``W^T (X X^T / S) W`` for a stack of scatter matrices."""
    w = bank.weights
    covs = w.T @ (np.asarray(scatter) / n_samples) @ w
    covs = 0.5 * (covs + np.swapaxes(covs, -1, -2))
    return shrink(covs, shrinkage)


def fit_tangent_from_covariances(covs, bank, cfg=None, shrinkage=0.0,
                                 edge_guard=0.0):
    """Karcher mean of training covariances wrapped as a model."""
    mean = intrinsic_mean(covs, cfg or MeanConfig())
    _, invsqrt = matrix_sqrt_and_invsqrt(mean)
    return TangentSpaceModel(mean, bank, invsqrt, shrinkage, edge_guard)


def fit_tangent_model(trials, bank, cfg=None, shrinkage=0.0, edge_guard=0.0):
    """Fit the FS3 reference mean on training trials.

    Raises
    ------
    NonConvergenceError, IllConditionedError
        Propagated from the Karcher mean.
    """
    data = np.stack([_data(t) for t in trials])
    scatter, s = scatter_matrices(data, edge_guard)
    covs = filtered_covariances(scatter, s, bank, shrinkage)
    return fit_tangent_from_covariances(covs, bank, cfg, shrinkage, edge_guard)


def tangent_features(covs, model):
    """FS3 vectors for precomputed filtered covariances ``(..., R, R)``."""
    covs = np.asarray(covs, dtype=float)
    if covs.shape[-1] != model.reference_mean.shape[0]:
        raise ShapeError("covariance dimension does not match the model")
    try:
        return tangent_vectorize(model.reference_mean, covs,
                                 model.invsqrt_cache)
    except InvalidInputError as exc:
        raise IllConditionedError(
            "trial covariance is not positive definite; fit with shrinkage"
        ) from exc


def extract_fs3(trial, model):
    """Tangent-space features of one trial against a fitted model."""
    data = _data(trial)
    if data.shape[-2] != model.filter_bank.channels:
        raise ShapeError(
            f"trial has {data.shape[-2]} channels, model expects "
            f"{model.filter_bank.channels}")
    scatter, s = scatter_matrices(data, model.edge_guard)
    cov = filtered_covariances(scatter[None], s, model.filter_bank,
                               model.shrinkage)[0]
    return FeatureVector(tangent_features(cov, model), "FS3")


def feature_names(feature_set, dim):
    return [f"{feature_set.lower()}_{i}" for i in range(dim)]


def write_feature_csv(path, feature_set, features, labels=None):
    """CSV with header ``fsX_0, fsX_1, ...`` (plus ``label`` if given)."""
    features = np.atleast_2d(features)
    header = feature_names(feature_set, features.shape[1])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header + (["label"] if labels is not None else []))
        for i, row in enumerate(features):
            vals = [repr(float(v)) for v in row]
            if labels is not None:
                vals.append(repr(float(labels[i])))
            writer.writerow(vals)


def read_feature_csv(path):
    """Inverse of :func:`write_feature_csv`; returns ``(features, labels)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    if header and header[-1] == "label":
        return body[:, :-1], body[:, -1]
    return body, None


def save_feature_matrix(path, feature_set, features, labels):
    """Compact binary form (``.npz``) consumed by the evaluation harness."""
    np.savez(path, feature_set=np.array(feature_set),
             features=np.asarray(features, dtype=float),
             labels=np.asarray(labels, dtype=float))


def load_feature_matrix(path):
    with np.load(path) as z:
        return str(z["feature_set"]), z["features"], z["labels"]
