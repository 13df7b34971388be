"""CSPR-OVR: one-versus-rest spatial filters for a continuous target.

Labels are split into ``K`` overlapping fuzzy classes anchored at evenly
spaced percentiles. Each class gets a membership-weighted mean scatter
matrix, and the ``F`` filters of class ``k`` are the leading generalized
eigenvectors of the pencil (class ``k`` scatter, sum of the other scatters).
"""

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .exceptions import (ConfigError, DegenerateLabelsError, EmptyClassError,
                         IllConditionedError, ShapeError)
from .spd import shrink
from .trial import Trial, stack_trials

EMPTY_CLASS_WEIGHT = 1e-9


@dataclass(frozen=True)
class FuzzyPartition:
    """Triangular fuzzy classes with apexes at label percentiles.

    ``percentile_points[k] = 100 (k + 1) / (K + 1)`` and
    ``percentile_values`` are the empirical label percentiles there. Class 0
    has a left shoulder and class ``K - 1`` a right shoulder, so the
    memberships of any label sum to one.
    """

    percentile_points: np.ndarray
    percentile_values: np.ndarray

    @property
    def k_classes(self):
        return len(self.percentile_points)

    def membership(self, y):
        """Membership degrees, shape ``(len(y), K)``."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        apex = self.percentile_values
        k = len(apex)
        mu = np.zeros((y.size, k))
        if k == 1:
            mu[:] = 1.0
            return mu
        yc = np.clip(y, apex[0], apex[-1])
        seg = np.clip(np.searchsorted(apex, yc, side="right") - 1, 0, k - 2)
        span = apex[seg + 1] - apex[seg]
        with np.errstate(invalid="ignore", divide="ignore"):
            t = np.where(span > 0, (yc - apex[seg]) / span, 1.0)
        rows = np.arange(y.size)
        mu[rows, seg] = 1.0 - t
        mu[rows, seg + 1] += t
        return mu


@dataclass(frozen=True)
class FilterConfig:
    """Number of fuzzy classes ``k_classes`` and filters per class."""

    k_classes: int = 3
    filters_per_class: int = 10

    def __post_init__(self):
        if self.k_classes < 1 or self.filters_per_class < 1:
            raise ConfigError("k_classes and filters_per_class must be >= 1")

    @property
    def n_filters(self):
        return self.k_classes * self.filters_per_class

    def check_channels(self, channels):
        if self.filters_per_class > channels:
            raise ConfigError(
                f"filters_per_class={self.filters_per_class} exceeds the "
                f"channel count {channels}")


FS2_FILTERS = FilterConfig(k_classes=3, filters_per_class=10)
FS3_FILTERS = FilterConfig(k_classes=10, filters_per_class=3)


@dataclass(frozen=True)
class SpatialFilterBank:
    """Trained projection ``weights`` of shape (C, K * F).

    Columns ``k * F .. (k + 1) * F - 1`` belong to class ``k`` and are sorted
    by descending generalized eigenvalue (``eigenvalues[k]``).
    """

    weights: np.ndarray
    config: FilterConfig
    partition: FuzzyPartition
    eigenvalues: np.ndarray
    class_covs: np.ndarray = field(default=None, repr=False)

    @property
    def channels(self):
        return self.weights.shape[0]

    def to_dict(self):
        return {
            "format": "spdreg-filterbank",
            "version": 1,
            "config": {"k_classes": self.config.k_classes,
                       "filters_per_class": self.config.filters_per_class},
            "percentile_points": self.partition.percentile_points.tolist(),
            "percentile_values": self.partition.percentile_values.tolist(),
            "shape": list(self.weights.shape),
            "weights": self.weights.ravel(order="C").tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        cfg = FilterConfig(**d["config"])
        part = FuzzyPartition(np.asarray(d["percentile_points"], dtype=float),
                              np.asarray(d["percentile_values"], dtype=float))
        w = np.asarray(d["weights"], dtype=float).reshape(d["shape"])
        return cls(w, cfg, part, np.asarray(d["eigenvalues"], dtype=float))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def build_partition(labels, k_classes):
    """Fuzzy partition of the label range into ``k_classes`` classes.

    Raises
    ------
    DegenerateLabelsError
        If ``labels`` holds fewer than ``k_classes + 1`` distinct values.
    """
    labels = np.asarray(labels, dtype=float)
    if np.unique(labels).size < k_classes + 1:
        raise DegenerateLabelsError(
            f"need at least {k_classes + 1} distinct labels for "
            f"{k_classes} fuzzy classes")
    points = 100.0 * np.arange(1, k_classes + 1) / (k_classes + 1)
    values = np.percentile(labels, points)
    return FuzzyPartition(points, np.maximum.accumulate(values))


def class_covariances_from_scatter(scatter, labels, partition):
    """Membership-weighted means of per-trial scatter matrices ``X X^T``.

    Parameters
    ----------
    scatter : ndarray, shape (N, C, C)
    labels : ndarray, shape (N,)
    partition : FuzzyPartition

    Returns
    -------
    ndarray, shape (K, C, C)
    """
    mu = partition.membership(labels)
    total = mu.sum(axis=0)
    empty = np.flatnonzero(total < EMPTY_CLASS_WEIGHT)
    if empty.size:
        raise EmptyClassError(f"fuzzy classes {empty.tolist()} are empty")
    covs = np.tensordot(mu, scatter, axes=(0, 0)) / total[:, None, None]
    return 0.5 * (covs + np.swapaxes(covs, -1, -2))


def class_covariances(trials, partition):
    """Fuzzy-class mean spatial covariances of a list of trials."""
    x, y = stack_trials(trials)
    scatter = x @ np.swapaxes(x, -1, -2)
    return class_covariances_from_scatter(scatter, y, partition)


def _canonical_sign(v):
    # first non-negligible component of each column made positive
    mag = np.abs(v)
    first = np.argmax(mag > 1e-12 * mag.max(axis=0), axis=0)
    signs = np.sign(v[first, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    return v * signs


def solve_filters(class_covs, f_per_class, shrinkage=0.0):
    """One-versus-rest generalized Rayleigh quotient filters.

    For class ``k`` the rest-sum ``B = sum_{i != k} S_i`` is Cholesky
    factored as ``L L^T``; the symmetric problem ``L^{-1} S_k L^{-T}`` is
    diagonalized and eigenvectors mapped back with ``L^{-T}``.

    Parameters
    ----------
    class_covs : ndarray, shape (K, C, C)
    f_per_class : int
    shrinkage : float
        Diagonal loading applied to every class covariance first.

    Returns
    -------
    weights : ndarray, shape (C, K * F)
        Unit-norm columns, first non-zero entry positive.
    eigenvalues : ndarray, shape (K, F)
        Rayleigh quotient of each column, descending within a class.
    """
    covs = shrink(np.asarray(class_covs, dtype=float), shrinkage)
    k, c, _ = covs.shape
    if k < 2:
        raise ConfigError("one-versus-rest filtering needs at least 2 classes")
    if f_per_class > c:
        raise ConfigError(
            f"filters_per_class={f_per_class} exceeds the channel count {c}")
    total = covs.sum(axis=0)
    blocks, evals = [], []
    for i in range(k):
        rest = total - covs[i]
        try:
            chol = scipy.linalg.cholesky(rest, lower=True)
        except np.linalg.LinAlgError as exc:
            raise IllConditionedError(
                f"rest-sum scatter of class {i} is singular; "
                "increase shrinkage") from exc
        tmp = scipy.linalg.solve_triangular(chol, covs[i], lower=True)
        whitened = scipy.linalg.solve_triangular(chol, tmp.T, lower=True)
        whitened = 0.5 * (whitened + whitened.T)
        w, u = np.linalg.eigh(whitened)
        order = np.argsort(w)[::-1][:f_per_class]
        v = scipy.linalg.solve_triangular(chol.T, u[:, order], lower=False)
        v /= np.linalg.norm(v, axis=0)
        blocks.append(_canonical_sign(v))
        evals.append(w[order])
    return np.hstack(blocks), np.array(evals)


def fit_filter_bank(scatter, labels, config, shrinkage=0.0):
    """Train a :class:`SpatialFilterBank` from per-trial scatter matrices."""
    scatter = np.asarray(scatter, dtype=float)
    config.check_channels(scatter.shape[-1])
    part = build_partition(labels, config.k_classes)
    covs = class_covariances_from_scatter(scatter, labels, part)
    weights, evals = solve_filters(covs, config.filters_per_class, shrinkage)
    return SpatialFilterBank(weights, config, part, evals,
                             class_covs=shrink(covs, shrinkage))


def train_filter_bank(trials, config, shrinkage=0.0):
    """Train a :class:`SpatialFilterBank` from labelled trials."""
    x, y = stack_trials(trials)
    return fit_filter_bank(x @ np.swapaxes(x, -1, -2), y, config, shrinkage)


def rayleigh_quotients(bank):
    """Rayleigh ratio of every column against the stored class covariances."""
    covs = bank.class_covs
    total = covs.sum(axis=0)
    f = bank.config.filters_per_class
    out = np.empty((bank.config.k_classes, f))
    for k in range(bank.config.k_classes):
        v = bank.weights[:, k * f:(k + 1) * f]
        num = np.einsum("cf,cd,df->f", v, covs[k], v)
        den = np.einsum("cf,cd,df->f", v, total - covs[k], v)
        out[k] = num / den
    return out


def apply_filter(bank, trial):
    """Spatially filter one trial: ``W^T X`` with the label kept."""
    if isinstance(trial, Trial):
        if trial.channels != bank.channels:
            raise ShapeError(
                f"trial has {trial.channels} channels, bank expects "
                f"{bank.channels}")
        return trial.with_data(bank.weights.T @ trial.data)
    data = np.asarray(trial, dtype=float)
    if data.shape[-2] != bank.channels:
        raise ShapeError(
            f"data has {data.shape[-2]} channels, bank expects {bank.channels}")
    return bank.weights.T @ data
