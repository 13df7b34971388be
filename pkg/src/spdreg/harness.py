"""Repeated k-fold evaluation of (feature set x regressor) cells.

Everything supervised - spatial filters, the tangent reference mean, LASSO
standardisation and lambda - is fitted inside a fold from the training
indices only. Label-free per-trial quantities (scatter matrices, FS1
band powers and band cross-spectra for FS2) are computed once per subject.
"""

import hashlib
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import (ConfigError, FoldTooSmallError, IllConditionedError,
                         NonConvergenceError)
from .features import (FEATURE_SETS, PsdConfig, band_cross_spectra,
                       band_power_features, band_powers_from_cross_spectra,
                       filtered_covariances, fit_tangent_from_covariances,
                       scatter_matrices, tangent_features)
from .preprocess import PASSBAND, prepare_trials
from .regression import knn_fit, knn_predict, lasso_fit_cv, lasso_predict
from .spatial_filter import FS2_FILTERS, FS3_FILTERS, FilterConfig, fit_filter_bank
from .spd import MeanConfig

log = logging.getLogger(__name__)

REGRESSORS = ("lasso", "knn")
NUMERICAL_FAILURES = (NonConvergenceError, IllConditionedError)


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything needed to reproduce an evaluation run."""

    dataset_paths: tuple = ()
    feature_sets: tuple = FEATURE_SETS
    regressors: tuple = REGRESSORS
    folds: int = 5
    repeats: int = 10
    seed: int = 0
    filter_configs: dict = field(default_factory=lambda: {
        "FS2": FS2_FILTERS, "FS3": FS3_FILTERS})
    trial_length: float = 5.0
    sweep: tuple = None
    band: tuple = PASSBAND
    psd: PsdConfig = None
    mean_cfg: MeanConfig = MeanConfig()
    shrinkage: float = 0.0
    edge_guard: float = 0.0
    knn_k: int = 5
    inner_folds: int = 5
    lambda_grid_size: int = 100

    def __post_init__(self):
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        bad = set(self.feature_sets) - set(FEATURE_SETS)
        if bad:
            raise ConfigError(f"unknown feature sets {sorted(bad)}")
        bad = set(self.regressors) - set(REGRESSORS)
        if bad:
            raise ConfigError(f"unknown regressors {sorted(bad)}")
        if self.sweep is not None:
            axis, values = self.sweep
            if axis not in ("F", "trial_length") or not len(values):
                raise ConfigError(
                    "sweep must be ('F', [...]) or ('trial_length', [...])")
        object.__setattr__(self, "feature_sets", tuple(self.feature_sets))
        object.__setattr__(self, "regressors", tuple(self.regressors))
        object.__setattr__(self, "dataset_paths", tuple(self.dataset_paths))

    def psd_config(self, sample_rate):
        if self.psd is not None:
            return self.psd
        return PsdConfig(sample_rate=sample_rate)

    def check_channels(self, channels):
        f_sweep = self.sweep is not None and self.sweep[0] == "F"
        for fs in self.feature_sets:
            # an F sweep replaces the configured filters
            if fs in self.filter_configs and not f_sweep:
                self.filter_configs[fs].check_channels(channels)
        if f_sweep:
            too_big = [f for f in self.sweep[1] if f > channels]
            if too_big:
                raise ConfigError(
                    f"F values {too_big} exceed the channel count {channels}")
        if "FS3" in self.feature_sets:
            configs = ([FilterConfig(FS2_FILTERS.k_classes, int(f))
                        for f in self.sweep[1]] if f_sweep
                       else [self.filter_configs["FS3"]])
            for cfg in configs:
                check_fs3_rank(cfg, channels, self.shrinkage)


def check_fs3_rank(config, channels, shrinkage=0.0):
    """Reject FS3 filter banks whose covariances are necessarily singular.

    ``K * F`` filtered signals are mixtures of ``channels`` sensors, so
    without shrinkage their covariance has rank at most ``channels``.
    """
    if shrinkage == 0 and config.n_filters > channels:
        raise ConfigError(
            f"FS3 with K={config.k_classes}, F={config.filters_per_class} "
            f"needs at least {config.n_filters} channels, got {channels}; "
            f"use fewer filters or shrinkage")


@dataclass
class SubjectData:
    """Band-passed trials of one subject plus label-free caches."""

    subject_id: str
    data: np.ndarray
    labels: np.ndarray
    onsets: np.ndarray
    sample_rate: float
    scatter: np.ndarray = None
    n_samples: int = 0
    fs1: np.ndarray = None
    cross: np.ndarray = None

    @classmethod
    def from_trials(cls, subject_id, trials, sample_rate, spec):
        data = np.stack([t.data for t in trials])
        out = cls(subject_id, data,
                  np.array([t.label for t in trials], dtype=float),
                  np.array([t.onset_time for t in trials], dtype=float),
                  sample_rate)
        out.scatter, out.n_samples = scatter_matrices(data, spec.edge_guard)
        if "FS1" in spec.feature_sets:
            out.fs1 = band_power_features(data, spec.psd_config(sample_rate))
        if "FS2" in spec.feature_sets:
            out.cross = band_cross_spectra(data, spec.psd_config(sample_rate))
        return out

    @property
    def n_trials(self):
        return len(self.labels)

    @property
    def channels(self):
        return self.data.shape[1]


@dataclass
class CellResult:
    subject_id: str
    feature_set: str
    regressor: str
    rmse: float
    cc: float
    per_repeat: list
    train_time_s: float = 0.0
    degenerate: bool = False
    failures: int = 0
    error: str = ""
    predictions: list = field(default_factory=list, repr=False)

    @property
    def key(self):
        return f"{self.subject_id}_{self.feature_set}_{self.regressor}"

    @property
    def failed(self):
        return self.failures > 0


def derive_seed(*parts):
    """Stable 64-bit seed from arbitrary parts (independent of PYTHONHASHSEED)."""
    text = "\x1f".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(text).digest()[:8], "little")


def fold_assignment(n, folds, seed):
    """Random split of ``range(n)`` into ``folds`` test sets."""
    if n // folds < 2:
        raise FoldTooSmallError(
            f"{n} trials cannot fill {folds} folds with >= 2 test points")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, folds)]


def regression_metrics(truth, pred):
    """RMSE, Pearson CC and the degenerate flag for constant predictions."""
    truth = np.asarray(truth, dtype=float)
    pred = np.asarray(pred, dtype=float)
    rmse = float(np.sqrt(np.mean((truth - pred) ** 2)))
    pc, tc = pred - pred.mean(), truth - truth.mean()
    denom = np.sqrt((pc @ pc) * (tc @ tc))
    if denom <= 1e-300 or np.ptp(pred) <= 1e-12 * max(1.0, abs(pred.mean())):
        return rmse, 0.0, True
    return rmse, float((pc @ tc) / denom), False


def _feature_blocks(subject, train, feature_sets, spec, capture=None):
    """Train/test feature matrices per feature set for one fold.

    Returns ``{feature_set: (x_all, params)}`` where ``x_all`` covers every
    trial of the subject but was built from training-fold fits only.
    """
    out = {}
    y_train = subject.labels[train]
    for fs in feature_sets:
        if fs == "FS1":
            out[fs] = (subject.fs1, {})
            continue
        bank = fit_filter_bank(subject.scatter[train], y_train,
                               spec.filter_configs[fs], spec.shrinkage)
        if fs == "FS2":
            x = band_powers_from_cross_spectra(subject.cross, bank.weights)
            out[fs] = (x, {"weights": bank.weights})
        else:
            covs = filtered_covariances(subject.scatter, subject.n_samples,
                                        bank, spec.shrinkage)
            model = fit_tangent_from_covariances(
                covs[train], bank, spec.mean_cfg, spec.shrinkage,
                spec.edge_guard)
            out[fs] = (tangent_features(covs, model),
                       {"weights": bank.weights,
                        "reference_mean": model.reference_mean})
    return out


def _fit_predict(regressor, x_train, y_train, x_test, spec, seed):
    if regressor == "lasso":
        model = lasso_fit_cv(x_train, y_train, spec.inner_folds,
                             spec.lambda_grid_size, seed)
        params = {"coefficients": model.coefficients,
                  "intercept": np.array([model.intercept]),
                  "lambda": np.array([model.lam])}
        return lasso_predict(model, x_test), params
    model = knn_fit(x_train, y_train, spec.knn_k)
    params = {"train_features": model.train_features,
              "train_labels": model.train_labels}
    return knn_predict(model, x_test), params


def run_subject(subject, spec, cells=None, capture=None, fit_predict=None):
    """All requested cells of one subject.

    Parameters
    ----------
    subject : SubjectData
    spec : ExperimentSpec
    cells : list of (feature_set, regressor), optional
        Defaults to the full product from ``spec``.
    capture : callable, optional
        Called as ``capture(repeat, fold, feature_set, regressor, params)``
        with every fitted parameter array; used by the leakage canary.
    fit_predict : callable, optional
        Replaces the built-in regressors. Called as
        ``fit_predict(regressor, x_train, y_train, x_test, spec, seed)`` and
        returns ``(predictions, params)``.

    Returns
    -------
    list of CellResult
    """
    if cells is None:
        cells = [(fs, rg) for fs in spec.feature_sets for rg in spec.regressors]
    fit_predict = fit_predict or _fit_predict
    feature_sets = list(dict.fromkeys(fs for fs, _ in cells))
    n = subject.n_trials
    y = subject.labels
    preds = {c: np.full((spec.repeats, n), np.nan) for c in cells}
    fails = {c: 0 for c in cells}
    errors = {c: "" for c in cells}
    timing = {c: 0.0 for c in cells}

    for r in range(spec.repeats):
        seed = derive_seed(spec.seed, subject.subject_id, r)
        for f, test in enumerate(fold_assignment(n, spec.folds, seed)):
            train = np.setdiff1d(np.arange(n), test)
            for fs in feature_sets:
                t0 = time.perf_counter()
                try:
                    x, fparams = _feature_blocks(subject, train, [fs], spec)[fs]
                except NUMERICAL_FAILURES as exc:
                    for c in cells:
                        if c[0] == fs:
                            fails[c] += 1
                            errors[c] = f"{type(exc).__name__}: {exc}"
                    continue
                t_feat = time.perf_counter() - t0
                for c in cells:
                    if c[0] != fs:
                        continue
                    t1 = time.perf_counter()
                    inner_seed = derive_seed(seed, f, fs, c[1])
                    try:
                        p, rparams = fit_predict(c[1], x[train], y[train],
                                                 x[test], spec, inner_seed)
                    except NUMERICAL_FAILURES as exc:
                        fails[c] += 1
                        errors[c] = f"{type(exc).__name__}: {exc}"
                        continue
                    timing[c] += t_feat + time.perf_counter() - t1
                    preds[c][r, test] = p
                    if capture is not None:
                        capture(r, f, fs, c[1], {**fparams, **rparams})

    results = []
    n_folds_total = spec.repeats * spec.folds
    for c in cells:
        per_repeat, degenerate, pred_rows = [], False, []
        for r in range(spec.repeats):
            ok = ~np.isnan(preds[c][r])
            if ok.sum() < 2:
                continue
            rmse, cc, deg = regression_metrics(y[ok], preds[c][r, ok])
            per_repeat.append((rmse, cc))
            degenerate |= deg
            pred_rows.extend((r, int(i), float(y[i]), float(preds[c][r, i]))
                             for i in np.flatnonzero(ok))
        if per_repeat:
            rmse = float(np.mean([p[0] for p in per_repeat]))
            cc = float(np.mean([p[1] for p in per_repeat]))
        else:
            rmse = cc = float("nan")
        results.append(CellResult(
            subject.subject_id, c[0], c[1], rmse, cc, per_repeat,
            timing[c] / n_folds_total, degenerate, fails[c], errors[c],
            pred_rows))
    return results


def run_cv(subject, feature_set, regressor, spec, capture=None,
           fit_predict=None):
    """Repeated k-fold CV of a single (feature set, regressor) cell."""
    return run_subject(subject, spec, [(feature_set, regressor)], capture,
                       fit_predict)[0]


def load_subjects(spec, recordings=None, trial_length=None):
    """Group recordings by subject and build :class:`SubjectData`.

    ``recordings`` defaults to reading ``spec.dataset_paths``.
    """
    from .io import read_session

    if recordings is None:
        recordings = [read_session(p) for p in spec.dataset_paths]
    if not recordings:
        raise ConfigError("no recordings to evaluate")
    by_subject = {}
    for rec in recordings:
        by_subject.setdefault(rec.subject_id, []).append(rec)
    length = spec.trial_length if trial_length is None else trial_length
    subjects = []
    for sid in sorted(by_subject):
        recs = by_subject[sid]
        trials = prepare_trials(recs, length, spec.band)
        subjects.append(SubjectData.from_trials(sid, trials,
                                                recs[0].sample_rate, spec))
    return subjects


@dataclass
class MatrixResult:
    cells: list
    summary: dict


def improvement_pct(new, old, metric):
    """Percent improvement of ``new`` over ``old``; 0 for identical values.

    RMSE improves when it shrinks, CC when it grows.
    """
    if new == old:
        return 0.0
    if metric == "rmse":
        return 100.0 * (old - new) / old
    return 100.0 * (new - old) / abs(old) if old != 0 else float("nan")


def _nanmean(values):
    values = np.asarray(values, dtype=float)
    ok = ~np.isnan(values)
    return float(values[ok].mean()) if ok.any() else float("nan")


IMPROVEMENT_PAIRS = (("FS2", "FS1"), ("FS3", "FS1"), ("FS3", "FS2"))


def summarize(cells, spec):
    """Cross-subject means and pairwise percentage improvements."""
    means = {}
    for fs in spec.feature_sets:
        for rg in spec.regressors:
            sel = [c for c in cells if c.feature_set == fs
                   and c.regressor == rg and not np.isnan(c.rmse)]
            if sel:
                means[f"{fs}/{rg}"] = {
                    "rmse": float(np.mean([c.rmse for c in sel])),
                    "cc": float(np.mean([c.cc for c in sel])),
                    "n_subjects": len(sel)}
    index = {(c.subject_id, c.feature_set, c.regressor): c for c in cells}
    subjects = sorted({c.subject_id for c in cells})
    improvements = []
    for rg in spec.regressors:
        for new, old in IMPROVEMENT_PAIRS:
            if new not in spec.feature_sets or old not in spec.feature_sets:
                continue
            for metric in ("rmse", "cc"):
                per = []
                for sid in subjects:
                    a, b = index.get((sid, new, rg)), index.get((sid, old, rg))
                    if a is None or b is None:
                        continue
                    val = improvement_pct(getattr(a, metric),
                                          getattr(b, metric), metric)
                    per.append(val)
                    improvements.append({"subject_id": sid, "regressor": rg,
                                         "pair": f"{new}/{old}",
                                         "metric": metric, "percent": val})
                if per:
                    improvements.append({"subject_id": "mean", "regressor": rg,
                                         "pair": f"{new}/{old}",
                                         "metric": metric,
                                         "percent": _nanmean(per)})
    failed = [c.key for c in cells if c.failed]
    return {"means": means, "improvements": improvements,
            "failed_cells": failed, "n_cells": len(cells)}


def run_matrix(spec, subjects=None, recordings=None):
    """Every (subject x feature set x regressor) cell plus a summary."""
    if subjects is None:
        subjects = load_subjects(spec, recordings)
    for s in subjects:
        spec.check_channels(s.channels)
    cells = []
    for s in subjects:
        log.info("evaluating subject %s (%d trials)", s.subject_id,
                 s.n_trials)
        cells.extend(run_subject(s, spec))
    return MatrixResult(cells, summarize(cells, spec))


def _with_f(spec, f):
    k = FS2_FILTERS.k_classes
    return replace(spec, filter_configs={
        "FS2": FilterConfig(k, f), "FS3": FilterConfig(k, f)})


def run_sweep(spec, recordings=None, repeats=5):
    """``run_matrix`` per swept value; numerical failures become table data.

    Returns a list of row dicts keyed by ``value``, ``feature_set``,
    ``regressor`` with mean ``rmse``/``cc`` across subjects and the number
    of failed folds.
    """
    if spec.sweep is None:
        raise ConfigError("spec has no sweep axis")
    axis, values = spec.sweep
    base = replace(spec, repeats=repeats if repeats else spec.repeats,
                   sweep=spec.sweep)
    if recordings is None:
        from .io import read_session
        recordings = [read_session(p) for p in spec.dataset_paths]
    for rec in recordings:
        base.check_channels(rec.channels)

    subjects = None
    rows = []
    for value in values:
        if axis == "F":
            cur = _with_f(base, int(value))
            if subjects is None:
                subjects = load_subjects(cur, recordings)
            subj = subjects
        else:
            cur = replace(base, trial_length=float(value))
            subj = load_subjects(cur, recordings)
        result = run_matrix(cur, subj)
        for fs in cur.feature_sets:
            for rg in cur.regressors:
                sel = [c for c in result.cells
                       if c.feature_set == fs and c.regressor == rg]
                ok = [c for c in sel if not np.isnan(c.rmse)]
                rows.append({
                    "axis": axis, "value": value, "feature_set": fs,
                    "regressor": rg,
                    "rmse": float(np.mean([c.rmse for c in ok])) if ok
                    else float("nan"),
                    "cc": float(np.mean([c.cc for c in ok])) if ok
                    else float("nan"),
                    "failed_folds": int(sum(c.failures for c in sel)),
                    "failed_subjects": int(sum(c.failed for c in sel)),
                })
    return rows


def fs3_training(data, labels, config=FS3_FILTERS, mean_cfg=None,
                 shrinkage=0.0):
    """End-to-end FS3 training: filters, Karcher mean, tangent mapping."""
    scatter, s = scatter_matrices(data)
    bank = fit_filter_bank(scatter, labels, config, shrinkage)
    covs = filtered_covariances(scatter, s, bank, shrinkage)
    model = fit_tangent_from_covariances(covs, bank, mean_cfg, shrinkage)
    return model, tangent_features(covs, model)


@dataclass
class TimingFit:
    intercept: float
    slope: float
    r2: float
    n_values: list
    seconds: list


def fit_line(n_values, seconds):
    """Least-squares ``t = a + b N`` and its coefficient of determination."""
    n = np.asarray(n_values, dtype=float)
    t = np.asarray(seconds, dtype=float)
    design = np.column_stack([np.ones_like(n), n])
    (a, b), *_ = np.linalg.lstsq(design, t, rcond=None)
    resid = t - design @ np.array([a, b])
    ss_tot = np.sum((t - t.mean()) ** 2)
    r2 = 1.0 - resid @ resid / ss_tot if ss_tot > 0 else 1.0
    return float(a), float(b), float(r2)


def time_training(n_values, trials=None, gen_cfg=None, reps=3,
                  config=FS3_FILTERS):
    """Time FS3 training at each training-set size N and fit a line.

    ``trials`` is an ``(data, labels)`` pair with at least ``max(n_values)``
    band-passed trials; generated from ``gen_cfg`` when omitted. Each size
    is timed ``reps`` times and the fastest run kept.
    """
    n_values = list(n_values)
    if len(n_values) < 4:
        raise ConfigError("time_training needs at least 4 sizes")
    if trials is None:
        trials = bench_trials(max(n_values), gen_cfg)
    data, labels = trials
    check_fs3_rank(config, data.shape[1])
    fs3_training(data[:min(n_values)], labels[:min(n_values)], config)
    seconds = []
    for n in n_values:
        best = np.inf
        for _ in range(reps):
            t0 = time.perf_counter()
            fs3_training(data[:n], labels[:n], config)
            best = min(best, time.perf_counter() - t0)
        seconds.append(best)
    a, b, r2 = fit_line(n_values, seconds)
    return TimingFit(a, b, r2, n_values, seconds)


def bench_trials(n, gen_cfg=None, trial_length=5.0):
    """At least ``n`` band-passed synthetic trials from one subject."""
    from .synth import GeneratorConfig, generate_session

    gen_cfg = gen_cfg or GeneratorConfig()
    data, labels = [], []
    session = 0
    while len(labels) < n:
        rec, _ = generate_session(gen_cfg, 0, session)
        trials = prepare_trials([rec], trial_length)
        data.extend(t.data for t in trials)
        labels.extend(t.label for t in trials)
        session += 1
    return np.stack(data[:n]), np.array(labels[:n])
