"""LASSO by cyclic coordinate descent and inverse-distance-weighted kNN.

LASSO minimises ``(1/2N) sum (y - b0 - x^T b)^2 + lam * |b|_1`` on
standardised features (zero mean, unit population variance); coefficients
are mapped back to the original feature scale for prediction.
"""

import json
from dataclasses import dataclass, field

import numba
import numpy as np

from .exceptions import InvalidInputError, ShapeError

CD_TOL = 1e-7
KKT_TOL = 5e-7
MAX_SWEEPS = 10_000
ZERO_DISTANCE = 1e-12
POLISH_EVERY = 5
# inner-CV paths stop once this fraction of the variance of y is explained
DEV_RATIO_STOP = 0.99999


@numba.njit(cache=True)
def _soft(z, lam):
    if z > lam:
        return z - lam
    if z < -lam:
        return z + lam
    return 0.0


@numba.njit(cache=True)
def _sweep(xs, r, beta, lam, active_only, usable):
    n, d = xs.shape
    biggest = 0.0
    for j in range(d):
        if not usable[j]:
            continue
        bj = beta[j]
        if active_only and bj == 0.0:
            continue
        rho = 0.0
        for i in range(n):
            rho += xs[i, j] * r[i]
        rho = rho / n + bj
        new = _soft(rho, lam)
        delta = new - bj
        if delta != 0.0:
            for i in range(n):
                r[i] -= delta * xs[i, j]
            beta[j] = new
            if abs(delta) > biggest:
                biggest = abs(delta)
    return biggest


@numba.njit(cache=True)
def _kkt_ok(xs, r, beta, lam, usable, kkt_tol):
    n, d = xs.shape
    for j in range(d):
        if not usable[j]:
            continue
        g = 0.0
        for i in range(n):
            g -= xs[i, j] * r[i]
        g /= n
        if beta[j] == 0.0:
            if abs(g) > lam + kkt_tol:
                return False
        else:
            s = 1.0 if beta[j] > 0 else -1.0
            if abs(g + s * lam) > kkt_tol:
                return False
    return True


@numba.njit(cache=True)
def _residual(xs, yc, beta):
    n, d = xs.shape
    r = yc.copy()
    for j in range(d):
        if beta[j] != 0.0:
            for i in range(n):
                r[i] -= beta[j] * xs[i, j]
    return r


@numba.njit(cache=True)
def _objective(xs, yc, beta, lam):
    r = _residual(xs, yc, beta)
    return 0.5 * (r @ r) / xs.shape[0] + lam * np.abs(beta).sum()


@numba.njit(cache=True)
def _spd_solve(a, b):
    # Cholesky-backed solve; an empty result signals a (near) singular matrix
    try:
        low = np.linalg.cholesky(a)
    except Exception:
        return np.empty(0)
    for j in range(a.shape[0]):
        if low[j, j] * low[j, j] <= 1e-10 * a[j, j]:
            return np.empty(0)
    return np.linalg.solve(a, b)


@numba.njit(cache=True)
def _polish(xs, yc, beta, lam):
    # Least-squares step on the current support with frozen signs, clipped
    # at the first sign change (that coefficient is set to zero). Kept only
    # if the objective drops; convergence is still judged by the KKT check.
    # Returns 0 (rejected), 1 (unclipped step) or 2 (clipped step).
    n, d = xs.shape
    idx = np.flatnonzero(beta)
    m = idx.size
    if m == 0:
        return 0
    xa = np.empty((n, m))
    for k in range(m):
        xa[:, k] = xs[:, idx[k]]
    gram = xa.T @ xa / n
    rhs = xa.T @ yc / n
    for k in range(m):
        rhs[k] -= lam * (1.0 if beta[idx[k]] > 0 else -1.0)
    sol = _spd_solve(gram, rhs)
    if sol.size == 0:
        sol = np.linalg.lstsq(gram, rhs, 1e-12)[0]
    null = rhs - gram @ sol
    cur = np.empty(m)
    for k in range(m):
        cur[k] = beta[idx[k]]
    if np.sqrt(null @ null) > 1e-9 * (np.sqrt(rhs @ rhs) + 1e-300):
        # singular support: the objective falls linearly along ``null``
        # until some coefficient reaches zero
        direction = null
        step = np.inf
    else:
        direction = sol - cur
        step = 1.0
    hit = -1
    for k in range(m):
        if direction[k] * cur[k] < 0.0:
            t = -cur[k] / direction[k]
            if t < step:
                step = t
                hit = k
    if hit < 0 and not step <= 1.0:
        return 0
    trial = beta.copy()
    for k in range(m):
        trial[idx[k]] = cur[k] + step * direction[k]
    if hit >= 0:
        trial[idx[hit]] = 0.0
    if not _objective(xs, yc, trial, lam) < _objective(xs, yc, beta, lam):
        return 0
    beta[:] = trial
    return 1 if hit < 0 else 2


@numba.njit(cache=True)
def _cd_solve(xs, yc, beta, lam, usable, tol, max_sweeps, kkt_tol):
    # beta is updated in place; returns the number of sweeps used
    r = _residual(xs, yc, beta)
    sweeps = 0
    while sweeps < max_sweeps:
        change = _sweep(xs, r, beta, lam, False, usable)
        sweeps += 1
        if change < tol and _kkt_ok(xs, r, beta, lam, usable, kkt_tol):
            break
        inner_sweeps = 0
        next_polish = POLISH_EVERY
        while sweeps < max_sweeps:
            inner = _sweep(xs, r, beta, lam, True, usable)
            sweeps += 1
            inner_sweeps += 1
            if inner < tol:
                break
            if inner_sweeps == next_polish:
                status = _polish(xs, yc, beta, lam)
                if status == 0:
                    # back off geometrically while the support is unusable
                    next_polish *= 2
                else:
                    r = _residual(xs, yc, beta)
                    if status == 1:
                        break
                    next_polish += POLISH_EVERY
    return sweeps


@numba.njit(cache=True)
def _cd_path(xs, yc, lambdas, usable, tol, max_sweeps, kkt_tol, dev_stop):
    # returns the solutions and how many grid points were solved
    d = xs.shape[1]
    out = np.zeros((lambdas.size, d))
    beta = np.zeros(d)
    total = 0.0
    for i in range(yc.size):
        total += yc[i] * yc[i]
    for k in range(lambdas.size):
        _cd_solve(xs, yc, beta, lambdas[k], usable, tol, max_sweeps, kkt_tol)
        out[k] = beta
        if total > 0.0:
            r = _residual(xs, yc, beta)
            if 1.0 - (r @ r) / total >= dev_stop:
                return out, k + 1
    return out, lambdas.size


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray
    usable: np.ndarray

    @classmethod
    def fit(cls, x):
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        usable = scale > 1e-12 * np.maximum(1.0, np.abs(mean))
        return cls(mean, np.where(usable, scale, 1.0), usable)

    def transform(self, x):
        xs = (x - self.mean) / self.scale
        xs[:, ~self.usable] = 0.0
        return xs


@dataclass(frozen=True)
class LassoModel:
    """Fitted sparse linear model.

    ``coefficients`` and ``intercept`` act on raw features;
    ``std_coefficients`` are the solution on the standardised scale.
    """

    intercept: float
    coefficients: np.ndarray
    lam: float
    standardization: Standardizer = field(repr=False)
    std_coefficients: np.ndarray = field(repr=False)

    @property
    def n_selected(self):
        return int(np.count_nonzero(self.coefficients))

    def to_dict(self):
        return {
            "type": "lasso",
            "intercept": self.intercept,
            "coefficients": self.coefficients.tolist(),
            "lambda": self.lam,
            "feature_mean": self.standardization.mean.tolist(),
            "feature_scale": self.standardization.scale.tolist(),
            "feature_usable": self.standardization.usable.tolist(),
            "std_coefficients": self.std_coefficients.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        std = Standardizer(np.asarray(d["feature_mean"], float),
                           np.asarray(d["feature_scale"], float),
                           np.asarray(d["feature_usable"], bool))
        return cls(float(d["intercept"]),
                   np.asarray(d["coefficients"], float), float(d["lambda"]),
                   std, np.asarray(d["std_coefficients"], float))


def _check_xy(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise ShapeError(f"need x (N, D) and y (N,), got {x.shape}, {y.shape}")
    if x.shape[0] < 2:
        raise InvalidInputError("need at least two samples")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InvalidInputError("non-finite values in x or y")
    return x, y


def _canonical_rows(x, y):
    # fixed row order so fits do not depend on how the caller ordered rows
    order = np.lexsort(np.column_stack([x, y]).T[::-1])
    return x[order], y[order]


def _lmax(xs, yc):
    return float(np.max(np.abs(xs.T @ yc) / len(yc), initial=0.0))


def lambda_max(x, y):
    """Smallest ``lam`` for which every standardised coefficient is zero."""
    x, y = _canonical_rows(*_check_xy(x, y))
    xs = Standardizer.fit(x).transform(x)
    return _lmax(np.ascontiguousarray(xs), y - y.mean())


def lambda_grid(lam_max, size=100, ratio=1e-4):
    """``size`` log-spaced values from ``lam_max`` down to ``lam_max*ratio``."""
    if size == 1:
        return np.array([lam_max])
    return np.geomspace(lam_max, lam_max * ratio, size)


def _package(std, y_mean, beta_std, lam):
    coef = np.where(std.usable, beta_std / std.scale, 0.0)
    intercept = float(y_mean - coef @ std.mean)
    return LassoModel(intercept, coef, float(lam), std, beta_std.copy())


def lasso_path(x, y, lambdas, max_dev_ratio=None):
    """Warm-started solutions along ``lambdas`` (assumed descending).

    With ``max_dev_ratio`` set, the path stops at the first ``lam`` whose fit
    explains at least that fraction of the variance of ``y``, so the
    returned list may be shorter than ``lambdas``.
    """
    x, y = _canonical_rows(*_check_xy(x, y))
    std = Standardizer.fit(x)
    xs = np.ascontiguousarray(std.transform(x))
    yc = y - y.mean()
    lambdas = np.asarray(lambdas, dtype=float)
    stop = np.inf if max_dev_ratio is None else float(max_dev_ratio)
    betas, done = _cd_path(xs, yc, lambdas, std.usable, CD_TOL, MAX_SWEEPS,
                           KKT_TOL, stop)
    # the sweep's inner products round differently from _lmax
    betas[lambdas >= _lmax(xs, yc)] = 0.0
    return [_package(std, y.mean(), b, lam)
            for b, lam in zip(betas[:done], lambdas[:done])]


def lasso_fit(x, y, lam):
    """Coordinate-descent LASSO at a single ``lam`` (cold start).

    Constant features get a zero coefficient. For ``lam >= lambda_max`` the
    empty model with intercept ``mean(y)`` is returned exactly. Rows are put
    in a canonical order first, so the fit does not depend on row order.
    """
    x, y = _canonical_rows(*_check_xy(x, y))
    if lam < 0:
        raise InvalidInputError("lambda must be non-negative")
    std = Standardizer.fit(x)
    xs = np.ascontiguousarray(std.transform(x))
    yc = y - y.mean()
    beta = np.zeros(x.shape[1])
    if lam < _lmax(xs, yc):
        _cd_solve(xs, yc, beta, float(lam), std.usable, CD_TOL, MAX_SWEEPS,
                  KKT_TOL)
    return _package(std, y.mean(), beta, lam)


def lasso_objective(model, x, y):
    """Value of the penalised least-squares objective on standardised data."""
    xs = model.standardization.transform(np.asarray(x, float))
    res = (y - np.mean(y)) - xs @ model.std_coefficients
    return 0.5 * np.mean(res ** 2) + model.lam * np.abs(
        model.std_coefficients).sum()


def kkt_violation(model, x, y):
    """Largest subgradient-condition violation on the standardised scale."""
    std = model.standardization
    xs = std.transform(np.asarray(x, float))
    y = np.asarray(y, float)
    beta = model.std_coefficients
    grad = -xs.T @ ((y - y.mean()) - xs @ beta) / len(y)
    lam = model.lam
    zero = beta == 0
    viol = np.where(zero, np.maximum(np.abs(grad) - lam, 0.0),
                    np.abs(grad + np.sign(beta) * lam))
    return float(np.max(np.where(std.usable, viol, 0.0), initial=0.0))


def kfold_indices(n, folds, rng):
    """Shuffle ``range(n)`` with ``rng`` and split into ``folds`` parts."""
    return np.array_split(rng.permutation(n), folds)


def lasso_cv_curve(x, y, fold_count=5, lambda_grid_size=100, seed=0,
                   max_dev_ratio=DEV_RATIO_STOP):
    """Mean inner-fold RMSE over the lambda grid; returns (grid, rmse).

    Each fold path stops once it explains ``max_dev_ratio`` of the training
    variance (``None`` runs the whole grid); the grid is cut to the points
    every fold reached.
    """
    x, y = _check_xy(x, y)
    if fold_count < 2 or fold_count > len(y):
        raise InvalidInputError(
            f"fold_count must be in [2, {len(y)}], got {fold_count}")
    grid = lambda_grid(lambda_max(x, y), lambda_grid_size)
    rng = np.random.default_rng(seed)
    stop = np.inf if max_dev_ratio is None else float(max_dev_ratio)
    errs = np.zeros(len(grid))
    reached = len(grid)
    for val in kfold_indices(len(y), fold_count, rng):
        train = np.setdiff1d(np.arange(len(y)), val)
        std = Standardizer.fit(x[train])
        xs = np.ascontiguousarray(std.transform(x[train]))
        ytr = y[train]
        betas, done = _cd_path(xs, ytr - ytr.mean(), grid[:reached],
                               std.usable, CD_TOL, MAX_SWEEPS, KKT_TOL, stop)
        reached = min(reached, done)
        pred = ytr.mean() + std.transform(x[val]) @ betas[:done].T
        errs[:done] += np.sqrt(
            np.mean((pred - y[val, None]) ** 2, axis=0))
    return grid[:reached], errs[:reached] / fold_count


def lasso_fit_cv(x, y, fold_count=5, lambda_grid_size=100, seed=0):
    """LASSO with ``lam`` chosen by inner k-fold cross-validation.

    The grid spans ``[lambda_max * 1e-4, lambda_max]`` log-uniformly; the
    grid point with the lowest mean fold RMSE is refit on all rows.
    """
    x, y = _check_xy(x, y)
    grid, errs = lasso_cv_curve(x, y, fold_count, lambda_grid_size, seed)
    if grid[0] == 0:
        return lasso_fit(x, y, 0.0)
    best = int(np.argmin(errs))
    return lasso_path(x, y, grid[:best + 1])[-1]


def lasso_predict(model, x):
    """``b0 + b^T x`` for one vector or a stack of rows."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.coefficients.shape[0]:
        raise ShapeError(
            f"expected {model.coefficients.shape[0]} features, got "
            f"{x.shape[-1]}")
    return model.intercept + x @ model.coefficients


@dataclass(frozen=True)
class KnnModel:
    """Stored training set for inverse-distance-weighted kNN.

    ``source`` and ``rows`` optionally record where the training matrix came
    from so the model can be serialised by reference.
    """

    train_features: np.ndarray
    train_labels: np.ndarray
    k: int = 5
    source: str = None
    rows: tuple = None

    def __post_init__(self):
        if self.k < 1 or self.k > len(self.train_labels):
            raise InvalidInputError(
                f"k={self.k} must be in [1, {len(self.train_labels)}]")

    def to_dict(self):
        if self.source is None:
            raise InvalidInputError(
                "kNN models serialise by reference; set source and rows")
        return {"type": "knn", "k": self.k, "source": self.source,
                "rows": list(self.rows)}


def knn_fit(x, y, k=5, source=None, rows=None):
    x, y = _check_xy(x, y)
    return KnnModel(x, y, k, source, None if rows is None else tuple(rows))


def knn_predict(model, x):
    """Inverse-distance weighted mean over the ``k`` nearest training rows.

    Neighbours at distance below ``1e-12`` take over: the result is the plain
    mean of their labels. Ties at the k-th distance go to the lower row index.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    q = np.atleast_2d(x)
    if q.shape[1] != model.train_features.shape[1]:
        raise ShapeError(
            f"expected {model.train_features.shape[1]} features, got "
            f"{q.shape[1]}")
    out = np.empty(len(q))
    for i, row in enumerate(q):
        dist = np.linalg.norm(model.train_features - row, axis=1)
        nn = np.argsort(dist, kind="stable")[:model.k]
        d, lab = dist[nn], model.train_labels[nn]
        exact = d < ZERO_DISTANCE
        if exact.any():
            out[i] = lab[exact].mean()
        else:
            w = 1.0 / d
            out[i] = (w @ lab) / w.sum()
    return out[0] if single else out


def save_model(model, path):
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh)


def load_lasso(path):
    with open(path) as fh:
        return LassoModel.from_dict(json.load(fh))
