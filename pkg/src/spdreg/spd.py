"""Affine-invariant geometry on the manifold of SPD matrices.

Every matrix function goes through a symmetric eigendecomposition so the
outputs are exactly symmetric. All functions broadcast over leading axes:
an input of shape ``(..., R, R)`` is treated as a stack of matrices.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .exceptions import (IllConditionedError, InvalidInputError,
                         NonConvergenceError, ShapeError)

SYMMETRY_RTOL = 1e-10
SQRT_COND_LIMIT = 1e-12


@dataclass(frozen=True)
class MeanConfig:
    """Stopping rule for :func:`intrinsic_mean`.

    Attributes
    ----------
    tolerance : float
        Iteration stops once the Frobenius norm of the change between two
        consecutive iterates falls below this value.
    max_iterations : int
        Hard cap on the number of fixed-point updates.
    """

    tolerance: float = 1e-8
    max_iterations: int = 50

    def __post_init__(self):
        if not self.tolerance > 0:
            raise InvalidInputError("tolerance must be > 0")
        if self.max_iterations < 1:
            raise InvalidInputError("max_iterations must be >= 1")


def _symmetrize(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _check_square(a, name="matrix"):
    a = np.asarray(a, dtype=float)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return a


def _check_symmetric(a, name="matrix"):
    a = _check_square(a, name)
    gap = np.abs(a - np.swapaxes(a, -1, -2))
    if np.any(gap > SYMMETRY_RTOL * np.maximum(1.0, np.abs(a))):
        raise InvalidInputError(f"{name} is not symmetric")
    return a


def _check_same_dim(a, b):
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(
            f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")


def as_spd(a, name="matrix"):
    """Validate that ``a`` is a (stack of) symmetric positive-definite matrix.

    Returns the input as a float array. Raises :class:`InvalidInputError` on
    asymmetry, non-finite entries or a non-positive eigenvalue.
    """
    a = _check_symmetric(a, name)
    if np.any(np.linalg.eigvalsh(a)[..., 0] <= 0):
        raise InvalidInputError(f"{name} is not positive definite")
    return a


def shrink(a, gamma):
    """Diagonal loading ``a + gamma * trace(a) / R * I``."""
    a = np.asarray(a, dtype=float)
    if gamma == 0:
        return a
    r = a.shape[-1]
    load = gamma * np.trace(a, axis1=-2, axis2=-1) / r
    return a + load[..., None, None] * np.eye(r)


def _eig_apply(a, fn):
    w, v = np.linalg.eigh(a)
    return _symmetrize((v * fn(w)[..., None, :]) @ np.swapaxes(v, -1, -2))


def matrix_log(a):
    """Matrix logarithm of an SPD matrix via eigendecomposition.

    Parameters
    ----------
    a : ndarray, shape (..., R, R)
        SPD matrices.

    Returns
    -------
    ndarray, shape (..., R, R)
        Symmetric matrix ``V diag(log w) V^T``.
    """
    a = _check_square(a)
    w, v = np.linalg.eigh(_symmetrize(a))
    if np.any(w <= 0):
        raise InvalidInputError("matrix_log requires a positive-definite input")
    return _symmetrize((v * np.log(w)[..., None, :]) @ np.swapaxes(v, -1, -2))


def matrix_exp(a):
    """Matrix exponential of a symmetric matrix; the result is SPD."""
    a = _check_symmetric(a)
    return _eig_apply(_symmetrize(a), np.exp)


def matrix_sqrt_and_invsqrt(a):
    """Principal square root and its inverse, from one eigendecomposition.

    Raises
    ------
    IllConditionedError
        If the smallest eigenvalue is below ``1e-12`` times the largest.
    """
    a = _check_square(a)
    w, v = np.linalg.eigh(_symmetrize(a))
    if np.any(w[..., 0] <= SQRT_COND_LIMIT * w[..., -1]):
        raise IllConditionedError(
            "matrix is ill-conditioned (min/max eigenvalue below 1e-12); "
            "consider diagonal loading")
    vt = np.swapaxes(v, -1, -2)
    s = np.sqrt(w)
    sqrt = _symmetrize((v * s[..., None, :]) @ vt)
    invsqrt = _symmetrize((v * (1.0 / s)[..., None, :]) @ vt)
    return sqrt, invsqrt


def riemannian_distance(a, b):
    """Affine-invariant distance ``sqrt(sum_r log^2 lambda_r)``.

    The ``lambda_r`` are the eigenvalues of ``a^{-1} b``, obtained from the
    symmetric-definite pencil ``(b, a)``.
    """
    a = _check_square(a, "a")
    b = _check_square(b, "b")
    _check_same_dim(a, b)
    if a.ndim == 2 and b.ndim == 2:
        lam = scipy.linalg.eigvalsh(_symmetrize(b), _symmetrize(a))
    else:
        a, b = np.broadcast_arrays(a, b)
        lam = np.stack([
            scipy.linalg.eigvalsh(_symmetrize(bi), _symmetrize(ai))
            for ai, bi in zip(a.reshape(-1, *a.shape[-2:]),
                              b.reshape(-1, *b.shape[-2:]))
        ]).reshape(a.shape[:-1])
    if np.any(lam <= 0):
        raise InvalidInputError("riemannian_distance requires SPD inputs")
    return np.sqrt(np.sum(np.log(lam) ** 2, axis=-1))


def _whiten(base_invsqrt, x):
    return _symmetrize(base_invsqrt @ x @ base_invsqrt)


def log_map(base, x):
    """Project ``x`` onto the tangent space at ``base``.

    Returns ``base^{1/2} logm(base^{-1/2} x base^{-1/2}) base^{1/2}``.
    """
    base = _check_square(base, "base")
    x = _check_square(x, "x")
    _check_same_dim(base, x)
    s, si = matrix_sqrt_and_invsqrt(base)
    return _symmetrize(s @ matrix_log(_whiten(si, x)) @ s)


def exp_map(base, v):
    """Map the tangent matrix ``v`` at ``base`` back onto the manifold."""
    base = _check_square(base, "base")
    v = _check_symmetric(v, "v")
    _check_same_dim(base, v)
    s, si = matrix_sqrt_and_invsqrt(base)
    return _symmetrize(s @ matrix_exp(_whiten(si, v)) @ s)


def upper_weights(dim):
    """Weights for :func:`vectorize_upper`: 1 on the diagonal, sqrt(2) off it."""
    rows, cols = np.triu_indices(dim)
    return np.where(rows == cols, 1.0, np.sqrt(2.0))


def vectorize_upper(m):
    """Upper-triangular entries of symmetric ``m``, row-major, norm-preserving.

    The Euclidean norm of the output equals the Frobenius norm of ``m``.
    """
    m = np.asarray(m, dtype=float)
    dim = m.shape[-1]
    rows, cols = np.triu_indices(dim)
    return m[..., rows, cols] * upper_weights(dim)


def unvectorize_upper(vec):
    """Inverse of :func:`vectorize_upper`."""
    vec = np.asarray(vec, dtype=float)
    n = vec.shape[-1]
    dim = int(round((np.sqrt(8 * n + 1) - 1) / 2))
    if dim * (dim + 1) // 2 != n:
        raise ShapeError(f"{n} is not a triangular number")
    rows, cols = np.triu_indices(dim)
    out = np.zeros(vec.shape[:-1] + (dim, dim))
    vals = vec / upper_weights(dim)
    out[..., rows, cols] = vals
    out[..., cols, rows] = vals
    return out


def tangent_vectorize(base, x, base_invsqrt=None):
    """Tangent-space coordinates of ``x`` at ``base``.

    Parameters
    ----------
    base : ndarray, shape (R, R)
        Reference SPD matrix.
    x : ndarray, shape (..., R, R)
        SPD matrices to map.
    base_invsqrt : ndarray, shape (R, R), optional
        Precomputed ``base^{-1/2}``; skips one eigendecomposition.

    Returns
    -------
    ndarray, shape (..., R * (R + 1) / 2)
        Weighted upper triangle of ``logm(base^{-1/2} x base^{-1/2})``. Its
        Euclidean norm is the Riemannian distance between ``base`` and ``x``.
    """
    base = _check_square(base, "base")
    x = _check_square(x, "x")
    _check_same_dim(base, x)
    if base_invsqrt is None:
        _, base_invsqrt = matrix_sqrt_and_invsqrt(base)
    return vectorize_upper(matrix_log(_whiten(base_invsqrt, x)))


def intrinsic_mean(mats, cfg=None):
    """Karcher mean of SPD matrices by fixed-point gradient descent.

    Starts from the identity and repeats
    ``M <- Exp_M(mean_n Log_M(X_n))`` until the Frobenius change between
    iterates drops below ``cfg.tolerance``.

    Parameters
    ----------
    mats : array_like, shape (N, R, R)
        Non-empty stack of SPD matrices.
    cfg : MeanConfig, optional
        Stopping rule; defaults to ``MeanConfig()``.

    Returns
    -------
    ndarray, shape (R, R)

    Raises
    ------
    NonConvergenceError
        When ``cfg.max_iterations`` is exhausted. Carries the last iterate
        and the last change norm.
    IllConditionedError
        When an iterate becomes numerically singular.
    """
    cfg = cfg or MeanConfig()
    mats = _check_square(mats, "mats")
    if mats.ndim == 2:
        mats = mats[None]
    if mats.ndim != 3 or mats.shape[0] == 0:
        raise ShapeError("intrinsic_mean expects a non-empty (N, R, R) stack")
    mats = _symmetrize(mats)

    mean = np.eye(mats.shape[-1])
    change = np.inf
    for _ in range(cfg.max_iterations):
        s, si = matrix_sqrt_and_invsqrt(mean)
        try:
            logs = matrix_log(_whiten(si, mats))
        except InvalidInputError as exc:
            raise IllConditionedError(
                "lost positive definiteness while averaging") from exc
        step = logs.mean(axis=0)
        new = _symmetrize(s @ _eig_apply(step, np.exp) @ s)
        if not np.all(np.isfinite(new)):
            raise IllConditionedError("intrinsic mean iterate is not finite")
        change = np.linalg.norm(new - mean)
        mean = new
        if change < cfg.tolerance:
            return mean
    raise NonConvergenceError(
        f"intrinsic mean did not converge in {cfg.max_iterations} iterations "
        f"(last change {change:.3e})", last_iterate=mean, residual=change)


def mean_log_residual(mean, mats):
    """Frobenius norm of ``mean_n Log_mean(X_n)``; zero at the Karcher mean."""
    return float(np.linalg.norm(log_map(mean, np.asarray(mats)).mean(axis=0)))


def random_spd(dim, rng, spread=1.0):
    """Random SPD matrix ``Q diag(exp(spread * g)) Q^T`` with Haar ``Q``.

    Used by tests and the synthetic benchmark.
    """
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    w = np.exp(spread * rng.standard_normal(dim))
    return _symmetrize((q * w) @ q.T)
