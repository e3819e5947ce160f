"""Dense linear algebra, logistic IRLS and a BFGS minimiser shared by the estimators."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import lapack
from scipy.special import expit

from .exceptions import LineSearchError, SeparationError, SingularMatrixError

logger = logging.getLogger(__name__)

PIVOT_RTOL = 1e-12
SYMMETRY_RTOL = 1e-10
SEPARATION_BOUND = 30.0


def as_dense(a, ndim=2) -> np.ndarray:
    """Return ``a`` as a float64 array, checking shape rank and finiteness."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("array contains non-finite entries")
    return arr


def cholesky_factor(A) -> np.ndarray:
    """
    Lower Cholesky factor of a symmetric positive-definite matrix.

    Raises
    ------
    SingularMatrixError
        A pivot is <= 1e-12 times the largest diagonal entry; ``pivot`` holds
        its 0-based index.
    """
    A = as_dense(A)
    n, m = A.shape
    if n != m:
        raise ValueError(f"matrix is not square: {A.shape}")
    scale = np.max(np.abs(A)) if A.size else 0.0
    if np.max(np.abs(A - A.T), initial=0.0) > SYMMETRY_RTOL * max(scale, 1e-300):
        raise ValueError("matrix is not symmetric")
    c, info = lapack.dpotrf(A, lower=1, clean=1)
    if info > 0:
        raise SingularMatrixError(f"matrix not positive definite at pivot {info - 1}",
                                  pivot=info - 1)
    if info < 0:  # pragma: no cover - argument error inside LAPACK
        raise ValueError(f"dpotrf argument {-info} invalid")
    threshold = PIVOT_RTOL * np.max(np.diag(A), initial=0.0)
    small = np.flatnonzero(np.diag(c) ** 2 <= threshold)
    if small.size:
        raise SingularMatrixError(f"matrix numerically singular at pivot {small[0]}",
                                  pivot=int(small[0]))
    return c


def cholesky_solve(A, b) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive-definite ``A``."""
    c = cholesky_factor(A)
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != c.shape[0]:
        raise ValueError(f"dimension mismatch: A is {c.shape}, b has {b.shape[0]} rows")
    x, info = lapack.dpotrs(c, b, lower=1)
    if info != 0:  # pragma: no cover
        raise ValueError(f"dpotrs failed with info={info}")
    return x


def log1pexp(x):
    """``log(1 + exp(x))`` without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def bernoulli_deviance(y, eta, weights=None) -> float:
    """-2 times the Bernoulli log-likelihood with logit link."""
    ll = y * eta - log1pexp(eta)
    if weights is not None:
        ll = weights * ll
    return -2.0 * float(np.sum(ll))


def irls_fit(X, y, offset=None, prior_weights=None, tol=1e-8, max_iter=100) -> np.ndarray:
    """
    Logistic regression by iteratively reweighted least squares.

    Stops when the relative change in deviance drops below ``tol`` or after
    ``max_iter`` iterations.

    Raises
    ------
    SeparationError
        The outcome is constant or a coefficient exceeds 30 on the logit scale.
    SingularMatrixError
        The weighted design is rank deficient.
    """
    X = as_dense(X)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    if y.shape != (n,):
        raise ValueError("y must be a vector aligned with the rows of X")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("y must be binary")
    offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=np.float64)
    pw = np.ones(n) if prior_weights is None else np.asarray(prior_weights, dtype=np.float64)
    active = pw > 0
    if np.all(y[active] == y[active][0]):
        raise SeparationError("outcome is constant: logistic coefficients diverge")

    beta = np.zeros(p)
    eta = offset + X @ beta
    dev = bernoulli_deviance(y, eta, pw)
    for it in range(max_iter):
        mu = expit(eta)
        w = pw * mu * (1.0 - mu)
        score = X.T @ (pw * (y - mu))
        info = (X * w[:, None]).T @ X
        beta = beta + cholesky_solve(info, score)
        if np.any(np.abs(beta) > SEPARATION_BOUND):
            raise SeparationError(
                f"coefficient exceeded {SEPARATION_BOUND:g} on the logit scale: "
                "complete or quasi-complete separation")
        eta = offset + X @ beta
        new_dev = bernoulli_deviance(y, eta, pw)
        if abs(new_dev - dev) / (abs(new_dev) + 0.1) < tol:
            break
        dev = new_dev
    else:
        logger.warning("irls_fit stopped after %d iterations without converging", max_iter)
    return beta


@dataclass
class OptimResult:
    argmin: np.ndarray
    objective: float
    gradient_norm: float
    iterations: int
    converged: bool
    message: str = ""


def fd_gradient(f: Callable, x, rel_step=1e-6) -> np.ndarray:
    """Central finite differences with step ``rel_step * (1 + |x_i|)``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        h = rel_step * (1.0 + abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def quasi_newton_minimize(f: Callable, x0, tol=1e-6, grad: Optional[Callable] = None,
                          max_iter=500, max_step=10.0, inv_hessian0=None) -> OptimResult:
    """
    Minimise ``f`` with BFGS and a backtracking Armijo line search.

    Parameters
    ----------
    f : callable
        Objective over a real vector.
    x0 : array_like
        Starting point; ``f(x0)`` must be finite.
    tol : float
        Convergence threshold on the Euclidean gradient norm.
    grad : callable, optional
        Analytic gradient. Central finite differences are used otherwise.
    max_iter : int
        Iteration cap; on exhaustion the best iterate is returned with
        ``converged=False``.
    max_step : float
        Upper bound on the length of the first trial step of each search.
    inv_hessian0 : ndarray, optional
        Initial inverse-Hessian approximation; identity (rescaled after the
        first step) otherwise.

    Raises
    ------
    LineSearchError
        The line search failed and met non-finite objective values.
    """
    grad = grad if grad is not None else (lambda z: fd_gradient(f, z))
    x = np.array(x0, dtype=np.float64)
    fx = float(f(x))
    if not np.isfinite(fx):
        raise ValueError("objective is not finite at the starting point")
    g = np.asarray(grad(x), dtype=np.float64)
    n = x.size
    H = np.eye(n)
    first = True
    if inv_hessian0 is not None:
        H = np.array(inv_hessian0, dtype=np.float64)
        first = False
    it = 0
    message = "maximum iterations reached"
    converged = False
    while it < max_iter:
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            converged = True
            message = "gradient norm below tolerance"
            break
        d = -H @ g
        slope = float(g @ d)
        if slope >= 0.0:
            H = np.eye(n)
            d = -g
            slope = -gnorm ** 2
        dnorm = np.linalg.norm(d)
        alpha = min(1.0, max_step / dnorm) if dnorm > 0 else 1.0
        saw_nonfinite = False
        accepted = False
        for _ in range(60):
            xn = x + alpha * d
            fn = float(f(xn))
            if not np.isfinite(fn):
                saw_nonfinite = True
            elif fn <= fx + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            if saw_nonfinite:
                raise LineSearchError("line search failed: objective not finite along direction")
            if not np.allclose(H, np.eye(n)):
                # retry once along steepest descent before giving up
                H = np.eye(n)
                first = True
                continue
            message = "line search made no progress"
            break
        gn = np.asarray(grad(xn), dtype=np.float64)
        s = xn - x
        yv = gn - g
        sy = float(s @ yv)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            if first:
                H = np.eye(n) * (sy / float(yv @ yv))
            rho = 1.0 / sy
            Hy = H @ yv
            H = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) + (rho * rho * float(yv @ Hy) + rho) * np.outer(s, s)
            first = False
        x, fx, g = xn, fn, gn
        it += 1
    gnorm = float(np.linalg.norm(g))
    if not converged and gnorm <= tol:
        converged = True
    return OptimResult(x, fx, gnorm, it, converged, message)


def fd_hessian(grad: Callable, x, rel_step=1e-4) -> np.ndarray:
    """Symmetrised Hessian from central differences of an analytic gradient."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    Hs = np.empty((n, n))
    for i in range(n):
        h = rel_step * (1.0 + abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        Hs[:, i] = (np.asarray(grad(xp)) - np.asarray(grad(xm))) / (2.0 * h)
    return 0.5 * (Hs + Hs.T)


def abs_eigen_inverse(Hs, floor=1e-8) -> Optional[np.ndarray]:
    """
    Positive-definite inverse of a symmetric matrix built from the absolute
    values of its eigenvalues (floored relative to the largest). Returns
    None for non-finite input.
    """
    Hs = np.asarray(Hs, dtype=np.float64)
    if not np.all(np.isfinite(Hs)):
        return None
    vals, vecs = np.linalg.eigh(Hs)
    mags = np.abs(vals)
    top = mags.max()
    if top <= 0:
        return None
    mags = np.maximum(mags, floor * top)
    return (vecs / mags) @ vecs.T
