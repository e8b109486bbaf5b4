"""Quasi-Newton minimization plus a linear reparametrization helper."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize


@dataclass
class OptResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    nit: int
    success: bool
    message: str


def quasi_newton(fun, x0, *, gtol=1e-8, maxiter=1000, ftol=None, restarts=3) -> OptResult:
    """Minimize ``fun(x) -> (value, gradient)`` by BFGS with a Wolfe line search.

    Converged means the gradient sup-norm is below ``gtol``, or (when ``ftol``
    is given) the last iteration lowered the objective by less than ``ftol``
    relative to its size.  A run that stops because the line search cannot
    make progress is restarted from its end point with a fresh Hessian
    approximation, up to ``restarts`` times.
    """
    x = np.asarray(x0, dtype=float)
    hist: list = []

    def wrapped(z):
        f, g = fun(z)
        if not np.isfinite(f):
            return np.inf, np.zeros_like(z)
        return f, g

    def record(xk):
        hist.append(wrapped(xk)[0])

    nit, res = 0, None
    for _ in range(restarts + 1):
        hist.clear()
        hist.append(wrapped(x)[0])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = optimize.minimize(wrapped, x, jac=True, method="BFGS", callback=record,
                                    options={"gtol": gtol, "maxiter": maxiter - nit})
        nit += int(res.nit)
        x = np.asarray(res.x)
        f, g = fun(x)
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if res.success or gnorm <= gtol:
            return OptResult(x, float(f), np.asarray(g), nit, True, str(res.message))
        if ftol is not None and len(hist) >= 2:
            drop = hist[-2] - hist[-1]
            if 0.0 <= drop <= ftol * max(abs(hist[-1]), 1e-300):
                return OptResult(x, float(f), np.asarray(g), nit, True,
                                 "relative objective decrease below tolerance")
        if res.status != 2 or nit >= maxiter:
            break
    f, g = fun(x)
    return OptResult(x, float(f), np.asarray(g), nit, False, str(res.message))


def index_preconditioner(X: np.ndarray) -> np.ndarray:
    """Matrix ``P`` with ``X @ P`` having orthogonal, O(1)-scaled columns.

    Coefficients of a linear index ``X @ gamma`` are optimized as ``gamma = P u``;
    this removes the scale and collinearity of raw covariates from the problem.
    Falls back to a diagonal scaling when ``X`` is rank deficient.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    _, r = np.linalg.qr(X / np.sqrt(n))
    diag = np.abs(np.diag(r))
    if diag.size and diag.min() > 1e-10 * max(diag.max(), 1e-300):
        return np.linalg.solve(r, np.eye(r.shape[0]))
    scale = np.sqrt(np.mean(X ** 2, axis=0))
    scale[scale == 0] = 1.0
    return np.diag(1.0 / scale)
