"""Covariate balancing and kernel IPW for a continuous treatment (dose).

The propensity here is a conditional density ``pi(a, x; beta)``.  Its
parameters are chosen by minimizing the kernel-localized balance criterion

    Q(beta) = sum_j w_j || sum_i {K_l(A_i - A_j) / pi(A_j, X_i) - 1} B(A_j, X_i) ||^2

with ``w_j = sum_i K_l(A_i - A_j)`` by default.  The dose-response curve is
then estimated by one of three kernel IPW estimators:

``raw``
    ``n^-1 sum_i K_h(A_i - a) Y_i / pi(a, X_i)``
``local_constant``
    weighted mean of ``Y`` with weights ``K_h(A_i - a) / pi(A_i, X_i)``
``local_linear``
    weighted least squares of ``Y`` on ``(1, A - a)`` with the same weights

Only pairs of units within one bandwidth of each other are ever formed, so
the cost is roughly ``n^2 l / range(A)`` rather than ``n^2``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Union

import numpy as np
from scipy import integrate

from ._optim import quasi_newton
from .data import Dataset, DoseResponseCurve
from .errors import AllWindowsEmpty, DegenerateWeight, DomainError, EmptyWindow, NonConvergence
from .propensity import mle_fit

log = logging.getLogger(__name__)

Z95 = 1.959964
ESTIMATORS = ("raw", "local_constant", "local_linear")
VARIANCE_FORMS = ("plugzero", "ratio")


# --- kernels --------------------------------------------------------------

_KERNELS = {
    # name: (K(t) on |t| < 1, int K^2, int t^2 K)
    "epanechnikov": (lambda t: 0.75 * (1.0 - t * t), 0.6, 0.2),
    "triweight": (lambda t: 35.0 / 32.0 * (1.0 - t * t) ** 3, 350.0 / 429.0, 1.0 / 9.0),
    "uniform": (lambda t: np.full_like(t, 0.5), 0.5, 1.0 / 3.0),
}


@dataclass(frozen=True)
class KernelSpec:
    """Symmetric kernel supported on ``(-1, 1)``.

    ``r_K`` is ``int K(t)^2 dt`` and ``mu2`` is ``int t^2 K(t) dt``.
    """

    kind: str = "epanechnikov"

    def __post_init__(self):
        if self.kind not in _KERNELS:
            raise ValueError(f"unknown kernel {self.kind!r}; choose from {sorted(_KERNELS)}")

    @property
    def r_K(self) -> float:
        return _KERNELS[self.kind][1]

    @property
    def mu2(self) -> float:
        return _KERNELS[self.kind][2]

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        inside = np.abs(t) < 1.0
        return np.where(inside, _KERNELS[self.kind][0](np.where(inside, t, 0.0)), 0.0)

    def scaled(self, u, h: float):
        """``K_h(u) = K(u / h) / h``."""
        return self(np.asarray(u, dtype=float) / h) / h

    def oscv_constant(self) -> float:
        return _oscv_constant(self.kind)


EPANECHNIKOV = KernelSpec("epanechnikov")


def kernel_eval(spec: KernelSpec, t) -> float | np.ndarray:
    out = spec(t)
    return float(out) if np.ndim(out) == 0 else out


@lru_cache(maxsize=None)
def _oscv_constant(kind: str) -> float:
    """Rescaling from a left-sided local-linear bandwidth to a two-sided one.

    The left-sided local-linear fit has equivalent kernel
    ``L(u) = K(u) (s2 - s1 u) / (s0 s2 - s1^2)`` on ``(-1, 0]`` with
    ``s_k = int_{-1}^0 u^k K(u) du``.  Matching asymptotic MSE-optimal
    bandwidths gives ``C = (r_K mu2(L)^2 / (r_L mu2(K)^2))^(1/5)``.
    """
    K = KernelSpec(kind)
    quad = lambda f: integrate.quad(f, -1.0, 0.0, epsabs=1e-13, epsrel=1e-13)[0]
    s0, s1, s2 = (quad(lambda u, k=k: u ** k * float(K(u))) for k in range(3))
    det = s0 * s2 - s1 * s1
    L = lambda u: float(K(u)) * (s2 - s1 * u) / det
    r_L = quad(lambda u: L(u) ** 2)
    mu2_L = quad(lambda u: u * u * L(u))
    return float((K.r_K * mu2_L ** 2 / (r_L * K.mu2 ** 2)) ** 0.2)


# --- windows and pairs -----------------------------------------------------


class _Doses:
    """Sorted view of the doses for fast window and pair lookups."""

    def __init__(self, a: np.ndarray):
        self.a = np.asarray(a, dtype=float)
        self.order = np.argsort(self.a, kind="stable")
        self.sorted = self.a[self.order]

    def window(self, center: float, h: float) -> np.ndarray:
        """Indices with ``|A_i - center| < h``, in ascending dose order."""
        lo = np.searchsorted(self.sorted, center - h, side="right")
        hi = np.searchsorted(self.sorted, center + h, side="left")
        return self.order[lo:hi]

    def pairs(self, h: float):
        """All ``(i, j)`` with ``|A_i - A_j| < h``, grouped by ``j``.

        Returns ``(i, j, starts)``; ``starts`` indexes the first pair of each
        ``j = 0..n-1`` so segment sums can use ``np.add.reduceat``.
        """
        n = self.a.size
        lo = np.searchsorted(self.sorted, self.a - h, side="right")
        hi = np.searchsorted(self.sorted, self.a + h, side="left")
        counts = hi - lo
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        j = np.repeat(np.arange(n), counts)
        offs = np.arange(counts.sum()) - np.repeat(starts, counts)
        i = self.order[np.repeat(lo, counts) + offs]
        return i, j, starts


# --- balancing objective ------------------------------------------------------


def default_l(n: int, c_l: float = 3.0) -> float:
    return c_l * n ** (-1.0 / 3.0)


class _Balance:
    """Everything in the balance criterion that does not depend on ``beta``."""

    def __init__(self, ds: Dataset, family, basis, l: float, kernel: KernelSpec = EPANECHNIKOV,
                 weight: Optional[Callable] = None, basis_covariates=None, chunk: int = 250_000):
        if l <= 0:
            raise ValueError("balancing bandwidth l must be positive")
        self.ds, self.family, self.l = ds, family, float(l)
        A = ds.treatment
        X = _basis_rows(ds, basis_covariates)
        n = ds.n
        doses = _Doses(A)
        self.i, self.j, self.starts = doses.pairs(self.l)
        self.kern = kernel.scaled(A[self.i] - A[self.j], self.l)
        self.Bij = basis(A[self.j], X[self.i])
        # S_j = sum over all i of B(A_j, X_i), in row blocks
        q = basis.q
        S = np.zeros((n, q))
        step = max(1, chunk // n)
        for j0 in range(0, n, step):
            jj = np.arange(j0, min(n, j0 + step))
            Bb = basis(np.repeat(A[jj], n), np.tile(X, (jj.size, 1)))
            S[jj] = Bb.reshape(jj.size, n, q).sum(axis=1)
        self.S = S
        if weight is None:
            w = np.add.reduceat(self.kern, self.starts)
        else:
            w = np.broadcast_to(np.asarray(weight(A, ds), dtype=float), (n,)).copy()
        bad = ~(w > 0)
        if bad.any():
            warnings.warn(f"{int(bad.sum())} doses have zero balancing weight and are dropped",
                          DegenerateWeight, stacklevel=3)
            w[bad] = 0.0
        self.w = w

    def _pi(self, beta):
        return self.family.pdf(self.ds.treatment[self.j], self.ds.covariates, beta, rows=self.i)

    def inner(self, beta):
        pi, clamped = self._pi(beta)
        r = self.kern / pi
        inner = np.add.reduceat(r[:, None] * self.Bij, self.starts, axis=0) - self.S
        return inner, r, clamped

    def value(self, beta) -> float:
        inner, _, _ = self.inner(beta)
        return float(np.sum(self.w * np.einsum("jq,jq->j", inner, inner)))

    def value_grad(self, beta):
        inner, r, clamped = self.inner(beta)
        val = float(np.sum(self.w * np.einsum("jq,jq->j", inner, inner)))
        # d inner_j / d beta = -sum_i r_ij B_ij dlog pi_ij'
        c = -2.0 * self.w[self.j] * r * np.einsum("pq,pq->p", self.Bij, inner[self.j])
        c[clamped] = 0.0
        dlog = self.family.dlogpdf(self.ds.treatment[self.j], self.ds.covariates, beta,
                                   rows=self.i)
        return val, dlog.T @ c


def _basis_rows(ds: Dataset, basis_covariates):
    if basis_covariates is None:
        return ds.covariates
    Xb = np.asarray(basis_covariates, dtype=float)
    if Xb.ndim != 2 or Xb.shape[0] != ds.n:
        raise ValueError(f"basis_covariates must have {ds.n} rows, got shape {Xb.shape}")
    return Xb


def balance_objective(ds: Dataset, family, basis, beta, l: float, *,
                      kernel: KernelSpec = EPANECHNIKOV, weight: Optional[Callable] = None,
                      basis_covariates=None) -> float:
    """Kernel-localized balance criterion at ``beta``.

    ``weight(a, ds)`` overrides the default ``w(A_j) = sum_i K_l(A_i - A_j)``;
    doses whose weight is zero are dropped with a :class:`DegenerateWeight`
    warning.  ``basis_covariates`` (same rows as ``ds``) lets the outcome
    basis use different covariates from the propensity model.
    """
    return _Balance(ds, family, basis, l, kernel, weight,
                    basis_covariates).value(np.asarray(beta, float))


def _numeric_grad(f, x, rel=1e-6):
    g = np.empty_like(x)
    for k in range(x.size):
        step = rel * max(abs(x[k]), 1.0)
        e = np.zeros_like(x)
        e[k] = step
        g[k] = (f(x + e) - f(x - e)) / (2.0 * step)
    return g


@dataclass
class BalanceResult:
    beta: np.ndarray
    objective: float
    objective_init: float
    iterations: int
    converged: bool
    clamp_count: int


def fit_balance_continuous(ds: Dataset, family, basis, beta_init=None, l: Optional[float] = None,
                           *, kernel: KernelSpec = EPANECHNIKOV, weight: Optional[Callable] = None,
                           gradient: str = "analytic", maxiter: int = 1000,
                           basis_covariates=None, full_output: bool = False):
    """Minimize the balance criterion over ``beta``.

    Starts from ``beta_init`` (the maximum-likelihood fit when omitted).
    ``gradient="numeric"`` uses central differences with relative step 1e-6
    for families without an analytic score.  Convergence means a relative
    objective decrease below 1e-10 or a gradient sup-norm below 1e-7 on the
    objective normalized by its starting value.

    Raises :class:`NonConvergence` carrying the best ``beta`` found.
    """
    if l is None:
        l = default_l(ds.n)
    beta0 = mle_fit(ds, family) if beta_init is None else np.asarray(beta_init, float)
    prob = _Balance(ds, family, basis, l, kernel, weight, basis_covariates)
    rp = family.reparam(ds)
    q0 = prob.value(beta0)
    scale = 1.0 / q0 if q0 > 0 else 1.0

    if gradient == "analytic":
        def fun(u):
            v, g = prob.value_grad(rp.beta(u))
            return v * scale, rp.grad_u(u, g) * scale
    elif gradient == "numeric":
        def fun(u):
            return (prob.value(rp.beta(u)) * scale,
                    _numeric_grad(lambda uu: prob.value(rp.beta(uu)) * scale, u))
    else:
        raise ValueError(f"gradient must be 'analytic' or 'numeric', got {gradient!r}")

    if q0 == 0.0:
        res_x, res_fun, nit, ok = rp.u(beta0), 0.0, 0, True
    else:
        res = quasi_newton(fun, rp.u(beta0), gtol=1e-7, maxiter=maxiter, ftol=1e-10)
        res_x, res_fun, nit, ok = res.x, res.fun, res.nit, res.success
        if res_fun > 1.0:  # never worse than the start
            res_x, res_fun = rp.u(beta0), 1.0
    beta = rp.beta(res_x)
    _, clamped = prob._pi(beta)
    out = BalanceResult(beta, res_fun / scale, q0, nit, ok, int(clamped.sum()))
    if not ok:
        raise NonConvergence("balancing fit did not converge", nit, None,
                             out if full_output else beta)
    return out if full_output else beta


# --- curve estimators -----------------------------------------------------


class _Evaluator:
    """Caches sorted doses and ``pi(A_i, X_i)`` for repeated evaluations."""

    def __init__(self, ds: Dataset, family, beta, kernel: KernelSpec = EPANECHNIKOV):
        self.ds, self.family, self.kernel = ds, family, kernel
        self.beta = np.asarray(beta, dtype=float)
        self.doses = _Doses(ds.treatment)
        self._own = None

    @property
    def pi_own(self):
        """Floored ``pi(A_i, X_i)`` and clamp mask for every unit."""
        if self._own is None:
            self._own = self.family.pdf(self.ds.treatment, self.ds.covariates, self.beta)
        return self._own

    def window(self, a, h):
        if h <= 0:
            raise ValueError("bandwidth h must be positive")
        idx = self.doses.window(a, h)
        if idx.size == 0:
            raise EmptyWindow(a, h)
        return idx

    def _at_a(self, a, idx):
        pi, _ = self.family.pdf(np.full(idx.size, float(a)), self.ds.covariates, self.beta,
                                rows=idx)
        return pi

    def raw(self, a, h):
        idx = self.window(a, h)
        k = self.kernel.scaled(self.ds.treatment[idx] - a, h)
        return float(np.sum(k * self.ds.outcome[idx] / self._at_a(a, idx)) / self.ds.n)

    def local_constant(self, a, h):
        idx = self.window(a, h)
        w = self.kernel.scaled(self.ds.treatment[idx] - a, h) / self.pi_own[0][idx]
        return float(np.sum(w * self.ds.outcome[idx]) / np.sum(w))

    def local_linear(self, a, h):
        """Returns ``(value, fell_back)``."""
        idx = self.window(a, h)
        d = self.ds.treatment[idx] - a
        w = self.kernel.scaled(d, h) / self.pi_own[0][idx]
        y = self.ds.outcome[idx]
        val, fb = _loclin(np.sum(w), np.sum(w * d), np.sum(w * d * d),
                          np.sum(w * y), np.sum(w * d * y), d)
        return float(val), bool(fb)

    def estimate(self, kind, a, h):
        if kind == "raw":
            return self.raw(a, h), False
        if kind == "local_constant":
            return self.local_constant(a, h), False
        if kind == "local_linear":
            return self.local_linear(a, h)
        raise ValueError(f"unknown estimator kind {kind!r}; choose from {ESTIMATORS}")

    def variance(self, a, h, form="ratio"):
        idx = self.window(a, h)
        k = self.kernel.scaled(self.ds.treatment[idx] - a, h)
        pi = self._at_a(a, idx)
        y2 = self.ds.outcome[idx] ** 2
        n = self.ds.n
        top = np.sum(k * y2 / pi ** 2)
        if form == "plugzero":
            return float(self.kernel.r_K / (n * h) * top / n)
        if form == "ratio":
            den = np.sum(k / pi)
            return float(self.kernel.r_K / (n * h) * top / den) if den > 0 else 0.0
        raise ValueError(f"unknown variance form {form!r}; choose from {VARIANCE_FORMS}")

    def covariance(self, a, b, h):
        ia, ib = self.window(a, h), self.window(b, h)
        both = np.intersect1d(ia, ib, assume_unique=True)
        n = self.ds.n
        cross = 0.0
        if both.size:
            A = self.ds.treatment[both]
            ka = self.kernel.scaled(A - a, h)
            kb = self.kernel.scaled(A - b, h)
            cross = float(np.sum(ka * kb * self.ds.outcome[both] ** 2
                                 / (self._at_a(a, both) * self._at_a(b, both)))) / n ** 2
        return cross - self.raw(a, h) * self.raw(b, h) / n


def _loclin(s0, s1, s2, t0, t1, d):
    """Intercept of a weighted linear fit from its moment sums; local-constant fallback."""
    det = s0 * s2 - s1 * s1
    spread = np.ptp(d) if np.size(d) else 0.0
    if np.size(d) < 2 or spread == 0.0 or not det > 1e-12 * max(s0 * s2, 1e-300):
        return t0 / s0, True
    return (s2 * t0 - s1 * t1) / det, False


def theta_raw(ds: Dataset, family, beta_hat, a: float, h: float,
              kernel: KernelSpec = EPANECHNIKOV) -> float:
    """``n^-1 sum_i K_h(A_i - a) Y_i / pi(a, X_i)``; the propensity is taken at ``a``."""
    return _Evaluator(ds, family, beta_hat, kernel).raw(a, h)


def theta_local_constant(ds: Dataset, family, beta_hat, a: float, h: float,
                         kernel: KernelSpec = EPANECHNIKOV) -> float:
    """Weighted mean of ``Y`` with weights ``K_h(A_i - a) / pi(A_i, X_i)``."""
    return _Evaluator(ds, family, beta_hat, kernel).local_constant(a, h)


def theta_local_linear(ds: Dataset, family, beta_hat, a: float, h: float,
                       kernel: KernelSpec = EPANECHNIKOV, *, with_flag: bool = False):
    """Intercept of the weighted local-linear fit at ``a``.

    Falls back to the local-constant value when the window has fewer than two
    distinct doses or a singular design; ``with_flag=True`` also returns
    whether that happened.
    """
    val, fb = _Evaluator(ds, family, beta_hat, kernel).local_linear(a, h)
    return (val, fb) if with_flag else val


def variance_pointwise(ds: Dataset, family, beta_hat, a: float, h: float, form: str = "ratio",
                       kernel: KernelSpec = EPANECHNIKOV) -> float:
    """Plug-in variance of the raw estimator at ``a``.

    ``plugzero``: ``r_K / (n h) * n^-1 sum_i K_h(A_i - a) Y_i^2 / pi(a, X_i)^2``.
    ``ratio`` replaces ``n^-1`` by ``1 / sum_i K_h(A_i - a) / pi(a, X_i)``.
    """
    return _Evaluator(ds, family, beta_hat, kernel).variance(a, h, form)


def covariance_pointpair(ds: Dataset, family, beta_hat, a: float, b: float, h: float,
                         kernel: KernelSpec = EPANECHNIKOV) -> float:
    """Plug-in covariance of the raw estimator at two doses.

    ``n^-2 sum_i K_h(A_i-a) K_h(A_i-b) Y_i^2 / {pi(a,X_i) pi(b,X_i)} - theta(a) theta(b) / n``;
    the first term vanishes once ``|a - b| >= 2h``.
    """
    return _Evaluator(ds, family, beta_hat, kernel).covariance(a, b, h)


# --- bandwidth selection -----------------------------------------------------


def default_h_grid(ds: Dataset, size: int = 20) -> np.ndarray:
    """Log-spaced grid on ``[0.5, 3] * 1.06 sd(A) n^(-1/5)``."""
    rot = 1.06 * float(np.std(ds.treatment, ddof=1)) * ds.n ** (-0.2)
    return np.geomspace(0.5 * rot, 3.0 * rot, size)


def _cv_scores(ev: _Evaluator, grid, kind: str, one_sided: bool) -> np.ndarray:
    ds = ev.ds
    A, Y, X = ds.treatment, ds.outcome, ds.covariates
    pi_own = ev.pi_own[0]
    hmax = float(np.max(grid))
    i, j, _ = ev.doses.pairs(hmax)  # i is the contributing unit, j the held-out one
    keep = (i != j) & ((A[i] < A[j]) if one_sided else True)
    i, j = i[keep], j[keep]
    d = A[i] - A[j]
    n = ds.n
    if kind == "raw" and not one_sided:
        pij, _ = ev.family.pdf(A[j], X, ev.beta, rows=i)
        wpair = 1.0 / pij
    else:
        wpair = 1.0 / pi_own[i]
    yi = Y[i]
    target_w = 1.0 / pi_own
    # a unit whose deleted window is empty at the smallest h is skipped at every h,
    # so all bandwidths are scored on the same units
    hmin = float(np.min(grid))
    ok = np.bincount(j, ev.kernel.scaled(d, hmin) > 0, n) > 0
    scores = np.empty(len(grid))
    for g, h in enumerate(grid):
        kh = ev.kernel.scaled(d, h)
        w = kh * wpair
        s0 = np.bincount(j, w, n)
        t0 = np.bincount(j, w * yi, n)
        if not ok.any():
            scores[g] = np.nan
            continue
        if kind == "local_linear" or one_sided:
            s1 = np.bincount(j, w * d, n)
            s2 = np.bincount(j, w * d * d, n)
            t1 = np.bincount(j, w * d * yi, n)
            det = s0 * s2 - s1 * s1
            good = det > 1e-12 * np.maximum(s0 * s2, 1e-300)
            pred = np.where(good, (s2 * t0 - s1 * t1) / np.where(good, det, 1.0),
                            t0 / np.where(s0 > 0, s0, 1.0))
        elif kind == "local_constant":
            pred = t0 / np.where(s0 > 0, s0, 1.0)
        elif kind == "raw":
            pred = t0 / (n - 1)
        else:
            raise ValueError(f"unknown estimator kind {kind!r}; choose from {ESTIMATORS}")
        scores[g] = float(np.sum((target_w * (Y - pred) ** 2)[ok]))
    return scores


def _argmin_largest(grid, scores, ref: float) -> float:
    finite = np.isfinite(scores)
    if not finite.any():
        raise AllWindowsEmpty("every leave-one-out window is empty on this bandwidth grid")
    best = np.min(scores[finite])
    tol = max(1e-10 * best, 1e-12 * ref)
    ties = np.flatnonzero(finite & (scores <= best + tol))
    return float(np.asarray(grid)[ties].max())


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size == 0 or np.any(grid <= 0):
        raise ValueError("bandwidth grid must be nonempty and positive")
    return grid


def select_h_loocv(ds: Dataset, family, beta_hat, grid=None, estimator_kind: str = "local_constant",
                   kernel: KernelSpec = EPANECHNIKOV, *, return_scores: bool = False):
    """Leave-one-out CV bandwidth.

    Minimizes ``sum_i (Y_i - theta_{-i}(A_i))^2 / pi(A_i, X_i)`` over the
    grid; ties go to the larger bandwidth.  Units whose deleted window is
    empty at the smallest grid bandwidth are left out of every score, so the
    scores for different bandwidths sum over the same units.
    """
    grid = default_h_grid(ds) if grid is None else _check_grid(grid)
    if grid.size == 1:
        return (float(grid[0]), np.array([np.nan])) if return_scores else float(grid[0])
    ev = _Evaluator(ds, family, beta_hat, kernel)
    scores = _cv_scores(ev, grid, estimator_kind, one_sided=False)
    ref = float(np.sum(ds.outcome ** 2 / ev.pi_own[0]))
    h = _argmin_largest(grid, scores, ref)
    return (h, scores) if return_scores else h


def select_h_oscv(ds: Dataset, family, beta_hat, grid=None, estimator_kind: str = "local_linear",
                  kernel: KernelSpec = EPANECHNIKOV, *, return_scores: bool = False):
    """One-sided CV bandwidth.

    Each held-out ``Y_i`` is predicted by a weighted local-linear fit using
    only units with ``A_j < A_i``; the minimizing bandwidth is multiplied by
    :meth:`KernelSpec.oscv_constant`.  The one-sided predictor is local linear
    whatever ``estimator_kind`` is, because the rescaling constant is derived
    for that fit.
    """
    if estimator_kind not in ESTIMATORS:
        raise ValueError(f"unknown estimator kind {estimator_kind!r}; choose from {ESTIMATORS}")
    grid = default_h_grid(ds) if grid is None else _check_grid(grid)
    C = kernel.oscv_constant()
    if grid.size == 1:
        h = C * float(grid[0])
        return (h, np.array([np.nan])) if return_scores else h
    ev = _Evaluator(ds, family, beta_hat, kernel)
    scores = _cv_scores(ev, grid, "local_linear", one_sided=True)
    ref = float(np.sum(ds.outcome ** 2 / ev.pi_own[0]))
    h = C * _argmin_largest(grid, scores, ref)
    return (h, scores) if return_scores else h


# --- curves ----------------------------------------------------------------


@dataclass(frozen=True)
class BandwidthPlan:
    """Balancing bandwidth ``l`` and outcome bandwidth rule ``h``.

    ``h`` is a positive number, ``"loocv"`` or ``"oscv"``; ``l`` defaults to
    ``c_l * n^(-1/3)``.
    """

    h: Union[float, str] = "loocv"
    l: Optional[float] = None
    c_l: float = 3.0
    h_grid: Optional[tuple] = None

    def __post_init__(self):
        if isinstance(self.h, str):
            if self.h not in ("loocv", "oscv"):
                raise ValueError(f"h must be a number, 'loocv' or 'oscv', got {self.h!r}")
        elif not self.h > 0:
            raise ValueError("fixed h must be positive")
        if self.l is not None and not self.l > 0:
            raise ValueError("l must be positive")
        if self.c_l <= 0:
            raise ValueError("c_l must be positive")
        if self.h_grid is not None:
            g = np.asarray(self.h_grid, dtype=float)
            if g.size == 0 or np.any(np.diff(g) <= 0) or np.any(g <= 0):
                raise ValueError("h_grid must be nonempty, positive and ascending")

    def l_for(self, n: int) -> float:
        return float(self.l) if self.l is not None else default_l(n, self.c_l)

    def choose_h(self, ds, family, beta, kind, kernel=EPANECHNIKOV) -> float:
        if not isinstance(self.h, str):
            return float(self.h)
        grid = None if self.h_grid is None else np.asarray(self.h_grid, float)
        if self.h == "loocv":
            return select_h_loocv(ds, family, beta, grid, kind, kernel)
        return select_h_oscv(ds, family, beta, grid, kind, kernel)


def default_curve_grid(ds: Dataset, size: int = 101, trim: float = 0.1) -> np.ndarray:
    """Equispaced grid over the central ``1 - trim`` mass of the observed doses."""
    lo, hi = np.quantile(ds.treatment, [trim / 2.0, 1.0 - trim / 2.0])
    return np.linspace(lo, hi, size)


def dose_response_curve(ds: Dataset, family, basis, plan: BandwidthPlan = BandwidthPlan(),
                        grid=None, estimator_kind: str = "local_constant",
                        variance_form: str = "ratio", *, kernel: KernelSpec = EPANECHNIKOV,
                        beta_init=None, beta_hat=None, allow_boundary: bool = False,
                        basis_covariates=None, z: float = Z95) -> DoseResponseCurve:
    """Fit the balancing propensity once, then estimate the curve on ``grid``.

    ``grid`` is an array of doses or a point count for the default grid
    (equispaced over the 10%-trimmed doses, 101 points when omitted, clipped
    to ``[min A + h, max A - h]``).  Explicit grid points must lie in that
    range unless ``allow_boundary`` is set.  ``beta_hat`` skips the balancing
    fit.  If the balancing fit does not converge its best point is used and
    the curve's ``converged`` flag is cleared.
    """
    if estimator_kind not in ESTIMATORS:
        raise ValueError(f"unknown estimator kind {estimator_kind!r}; choose from {ESTIMATORS}")
    if variance_form not in VARIANCE_FORMS:
        raise ValueError(f"unknown variance form {variance_form!r}; choose from {VARIANCE_FORMS}")
    l = plan.l_for(ds.n)
    converged = True
    if beta_hat is None:
        try:
            beta_hat = fit_balance_continuous(ds, family, basis, beta_init, l, kernel=kernel,
                                              basis_covariates=basis_covariates)
        except NonConvergence as exc:
            beta_hat, converged = exc.result, False
            log.warning("balancing fit did not converge; using best point found")
    beta_hat = np.asarray(beta_hat, dtype=float)
    h = plan.choose_h(ds, family, beta_hat, estimator_kind, kernel)
    if grid is None or np.ndim(grid) == 0:
        grid = default_curve_grid(ds, 101 if grid is None else int(grid))
        if not allow_boundary:
            grid = np.linspace(max(grid[0], ds.treatment.min() + h),
                               min(grid[-1], ds.treatment.max() - h), grid.size)
    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size == 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("curve grid must be nonempty and strictly increasing")
    if not allow_boundary:
        lo, hi = ds.treatment.min() + h, ds.treatment.max() - h
        if grid[0] < lo or grid[-1] > hi:
            raise DomainError(f"grid [{grid[0]:g}, {grid[-1]:g}] leaves [{lo:g}, {hi:g}] "
                              f"(observed range shrunk by h={h:g})")
    ev = _Evaluator(ds, family, beta_hat, kernel)
    theta = np.empty(grid.size)
    var = np.empty(grid.size)
    fallbacks = 0
    for g, a in enumerate(grid):
        theta[g], fb = ev.estimate(estimator_kind, a, h)
        fallbacks += fb
        var[g] = ev.variance(a, h, variance_form)
    half = z * np.sqrt(var)
    clamps = int(ev.pi_own[1].sum())
    return DoseResponseCurve(grid=grid, theta=theta, variance=var, band_lo=theta - half,
                             band_hi=theta + half, h=h, l=l, estimator_kind=estimator_kind,
                             kernel=kernel.kind, beta_hat=beta_hat, clamp_count=clamps,
                             fallback_points=fallbacks, dose_transform=ds.dose_transform,
                             converged=converged, variance_form=variance_form)
