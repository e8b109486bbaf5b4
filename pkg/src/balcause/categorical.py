"""Covariate-balancing IPW for categorical treatments.

The propensity parameters are chosen so that, for every level ``k``, the
inverse-probability-weighted sum of the outcome basis ``B(k, X)`` among units
with ``A = k`` matches its unweighted sum over everyone.  The stacked
per-unit moments are

    f_ki(beta) = {I(A_i = k) / pi(k, X_i, beta) - 1} B(k, X_i)

and ``beta`` minimizes ``(sum f)' W (sum f)`` by two-step GMM.  Variances use
the empirical sandwich for the joint (beta, theta) system, which needs no
outcome-model coefficients.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ._optim import quasi_newton
from .data import CategoricalFit, Dataset
from .errors import NonConvergence, RankDeficientJacobian, SingularWeight
from .propensity import DELTA, MultinomialLogit, SameBasisLogLinear, mle_fit

log = logging.getLogger(__name__)

Z95 = 1.959964


class _Problem:
    """Caches the basis blocks and level indicators for one dataset."""

    def __init__(self, ds: Dataset, family, basis, basis_covariates=None):
        self.ds = ds
        self.family = family
        self.basis = basis
        self.K = family.K
        self.q = basis.q
        self.n = ds.n
        self.a = ds.levels()
        self.ind = np.eye(self.K + 1)[self.a]
        Xb = ds.covariates if basis_covariates is None else np.asarray(basis_covariates, float)
        if Xb.ndim != 2 or Xb.shape[0] != ds.n:
            raise ValueError(f"basis_covariates must have {ds.n} rows, got shape {Xb.shape}")
        self.B = np.stack([basis(k, Xb) for k in range(self.K + 1)], axis=1)

    def prob(self, beta):
        return self.family.prob(beta, self.ds.covariates)

    def moments(self, beta, P=None):
        if P is None:
            P, _, _ = self.prob(beta)
        w = self.ind / P - 1.0
        return (w[:, :, None] * self.B).reshape(self.n, -1)

    def moment_jacobian(self, beta):
        """``sum_i d f_i / d beta'`` with shape ``(q(K+1), p)``, plus f and pieces."""
        P, clamped, D = self.prob(beta)
        f = self.moments(beta, P)
        r = self.ind / P  # d f_ki / d beta = -I/pi * B_ki * dlog pi_ki
        J = -np.concatenate([(r[:, k, None] * self.B[:, k]).T @ D[:, k]
                             for k in range(self.K + 1)])
        return f, J, P, clamped, D


def _ridge_inverse(V: np.ndarray) -> np.ndarray:
    """Inverse of ``V + eps I`` via Cholesky, ``eps = 1e-8 trace(V) / dim``; pinv fallback."""
    dim = V.shape[0]
    eps = 1e-8 * max(np.trace(V), 1e-300) / dim
    Vr = V + eps * np.eye(dim)
    try:
        L = np.linalg.cholesky(Vr)
        Linv = np.linalg.solve(L, np.eye(dim))
        return Linv.T @ Linv
    except np.linalg.LinAlgError:
        warnings.warn("moment covariance is numerically singular; using pseudo-inverse",
                      SingularWeight, stacklevel=3)
        return np.linalg.pinv(Vr, hermitian=True)


def moments_f(ds: Dataset, family, basis, beta, basis_covariates=None) -> np.ndarray:
    """Per-unit stacked balancing moments, ``(n, q(K+1))``; columns level-major.

    ``basis_covariates`` (same rows as ``ds``) lets the outcome basis use
    different covariates from the propensity model.
    """
    return _Problem(ds, family, basis, basis_covariates).moments(np.asarray(beta, float))


def weight_matrix(ds: Dataset, family, basis, beta, basis_covariates=None) -> np.ndarray:
    """Ridge-regularized inverse of ``Vhat(beta) = n^-1 sum f_i f_i'``."""
    f = moments_f(ds, family, basis, beta, basis_covariates)
    return _ridge_inverse(f.T @ f / ds.n)


def gmm_objective(ds: Dataset, family, basis, beta, weight_mode="identity",
                  beta_weight=None, basis_covariates=None) -> float:
    """``(sum_i f_i)' W (sum_i f_i)``.

    ``weight_mode="identity"`` uses ``W = I``; ``"inverse_vhat"`` uses the
    inverse moment covariance frozen at ``beta_weight`` (default ``beta``).
    """
    m = moments_f(ds, family, basis, beta, basis_covariates).sum(axis=0)
    if weight_mode == "identity":
        return float(m @ m)
    if weight_mode == "inverse_vhat":
        W = weight_matrix(ds, family, basis, beta if beta_weight is None else beta_weight,
                          basis_covariates)
        return float(m @ W @ m)
    raise ValueError(f"unknown weight mode {weight_mode!r}")


def gmm_objective_grad(ds: Dataset, family, basis, beta, W=None,
                       basis_covariates=None) -> tuple[float, np.ndarray]:
    """Objective with a fixed weight ``W`` (identity when None) and its analytic gradient."""
    prob = _Problem(ds, family, basis, basis_covariates)
    f, J, *_ = prob.moment_jacobian(np.asarray(beta, float))
    m = f.sum(axis=0)
    Wm = m if W is None else W @ m
    return float(m @ Wm), 2.0 * J.T @ Wm


def _minimize(prob: _Problem, W, beta0, rp, maxiter, scale):
    def fun(u):
        beta = rp.beta(u)
        f, J, *_ = prob.moment_jacobian(beta)
        m = f.sum(axis=0)
        Wm = W @ m
        val = float(m @ Wm) * scale
        if not np.isfinite(val):
            return np.inf, np.zeros_like(u)
        return val, rp.grad_u(u, 2.0 * J.T @ Wm) * scale

    return quasi_newton(fun, rp.u(beta0), gtol=1e-8, maxiter=maxiter, ftol=1e-10)


def default_beta_init(ds: Dataset, family) -> np.ndarray:
    """MLE start for the logit family, least-squares projection for the linear one."""
    if isinstance(family, SameBasisLogLinear):
        return family.default_init(ds)
    try:
        return mle_fit(ds, family)
    except NonConvergence as exc:
        log.warning("MLE start did not converge; using its best point")
        return exc.result


def fit_balance(ds: Dataset, family, basis, beta_init=None, *, maxiter=1000,
                restarts=5, seed=0, basis_covariates=None) -> CategoricalFit:
    """Two-step GMM fit of the balancing conditions.

    Step one minimizes with identity weight; the moment covariance is then
    frozen at that solution, inverted, and the objective minimized again.  If
    the second step fails to converge, it is restarted from jittered starting
    points and the best solution is kept.

    Returns a :class:`CategoricalFit` with ``theta_hat`` filled in but no
    variance (see :func:`fit_categorical` for the full pipeline).
    """
    prob = _Problem(ds, family, basis, basis_covariates)
    m_dim, p = prob.q * (prob.K + 1), family.p
    if m_dim < p:
        warnings.warn(f"{m_dim} balancing equations for {p} parameters: under-identified",
                      RuntimeWarning, stacklevel=2)
    beta0 = default_beta_init(ds, family) if beta_init is None else np.asarray(beta_init, float)
    rp = family.reparam(ds)

    f0 = prob.moments(beta0)
    v0 = np.trace(f0.T @ f0) / m_dim
    step1 = _minimize(prob, np.eye(m_dim), beta0, rp, maxiter, 1.0 / max(v0 * ds.n, 1e-300))
    beta1 = rp.beta(step1.x)

    f1 = prob.moments(beta1)
    W = _ridge_inverse(f1.T @ f1 / ds.n)
    scale = 1.0 / ds.n
    best = _minimize(prob, W, beta1, rp, maxiter, scale)
    total_it = step1.nit + best.nit
    if not best.success:
        rng = np.random.default_rng(seed)
        u_best = best.x
        for _ in range(restarts):
            u_try = u_best + rng.normal(scale=0.1, size=u_best.shape)
            res = _minimize(prob, W, rp.beta(u_try), rp, maxiter, scale)
            total_it += res.nit
            if res.fun < best.fun or (res.success and not best.success):
                best = res
            if best.success:
                break

    beta_hat = rp.beta(best.x)
    f, J, P, clamped, _ = prob.moment_jacobian(beta_hat)
    msum = f.sum(axis=0)
    max_mom = float(np.max(np.abs(msum)))
    rank = np.linalg.matrix_rank(J / ds.n)
    if rank < p:
        warnings.warn(f"moment Jacobian has rank {rank} < {p}", RankDeficientJacobian,
                      stacklevel=2)
    converged = bool(best.success)
    if m_dim == p and max_mom > 1e-6 * ds.n:
        converged = False
    theta = estimate_theta(ds, family, basis, beta_hat)
    return CategoricalFit(
        beta_hat=beta_hat,
        theta_hat=theta,
        gmm_objective_at_solution=float(msum @ W @ msum),
        converged=converged,
        iterations=total_it,
        max_abs_moment=max_mom,
        clamp_count=int(clamped.sum()),
        layout=family.layout,
        diagnostics={"jacobian_rank": int(rank), "exactly_identified": m_dim == p},
    )


def estimate_theta(ds: Dataset, family, basis, beta_hat) -> np.ndarray:
    """IPW means ``theta_k = n^-1 sum_i I(A_i=k) Y_i / pi(k, X_i, beta)``."""
    P, _, _ = family.prob(np.asarray(beta_hat, float), ds.covariates)
    ind = np.eye(family.K + 1)[ds.levels()]
    return (ind * ds.outcome[:, None] / P).sum(axis=0) / ds.n


def _sandwich(f, J_mean, g, dg_mean) -> np.ndarray:
    """Asymptotic covariance of ``theta`` from stacked moment/estimate pieces.

    ``f`` (n, m) moments, ``J_mean`` (m, p) mean moment Jacobian, ``g`` (n, K+1)
    centred IPW terms, ``dg_mean`` (K+1, p) their mean Jacobian.
    """
    n = f.shape[0]
    Vinv = _ridge_inverse(f.T @ f / n)
    C = g.T @ g / n
    D = f.T @ g / n
    H = J_mean.T @ Vinv @ J_mean
    try:
        Hinv = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        Hinv = np.linalg.pinv(H, hermitian=True)
    BH = dg_mean @ Hinv
    G = BH @ J_mean.T @ Vinv
    GD = G @ D
    S = BH @ dg_mean.T + C - GD - GD.T
    return 0.5 * (S + S.T)


def sandwich_variance(ds: Dataset, family, basis, beta_hat, theta_hat=None,
                      basis_covariates=None) -> np.ndarray:
    """Estimated covariance of ``theta_hat`` (already divided by n)."""
    beta_hat = np.asarray(beta_hat, float)
    prob = _Problem(ds, family, basis, basis_covariates)
    if theta_hat is None:
        theta_hat = estimate_theta(ds, family, basis, beta_hat)
    f, J, P, _, D = prob.moment_jacobian(beta_hat)
    ipw = prob.ind * ds.outcome[:, None] / P
    g = ipw - np.asarray(theta_hat)[None, :]
    dg = -np.einsum("ik,ikp->kp", ipw, D) / ds.n
    return _sandwich(f, J / ds.n, g, dg) / ds.n


def fit_categorical(ds: Dataset, family, basis, beta_init=None, **kw) -> CategoricalFit:
    """Balance, estimate the level means and attach the sandwich covariance."""
    fit = fit_balance(ds, family, basis, beta_init, **kw)
    fit.sigma_hat = sandwich_variance(ds, family, basis, fit.beta_hat, fit.theta_hat,
                                      kw.get("basis_covariates"))
    return fit


def ml_ipw(ds: Dataset, family: MultinomialLogit, beta_init=None) -> CategoricalFit:
    """IPW with a maximum-likelihood propensity fit, for comparison.

    The variance treats the likelihood scores as the moment conditions, which
    is the usual M-estimation sandwich for this two-stage estimator.
    """
    try:
        beta = mle_fit(ds, family, beta_init)
        converged = True
    except NonConvergence as exc:
        beta, converged = exc.result, False
    X, a, n, K = ds.covariates, ds.levels(), ds.n, family.K
    raw = family.raw_prob(beta, X)
    P, clamped, D = family.prob(beta, X)
    ind = np.eye(K + 1)[a]
    resid = ind[:, :K] - raw[:, :K]
    score = (resid[:, :, None] * X[:, None, :]).reshape(n, -1)
    # mean Hessian of the log-likelihood: -(diag(pi) - pi pi') kron x x'
    cov_pi = np.einsum("ik,kl->ikl", raw[:, :K], np.eye(K)) - raw[:, :K, None] * raw[:, None, :K]
    hess = -np.einsum("ikl,ij,im->kjlm", cov_pi, X, X).reshape(family.p, family.p) / n
    ipw = ind * ds.outcome[:, None] / P
    theta = ipw.sum(axis=0) / n
    g = ipw - theta[None, :]
    dg = -np.einsum("ik,ikp->kp", ipw, D) / n
    sigma = _sandwich(score, hess, g, dg) / n
    return CategoricalFit(beta_hat=beta, theta_hat=theta, sigma_hat=sigma,
                          converged=converged, clamp_count=int(clamped.sum()),
                          layout=family.layout)


@dataclass(frozen=True)
class Contrast:
    level: int
    estimate: float
    sd: float
    ci_lo: float
    ci_hi: float


def contrasts(fit: CategoricalFit, ref: int = 0, z: float = Z95) -> list[Contrast]:
    """``theta_k - theta_ref`` for every level with normal confidence limits."""
    th = np.asarray(fit.theta_hat)
    S = np.asarray(fit.sigma_hat)
    if not 0 <= ref < th.size:
        raise ValueError(f"reference level {ref} outside 0..{th.size - 1}")
    out = []
    for k in range(th.size):
        est = float(th[k] - th[ref])
        var = S[k, k] + S[ref, ref] - 2.0 * S[k, ref]
        sd = float(np.sqrt(max(var, 0.0)))
        out.append(Contrast(k, est, sd, est - z * sd, est + z * sd))
    return out


def efficiency_bound(m: Callable, v: Callable, pi: Callable, x_sample, K: int) -> np.ndarray:
    """Monte Carlo semiparametric efficiency bound for ``(theta_0..theta_K)``.

    ``m(k, X)``, ``v(k, X)`` and ``pi(k, X)`` are vectorized oracles returning
    one value per row of ``X``.  Entry ``(k, l)`` is
    ``I(k=l) E[v_k / pi_k] + cov(m_k, m_l)``.
    """
    X = np.asarray(x_sample, dtype=float)
    M = np.column_stack([np.broadcast_to(m(k, X), (X.shape[0],)) for k in range(K + 1)])
    first = np.array([np.mean(np.broadcast_to(v(k, X), (X.shape[0],)) / pi(k, X))
                      for k in range(K + 1)])
    Mc = M - M.mean(axis=0)
    return np.diag(first) + Mc.T @ Mc / X.shape[0]
