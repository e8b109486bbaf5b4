"""Parametric generalized propensity score families and likelihood fitting.

Categorical families give ``pi(k, x, beta)`` for levels ``k = 0..K``; the
continuous family gives a conditional density ``pi(a, x, beta)``.  Every value
used as an inverse-probability denominator is floored at ``DELTA`` (and
probabilities capped at ``1 - DELTA``); the derivative of a clamped value is
zero.

Parameter layouts
-----------------
MultinomialLogit   ``beta[k*d + j]``: covariate ``j`` for level ``k``,
                   ``k = 0..K-1``; level ``K`` is the reference (zero block).
SameBasisLogLinear ``beta[k*q + j]``: basis column ``j`` for level ``k``,
                   ``k = 0..K``.
BetaDensity        ``(gamma_1..gamma_d, phi)``; ``phi`` omitted when fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special
from scipy.linalg import block_diag

from ._optim import index_preconditioner, quasi_newton
from .basis import BasisSpec
from .errors import DomainError, NonConvergence

DELTA = 1e-3


@dataclass
class ClampCounter:
    """Running count of probabilities/densities pushed onto the floor or cap."""

    count: int = 0

    def add(self, k) -> None:
        self.count += int(k)


@dataclass(frozen=True)
class Reparam:
    """``beta = P @ u`` on the linear block; optionally ``phi = exp(u[-1])``."""

    P: np.ndarray
    log_last: bool = False

    def beta(self, u):
        u = np.asarray(u, dtype=float)
        if self.log_last:
            return np.append(self.P @ u[:-1], math.exp(min(u[-1], 700.0)))
        return self.P @ u

    def u(self, beta):
        beta = np.asarray(beta, dtype=float)
        if self.log_last:
            return np.append(np.linalg.solve(self.P, beta[:-1]), math.log(beta[-1]))
        return np.linalg.solve(self.P, beta)

    def grad_u(self, u, grad_beta):
        """Chain rule: gradient in ``u`` from gradient in ``beta``."""
        grad_beta = np.asarray(grad_beta, dtype=float)
        if self.log_last:
            phi = math.exp(min(u[-1], 700.0))
            return np.append(self.P.T @ grad_beta[:-1], grad_beta[-1] * phi)
        return self.P.T @ grad_beta


# --- categorical families ------------------------------------------------


def _softmax_with_reference(eta: np.ndarray) -> np.ndarray:
    """Rows of ``eta`` (n, K) plus an implicit zero column -> (n, K+1) probabilities."""
    full = np.concatenate([eta, np.zeros((eta.shape[0], 1))], axis=1)
    full -= full.max(axis=1, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class MultinomialLogit:
    K: int
    d: int
    kind: str = field(default="categorical", init=False)

    @property
    def p(self) -> int:
        return self.K * self.d

    @property
    def layout(self) -> str:
        return (f"multinomial-logit K={self.K} d={self.d}: beta[k*{self.d}+j], "
                f"k=0..{self.K - 1}, reference level {self.K}")

    def raw_prob(self, beta, X) -> np.ndarray:
        B = np.asarray(beta, dtype=float).reshape(self.K, self.d)
        return _softmax_with_reference(X @ B.T)

    def prob(self, beta, X, delta=DELTA):
        """Floored ``(n, K+1)`` probabilities, clamp mask and ``d log pi / d beta``."""
        raw = self.raw_prob(beta, X)
        clamped = (raw < delta) | (raw > 1.0 - delta)
        P = np.clip(raw, delta, 1.0 - delta)
        n = X.shape[0]
        # d log pi_k / d beta_j = (1{k=j} - pi_j) x, blocks j = 0..K-1
        eye = np.eye(self.K + 1)[:, : self.K]
        coef = eye[None, :, :] - raw[:, None, : self.K]
        D = (coef[:, :, :, None] * X[:, None, None, :]).reshape(n, self.K + 1, self.p)
        D[clamped] = 0.0
        return P, clamped, D

    def reparam(self, ds) -> Reparam:
        return Reparam(np.kron(np.eye(self.K), index_preconditioner(ds.covariates)))

    def loglik(self, beta, ds):
        """Multinomial log-likelihood and its gradient (unfloored probabilities)."""
        X = ds.covariates
        a = ds.levels()
        raw = self.raw_prob(beta, X)
        ll = float(np.sum(np.log(np.maximum(raw[np.arange(ds.n), a], 1e-300))))
        resid = np.eye(self.K + 1)[a][:, : self.K] - raw[:, : self.K]
        grad = (resid.T @ X).reshape(-1)
        return ll, grad

    def default_init(self, ds) -> np.ndarray:
        return np.zeros(self.p)


@dataclass(frozen=True)
class ExtendedLogit:
    """Logit family with a free coefficient block for the reference level.

    ``pi(k, x) = exp(x' beta_k) / (1 + sum_{j<K} exp(x' beta_j))`` for every
    ``k = 0..K``, including ``k = K``.  With ``beta_K = 0`` this is exactly
    :class:`MultinomialLogit`; the extra block lets the balancing equations
    with ``B(k, x) = x`` be solved exactly (``p = (K+1) d``).  Probabilities
    need not sum to one away from ``beta_K = 0``.
    """

    K: int
    d: int
    kind: str = field(default="categorical", init=False)

    @property
    def p(self) -> int:
        return (self.K + 1) * self.d

    @property
    def layout(self) -> str:
        return (f"extended-logit K={self.K} d={self.d}: beta[k*{self.d}+j], "
                f"k=0..{self.K}; level {self.K} numerator exp(x'beta_{self.K})")

    def raw_prob(self, beta, X) -> np.ndarray:
        B = np.asarray(beta, dtype=float).reshape(self.K + 1, self.d)
        eta = X @ B.T
        shift = np.maximum(eta[:, : self.K].max(axis=1), 0.0)[:, None]
        num = np.exp(np.minimum(eta - shift, 700.0))
        den = np.exp(-shift) + num[:, : self.K].sum(axis=1, keepdims=True)
        return num / den

    def prob(self, beta, X, delta=DELTA):
        raw = self.raw_prob(beta, X)
        clamped = (raw < delta) | (raw > 1.0 - delta)
        P = np.clip(raw, delta, 1.0 - delta)
        n = X.shape[0]
        coef = np.zeros((n, self.K + 1, self.K + 1))
        coef[:, :, : self.K] = np.eye(self.K + 1)[None, :, : self.K] - raw[:, None, : self.K]
        coef[:, self.K, self.K] = 1.0
        D = (coef[:, :, :, None] * X[:, None, None, :]).reshape(n, self.K + 1, self.p)
        D[clamped] = 0.0
        return P, clamped, D

    def reparam(self, ds) -> Reparam:
        return Reparam(np.kron(np.eye(self.K + 1), index_preconditioner(ds.covariates)))

    def loglik(self, beta, ds):
        """Likelihood of the nested multinomial logit (reference block held at zero)."""
        mnl = MultinomialLogit(self.K, self.d)
        beta = np.asarray(beta, dtype=float)
        ll, g = mnl.loglik(beta[: self.K * self.d], ds)
        return ll, np.append(g, np.zeros(self.d))

    def default_init(self, ds) -> np.ndarray:
        return np.zeros(self.p)


@dataclass(frozen=True)
class SameBasisLogLinear:
    """``pi(k, x, beta) = beta_(k)' B(k, x)``, a linear index clamped to [delta, 1-delta]."""

    K: int
    basis: BasisSpec
    kind: str = field(default="categorical", init=False)

    @property
    def q(self) -> int:
        return self.basis.q

    @property
    def p(self) -> int:
        return (self.K + 1) * self.q

    @property
    def layout(self) -> str:
        return (f"same-basis linear K={self.K} q={self.q}: beta[k*{self.q}+j], "
                f"k=0..{self.K}")

    def _bases(self, X):
        return [self.basis(k, X) for k in range(self.K + 1)]

    def raw_prob(self, beta, X) -> np.ndarray:
        Bk = self._bases(X)
        blocks = np.asarray(beta, dtype=float).reshape(self.K + 1, self.q)
        return np.column_stack([Bk[k] @ blocks[k] for k in range(self.K + 1)])

    def prob(self, beta, X, delta=DELTA):
        Bk = self._bases(X)
        blocks = np.asarray(beta, dtype=float).reshape(self.K + 1, self.q)
        raw = np.column_stack([Bk[k] @ blocks[k] for k in range(self.K + 1)])
        clamped = (raw < delta) | (raw > 1.0 - delta)
        P = np.clip(raw, delta, 1.0 - delta)
        n = X.shape[0]
        D = np.zeros((n, self.K + 1, self.p))
        for k in range(self.K + 1):
            D[:, k, k * self.q:(k + 1) * self.q] = Bk[k] / P[:, k:k + 1]
        D[clamped] = 0.0
        return P, clamped, D

    def reparam(self, ds) -> Reparam:
        blocks = [index_preconditioner(self.basis(k, ds.covariates))
                  for k in range(self.K + 1)]
        return Reparam(block_diag(*blocks))

    def loglik(self, beta, ds):
        """Log-linear pseudo-likelihood ``sum_i sum_k [I(A_i=k) log pi_ik - pi_ik]``.

        Its stationary point is the exact-balance solution for this family.
        """
        X = ds.covariates
        a = ds.levels()
        P, clamped, _ = self.prob(beta, X)
        ind = np.eye(self.K + 1)[a]
        ll = float(np.sum(ind * np.log(P) - P))
        Bk = self._bases(X)
        grad = np.zeros(self.p)
        for k in range(self.K + 1):
            w = np.where(clamped[:, k], 0.0, ind[:, k] / P[:, k] - 1.0)
            grad[k * self.q:(k + 1) * self.q] = Bk[k].T @ w
        return ll, grad

    def default_init(self, ds) -> np.ndarray:
        """Least-squares projection of the empirical level frequencies onto each level's basis.

        With an intercept in the basis this is ``pi(k, x) = n_k / n`` for every
        unit, an interior point from which the balancing fit never starts on a
        clamped plateau.
        """
        X = ds.covariates
        freq = np.bincount(ds.levels(), minlength=self.K + 1) / ds.n
        out = []
        for k in range(self.K + 1):
            Bk = self.basis(k, X)
            coef, *_ = np.linalg.lstsq(Bk, np.full(ds.n, freq[k]), rcond=None)
            out.append(coef)
        return np.concatenate(out)


# --- continuous family ---------------------------------------------------


@dataclass(frozen=True)
class BetaDensity:
    """Density of ``A`` when ``A / scale ~ Beta(phi*lam(x), phi*(1-lam(x)))``.

    ``logit lam(x) = gamma' x``.  With ``fixed_phi`` set, ``phi`` is not a
    parameter and ``beta = gamma``.
    """

    d: int
    scale: float = 1.0
    fixed_phi: Optional[float] = None
    kind: str = field(default="continuous", init=False)

    @property
    def p(self) -> int:
        return self.d + (0 if self.fixed_phi is not None else 1)

    @property
    def layout(self) -> str:
        tail = "" if self.fixed_phi is not None else ", phi"
        return f"beta density scale={self.scale:g}: (gamma_1..gamma_{self.d}{tail})"

    def _split(self, beta):
        beta = np.asarray(beta, dtype=float)
        if self.fixed_phi is not None:
            return beta, float(self.fixed_phi)
        return beta[: self.d], float(beta[self.d])

    def _row_terms(self, X, beta):
        gamma, phi = self._split(beta)
        lam = special.expit(X @ gamma)
        lam = np.clip(lam, 1e-12, 1.0 - 1e-12)
        al, be = phi * lam, phi * (1.0 - lam)
        const = special.gammaln(phi) - special.gammaln(al) - special.gammaln(be)
        return lam, phi, al, be, const

    def logpdf(self, a, X, beta, rows=None) -> np.ndarray:
        """Log density at ``a`` for covariate rows ``X`` (or ``X[rows]``)."""
        lam, phi, al, be, const = self._row_terms(X, beta)
        if rows is not None:
            al, be, const = al[rows], be[rows], const[rows]
        t = np.asarray(a, dtype=float) / self.scale
        with np.errstate(divide="ignore", invalid="ignore"):
            out = const + (al - 1.0) * np.log(t) + (be - 1.0) * np.log1p(-t) - math.log(self.scale)
        return np.where((t > 0) & (t < 1), out, -np.inf)

    def dlogpdf(self, a, X, beta, rows=None) -> np.ndarray:
        """Gradient of :meth:`logpdf` with respect to ``beta``, shape ``(m, p)``."""
        lam, phi, al, be, _ = self._row_terms(X, beta)
        dig_a, dig_b = special.digamma(al), special.digamma(be)
        Xr = X
        if rows is not None:
            lam, al, be, dig_a, dig_b, Xr = lam[rows], al[rows], be[rows], dig_a[rows], dig_b[rows], X[rows]
        t = np.asarray(a, dtype=float) / self.scale
        lt, l1t = np.log(t), np.log1p(-t)
        dg = phi * lam * (1.0 - lam) * (dig_b - dig_a + lt - l1t)
        grad = dg[:, None] * Xr
        if self.fixed_phi is None:
            dphi = special.digamma(phi) - lam * dig_a - (1.0 - lam) * dig_b + lam * lt + (1.0 - lam) * l1t
            grad = np.column_stack([grad, dphi])
        return grad

    def pdf(self, a, X, beta, rows=None, delta=DELTA):
        """Floored density and clamp mask."""
        raw = np.exp(self.logpdf(a, X, beta, rows))
        clamped = raw < delta
        return np.maximum(raw, delta), clamped

    def reparam(self, ds) -> Reparam:
        return Reparam(index_preconditioner(ds.covariates), self.fixed_phi is None)

    def loglik(self, beta, ds):
        X = ds.covariates
        if self.fixed_phi is None and beta[-1] <= 0:
            return -np.inf, np.zeros(self.p)
        lp = self.logpdf(ds.treatment, X, beta)
        g = self.dlogpdf(ds.treatment, X, beta)
        return float(lp.sum()), g.sum(axis=0)

    def default_init(self, ds) -> np.ndarray:
        """Method-of-moments start: intercept from the mean dose, phi from its variance."""
        t = np.clip(ds.treatment / self.scale, 1e-6, 1 - 1e-6)
        m, v = t.mean(), t.var()
        gamma = np.zeros(self.d)
        X = ds.covariates
        j0 = np.flatnonzero(np.all(X == X[0], axis=0))
        if j0.size:
            gamma[j0[0]] = special.logit(m) / X[0, j0[0]]
        if self.fixed_phi is not None:
            return gamma
        phi = max(m * (1 - m) / max(v, 1e-12) - 1.0, 0.5)
        return np.append(gamma, phi)


# --- scalar evaluation helpers ------------------------------------------


def mnl_prob(x, beta, k, K, delta=DELTA) -> float:
    """``pi(k, x, beta)`` for the multinomial logit with reference level ``K``."""
    x = np.asarray(x, dtype=float)
    fam = MultinomialLogit(K, x.shape[0])
    P, _, _ = fam.prob(beta, x[None, :], delta)
    return float(P[0, k])


def samebasis_prob(x, beta_block, k, basis: BasisSpec, delta=DELTA,
                   counter: Optional[ClampCounter] = None) -> float:
    """``clamp(beta_(k)' B(k, x), delta, 1 - delta)``."""
    val = float(basis(k, np.asarray(x, dtype=float)[None, :])[0] @ np.asarray(beta_block, dtype=float))
    out = min(max(val, delta), 1.0 - delta)
    if out != val and counter is not None:
        counter.add(1)
    return out


def beta_density(a, x, gamma, phi, scale=1.0) -> float:
    """Beta(phi*lam(x), phi*(1-lam(x))) density of ``a / scale``, divided by ``scale``."""
    if not 0.0 < a < scale:
        raise DomainError(f"dose {a} outside the open interval (0, {scale})")
    if phi <= 0:
        raise DomainError("phi must be positive")
    x = np.asarray(x, dtype=float)
    fam = BetaDensity(x.shape[0], scale)
    return float(np.exp(fam.logpdf(np.array([a]), x[None, :], np.append(gamma, phi)))[0])


# --- maximum likelihood --------------------------------------------------


def mle_fit(ds, family, beta_init=None, maxiter=500) -> np.ndarray:
    """Maximize the family's sample log-likelihood.

    Converged when the gradient norm is at most ``1e-6 * (1 + |loglik|)``,
    measured in the preconditioned coordinates so covariate scale does not
    matter; otherwise :class:`NonConvergence` is raised with the best point
    attached.
    """
    rp = family.reparam(ds)
    beta0 = family.default_init(ds) if beta_init is None else np.asarray(beta_init, float)
    u0 = rp.u(beta0)

    def negll(u):
        beta = rp.beta(u)
        ll, g = family.loglik(beta, ds)
        if not np.isfinite(ll):
            return np.inf, np.zeros_like(u)
        return -ll, -rp.grad_u(u, g)

    def check(u):
        f, gu = negll(u)
        return np.isfinite(f) and np.linalg.norm(gu) <= 1e-6 * (1.0 + abs(f)), float(np.linalg.norm(gu))

    res = quasi_newton(negll, u0, gtol=1e-9, maxiter=maxiter)
    ok, gnorm = check(res.x)
    if not ok:
        # polish: restart from the current point, BFGS memory reset
        res = quasi_newton(negll, res.x, gtol=1e-10, maxiter=maxiter)
        ok, gnorm = check(res.x)
    beta = rp.beta(res.x)
    if not ok:
        raise NonConvergence(f"likelihood fit stopped with gradient norm {gnorm:.3g}",
                             iterations=res.nit, grad_norm=gnorm, result=beta)
    return beta
