"""Simulation designs, misspecification transforms, metrics and replicate runner.

Two designs are provided.

``cat41``
    Four treatment levels, covariates ``X1 = 1`` and ``X2..X5 ~ N(3, 4)``
    (variance 4), multinomial-logit assignment, outcomes linear in ``X``
    plus standard normal noise.

``cont42``
    Covariates ``X1 = 1`` and standard normal ``X2..X5``; the dose satisfies
    ``A / 20 ~ Beta(15 lam(X), 15 (1 - lam(X)))``.  The outcome is either
    Bernoulli with a logistic mean ("nonlinear") or normal with an affine
    transform of the same index ("linear").

Every replicate ``r`` draws from a Philox generator keyed by ``seed ^ r`` so
replicates can run in any order or process and still reproduce exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import special

from .data import Dataset
from .errors import BalcauseError

# --- categorical design --------------------------------------------------

CAT41_BETA = np.array([
    [0.0, -0.2475, -0.275, 0.1875, 0.075],
    [0.0, -0.165, -0.15, 0.125, 0.05],
    [0.0, 0.0, 0.0, 0.0, 0.0],
])
CAT41_ALPHA = np.array([
    [200.0, 0.0, 13.7, 13.7, 13.7],
    [200.0, 27.4, 13.7, 13.7, 13.7],
    [200.0, 27.4, 13.7, 13.7, 13.7],
    [200.0, 27.4, 13.7, 13.7, 13.7],
])
CAT41_K = 3
CAT41_XMEAN = np.array([1.0, 3.0, 3.0, 3.0, 3.0])


def replicate_rng(seed: int, r: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=(int(seed) ^ int(r)) & (2 ** 64 - 1)))


def cat41_propensity(X) -> np.ndarray:
    """True ``(n, 4)`` assignment probabilities; level 3 is the reference."""
    eta = np.asarray(X) @ CAT41_BETA.T
    full = np.concatenate([eta, np.zeros((eta.shape[0], 1))], axis=1)
    full -= full.max(axis=1, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=1, keepdims=True)


def cat41_m(k, X) -> np.ndarray:
    return np.asarray(X) @ CAT41_ALPHA[k]


@dataclass(frozen=True)
class Cat41Truth:
    theta: np.ndarray
    beta: np.ndarray = field(default_factory=lambda: CAT41_BETA[:CAT41_K].reshape(-1).copy())

    def contrast(self, k: int, ref: int = 0) -> float:
        return float(self.theta[k] - self.theta[ref])


def cat41_covariates(n: int, rng) -> np.ndarray:
    return np.column_stack([np.ones(n), rng.normal(3.0, 2.0, size=(n, 4))])


def gen_cat41(n: int, seed: int, r: int = 0):
    """One ``cat41`` sample and the closed-form level means ``alpha_k' E[X]``."""
    rng = replicate_rng(seed, r)
    X = cat41_covariates(n, rng)
    P = cat41_propensity(X)
    u = rng.random(n)
    a = (u[:, None] > np.cumsum(P, axis=1)[:, :-1]).sum(axis=1)
    mean = np.einsum("ij,ij->i", X, CAT41_ALPHA[a])
    y = mean + rng.standard_normal(n)
    ds = Dataset(a, y, X, ("x1", "x2", "x3", "x4", "x5"), intercept=True)
    return ds, Cat41Truth(CAT41_ALPHA @ CAT41_XMEAN)


def misspecify_cat(X, which: str) -> np.ndarray:
    """Transformed covariates for a misspecified working model.

    ``which="pi"``: ``(e^X1, X1 X2, X1^2 X3, X1 + X4, X5 sin^2 X5)``.
    ``which="m"``:  ``(X1^2, X1 X2, X2 X3^2, (X4 - 3)^3 + 3, X5)``.
    """
    X = np.asarray(X, dtype=float)
    x1, x2, x3, x4, x5 = X.T
    if which == "pi":
        cols = (np.exp(x1), x1 * x2, x1 ** 2 * x3, x1 + x4, x5 * np.sin(x5) ** 2)
    elif which == "m":
        cols = (x1 ** 2, x1 * x2, x2 * x3 ** 2, (x4 - 3.0) ** 3 + 3.0, x5)
    else:
        raise ValueError(f"which must be 'pi' or 'm', got {which!r}")
    return np.column_stack(cols)


# --- continuous design ---------------------------------------------------

CONT42_GAMMA = np.array([-0.8, 0.1, 0.1, -0.1, 0.2])
CONT42_PHI = 15.0
CONT42_SCALE = 20.0
_MU_X = np.array([1.0, 0.2, 0.2, 0.3, -0.1])
_MU_AX = np.array([0.1, -0.1, 0.0, 0.1, 0.0])
_CUBE = 0.13 ** 3
LINEAR_NOISE_VAR = 0.16


def cont42_mu(a, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    a = np.asarray(a, dtype=float)
    return X @ _MU_X + a * (X @ _MU_AX) - _CUBE * a ** 3


def cont42_m(a, X, outcome: str) -> np.ndarray:
    mu = cont42_mu(a, X)
    if outcome == "nonlinear":
        return special.expit(mu)
    if outcome == "linear":
        return (mu + 15.0) / 20.0
    raise ValueError(f"outcome must be 'nonlinear' or 'linear', got {outcome!r}")


def cont42_sigma2(a, X, outcome: str) -> np.ndarray:
    if outcome == "linear":
        return np.full(np.broadcast(np.asarray(a), np.asarray(X)[:, 0]).shape, LINEAR_NOISE_VAR)
    m = cont42_m(a, X, outcome)
    return m * (1.0 - m)


def cont42_lambda(X) -> np.ndarray:
    return special.expit(np.asarray(X) @ CONT42_GAMMA)


def cont42_density(a, X) -> np.ndarray:
    """True conditional density of the dose on ``(0, 20)``."""
    from .propensity import BetaDensity
    fam = BetaDensity(5, CONT42_SCALE)
    X = np.atleast_2d(X)
    a = np.broadcast_to(np.asarray(a, float), (X.shape[0],))
    return np.exp(fam.logpdf(a, X, np.append(CONT42_GAMMA, CONT42_PHI)))


def cont42_covariates(n: int, rng) -> np.ndarray:
    return np.column_stack([np.ones(n), rng.standard_normal((n, 4))])


def _cache_dir() -> Optional[Path]:
    root = os.environ.get("BALCAUSE_CACHE_DIR")
    return Path(root) if root else None


def true_curve(grid, outcome: str, mc_draws: int = 1_000_000, seed: int = 20240601) -> np.ndarray:
    """``theta(a) = E m(a, X)`` by Monte Carlo over fresh covariate draws.

    Results are cached under ``$BALCAUSE_CACHE_DIR`` when that is set, keyed
    by design, grid and draw count.  The linear design has a closed form,
    ``(1 + 0.1 a - 0.13^3 a^3 + 15) / 20``, which is used directly.
    """
    grid = np.asarray(grid, dtype=float)
    if outcome == "linear":
        return (1.0 + 0.1 * grid - _CUBE * grid ** 3 + 15.0) / 20.0
    key = hashlib.sha256(
        f"{outcome}|{mc_draws}|{seed}|".encode() + grid.astype("<f8").tobytes()).hexdigest()[:24]
    root = _cache_dir()
    path = None if root is None else root / f"theta_{outcome}_{key}.npy"
    if path is not None and path.exists():
        return np.load(path)
    rng = replicate_rng(seed)
    out = np.zeros(grid.size)
    chunk = 100_000
    done = 0
    while done < mc_draws:
        m = min(chunk, mc_draws - done)
        X = cont42_covariates(m, rng)
        base, slope = X @ _MU_X, X @ _MU_AX
        mu = base[None, :] + grid[:, None] * slope[None, :] - _CUBE * grid[:, None] ** 3
        out += special.expit(mu).sum(axis=1)
        done += m
    out /= mc_draws
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".{os.getpid()}.tmp.npy")
        np.save(tmp, out)
        os.replace(tmp, path)
    return out


@dataclass(frozen=True)
class Cont42Truth:
    outcome: str

    def theta(self, grid, mc_draws: int = 1_000_000) -> np.ndarray:
        return true_curve(grid, self.outcome, mc_draws)

    def m(self, a, X):
        return cont42_m(a, X, self.outcome)

    def sigma2(self, a, X):
        return cont42_sigma2(a, X, self.outcome)

    @staticmethod
    def density(a, X):
        return cont42_density(a, X)


def gen_cont42(n: int, seed: int, outcome: str = "nonlinear", r: int = 0):
    """One ``cont42`` sample (doses on ``(0, 20)``) and its truth record."""
    rng = replicate_rng(seed, r)
    X = cont42_covariates(n, rng)
    lam = cont42_lambda(X)
    t = rng.beta(CONT42_PHI * lam, CONT42_PHI * (1.0 - lam))
    t = np.clip(t, 1e-12, 1 - 1e-12)
    a = CONT42_SCALE * t
    m = cont42_m(a, X, outcome)
    if outcome == "nonlinear":
        y = (rng.random(n) < m).astype(float)
    else:
        y = m + math.sqrt(LINEAR_NOISE_VAR) * rng.standard_normal(n)
    ds = Dataset(a, y, X, ("x1", "x2", "x3", "x4", "x5"), intercept=True)
    return ds, Cont42Truth(outcome)


def misspecify_cont(x) -> np.ndarray:
    """Kang-Schafer style transform of ``(1, x2, x3, x4, x5)``; row-wise on matrices."""
    x = np.asarray(x, dtype=float)
    X = np.atleast_2d(x)
    x2, x3, x4, x5 = X[:, 1], X[:, 2], X[:, 3], X[:, 4]
    out = np.column_stack([
        np.ones(X.shape[0]),
        np.exp(x2 / 2.0),
        x3 / (1.0 + np.exp(x2)) + 10.0,
        (x2 * x4 / 25.0 + 0.6) ** 3,
        (x3 + x5 + 20.0) ** 2,
    ])
    return out[0] if x.ndim == 1 else out


# --- oracles ---------------------------------------------------------------


def cat41_efficiency_bound(mc_draws: int = 200_000, seed: int = 1) -> np.ndarray:
    """Semiparametric efficiency bound of ``(theta_0..theta_3)`` for ``cat41``."""
    from .categorical import efficiency_bound
    X = cat41_covariates(mc_draws, replicate_rng(seed))
    P = cat41_propensity(X)
    return efficiency_bound(lambda k, Z: cat41_m(k, Z), lambda k, Z: 1.0,
                            lambda k, Z: P[:, k] if Z is X else cat41_propensity(Z)[:, k],
                            X, CAT41_K)


@dataclass(frozen=True)
class ContOracles:
    """Population quantities needed by the leading-order bias/variance formulas.

    All callables are vectorized over covariate rows: ``pi0(a, X)``,
    ``m(a, X)``, ``sigma2(a, X)`` and, for the misspecified-propensity
    formulas, ``pi_star(a, X)`` (the probability limit of the working model).
    ``covariates(m, rng)`` draws ``m`` covariate rows.
    """

    pi0: Callable
    m: Callable
    sigma2: Callable
    covariates: Callable
    pi_star: Optional[Callable] = None


def cont42_oracles(outcome: str = "linear") -> ContOracles:
    return ContOracles(
        pi0=cont42_density,
        m=lambda a, X: cont42_m(a, X, outcome),
        sigma2=lambda a, X: cont42_sigma2(a, X, outcome),
        covariates=cont42_covariates,
    )


def theoretical_bias_var_cont(oracles: ContOracles, a: float, h: float, n: int,
                              which: str = "thm2", mc_draws: int = 200_000, *,
                              kernel=None, seed: int = 0, step: Optional[float] = None):
    """Leading-order bias and variance of the raw kernel IPW estimator at ``a``.

    ``thm2`` (correct propensity)::

        bias = h^2/2 mu2 E[ d2/da2 {pi0 m}(a, X) / pi0(a, X) ]
        var  = r_K / (n h) E[ (m^2 + sigma^2)(a, X) / pi0(a, X) ]

    ``thm3`` replaces the denominators by ``pi_star`` (squared in the variance,
    with ``pi0`` in the numerator).  The second derivative is a central
    second difference with step ``step`` (default ``1e-3 max(1, |a|)``);
    expectations are Monte Carlo averages over ``mc_draws`` covariate rows.
    """
    from .continuous import EPANECHNIKOV
    kernel = EPANECHNIKOV if kernel is None else kernel
    if which not in ("thm2", "thm3"):
        raise ValueError(f"which must be 'thm2' or 'thm3', got {which!r}")
    if which == "thm3" and oracles.pi_star is None:
        raise ValueError("thm3 needs oracles.pi_star")
    X = oracles.covariates(mc_draws, replicate_rng(seed))
    e = 1e-3 * max(1.0, abs(a)) if step is None else step
    prod = lambda t: oracles.pi0(t, X) * oracles.m(t, X)
    d2 = (prod(a + e) - 2.0 * prod(a) + prod(a - e)) / (e * e)
    p0 = oracles.pi0(a, X)
    second = oracles.m(a, X) ** 2 + oracles.sigma2(a, X)
    if which == "thm2":
        bias = 0.5 * h * h * kernel.mu2 * float(np.mean(d2 / p0))
        var = kernel.r_K / (n * h) * float(np.mean(second / p0))
    else:
        ps = oracles.pi_star(a, X)
        bias = 0.5 * h * h * kernel.mu2 * float(np.mean(d2 / ps))
        var = kernel.r_K / (n * h) * float(np.mean(p0 * second / ps ** 2))
    return bias, var


_POP_CACHE: dict = {}


def cont42_population_grid(size: int = 51, draws: int = 2_000_000, density_draws: int = 200_000,
                           seed: int = 20240602):
    """Common evaluation grid over the population 5%-95% dose quantiles.

    Returns ``(grid, f_A)`` where ``f_A`` is the marginal dose density on the
    grid (Monte Carlo over covariates).  Cached in memory and, when
    ``$BALCAUSE_CACHE_DIR`` is set, on disk.
    """
    key = (size, draws, density_draws, seed)
    if key in _POP_CACHE:
        return _POP_CACHE[key]
    root = _cache_dir()
    path = None if root is None else root / ("pop_" + "_".join(map(str, key)) + ".npy")
    if path is not None and path.exists():
        arr = np.load(path)
    else:
        rng = replicate_rng(seed)
        lam = cont42_lambda(cont42_covariates(draws, rng))
        a = CONT42_SCALE * rng.beta(CONT42_PHI * lam, CONT42_PHI * (1.0 - lam))
        lo, hi = np.quantile(a, [0.05, 0.95])
        grid = np.linspace(lo, hi, size)
        X = cont42_covariates(density_draws, rng)
        fa = np.array([np.mean(cont42_density(g, X)) for g in grid])
        arr = np.vstack([grid, fa])
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(f".{os.getpid()}.tmp.npy")
            np.save(tmp, arr)
            os.replace(tmp, path)
    _POP_CACHE[key] = (arr[0], arr[1])
    return _POP_CACHE[key]


# --- scenarios and metrics --------------------------------------------------

DESIGNS = ("cat41", "cont_nonlinear", "cont_linear")
METHODS = ("balancing", "mle")


class SimulationFailed(BalcauseError):
    """More than 5% of replicates failed."""


@dataclass(frozen=True)
class Scenario:
    """One simulation configuration.

    ``methods`` lists the estimators to run on every replicate: ``balancing``
    (covariate-balancing IPW) and/or ``mle`` (IPW with a maximum-likelihood
    propensity).  The continuous settings (``estimator``, ``h``, ``c_l``,
    ``kernel``) are ignored for ``cat41``; ``h`` may be ``"loocv"``,
    ``"oscv"`` or a fixed positive number.
    """

    design: str
    n: int
    replicates: int
    pi_correct: bool = True
    m_correct: bool = True
    seed: int = 0
    methods: tuple = ("balancing",)
    estimator: str = "local_constant"
    h: object = "loocv"
    c_l: float = 3.0
    kernel: str = "epanechnikov"
    grid_size: int = 51

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ValueError(f"design must be one of {DESIGNS}, got {self.design!r}")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.n < 10:
            raise ValueError("n must be at least 10")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ValueError(f"methods must be a nonempty subset of {METHODS}, got {self.methods}")
        from .continuous import ESTIMATORS, KernelSpec, BandwidthPlan
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        KernelSpec(self.kernel)
        BandwidthPlan(h=self.h, c_l=self.c_l)

    @property
    def continuous(self) -> bool:
        return self.design != "cat41"

    @property
    def outcome(self) -> str:
        return "linear" if self.design == "cont_linear" else "nonlinear"

    def config(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.config(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and not np.isfinite(x)):
        return "NA"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


@dataclass
class MetricTable:
    """Aggregated replicate metrics plus the scenario that produced them.

    Categorical rows: ``method, contrast, bias, sd, mse, sd_hat, coverage``.
    Continuous rows: ``method, estimator, h_rule, bias_x100, rmse_x100``.
    ``sd`` is absent (NaN) with a single replicate.
    """

    scenario: Scenario
    columns: list
    rows: list
    replicates: int
    failures: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def failure_count(self) -> int:
        return max(self.failures.values(), default=0)

    def row(self, **match) -> dict:
        for r in self.rows:
            if all(r.get(k) == v for k, v in match.items()):
                return r
        raise KeyError(match)

    def to_csv(self, path) -> None:
        lines = [",".join(self.columns)]
        lines += [",".join(_fmt(r[c]) for c in self.columns) for r in self.rows]
        lines.append(f"# config-hash: {self.scenario.config_hash()}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def sidecar(self) -> dict:
        clean = lambda v: None if isinstance(v, float) and not np.isfinite(v) else v
        return {
            "scenario": self.scenario.config(),
            "config_hash": self.scenario.config_hash(),
            "replicates": self.replicates,
            "failures": dict(self.failures),
            "rows": [{k: clean(v) for k, v in r.items()} for r in self.rows],
            **self.extra,
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")


# --- replicate workers -------------------------------------------------------


def _cat_working(sc: Scenario, ds: Dataset):
    X = ds.covariates
    Xpi = X if sc.pi_correct else misspecify_cat(X, "pi")
    Xm = X if sc.m_correct else misspecify_cat(X, "m")
    return ds.with_covariates(Xpi), Xm


def _cat_replicate(sc: Scenario, r: int) -> dict:
    from .basis import covariate_basis
    from .categorical import contrasts, fit_categorical, ml_ipw
    from .propensity import ExtendedLogit, MultinomialLogit

    ds, truth = gen_cat41(sc.n, sc.seed, r)
    dpi, Xm = _cat_working(sc, ds)
    K, d = CAT41_K, dpi.d
    mnl = MultinomialLogit(K, d)
    out = {}
    beta_mle = None
    for method in sc.methods:
        try:
            if beta_mle is None:
                from .propensity import mle_fit
                beta_mle = mle_fit(dpi, mnl)
            if method == "balancing":
                fit = fit_categorical(dpi, ExtendedLogit(K, d), covariate_basis(Xm.shape[1]),
                                      np.append(beta_mle, np.zeros(d)), basis_covariates=Xm)
                if not fit.converged:
                    raise NonConvergenceMarker("balancing fit did not converge")
            else:
                fit = ml_ipw(dpi, mnl, beta_mle)
            cs = contrasts(fit, 0)[1:]
            out[method] = np.array([[c.estimate, c.sd] for c in cs])
        except _REPLICATE_ERRORS as exc:
            out[method] = type(exc).__name__
    return out


def _cont_working(sc: Scenario, ds: Dataset):
    from .basis import BasisSpec
    X = ds.covariates
    Xpi = X if sc.pi_correct else misspecify_cont(X)
    if sc.m_correct:
        basis = BasisSpec(11, lambda a, Z: np.column_stack([Z, a[:, None] * Z, a ** 3]),
                          "x,a*x,a3")
        Xb = X
    else:
        basis = BasisSpec(10, lambda a, Z: np.column_stack([Z, a[:, None] * Z]), "x*,a*x*")
        Xb = misspecify_cont(X)
    return ds.with_covariates(Xpi), basis, Xb


def _cont_replicate(sc: Scenario, r: int, grid: np.ndarray) -> dict:
    from .continuous import BandwidthPlan, KernelSpec, dose_response_curve, fit_balance_continuous
    from .propensity import BetaDensity, mle_fit

    ds, _ = gen_cont42(sc.n, sc.seed, sc.outcome, r)
    dpi, basis, Xb = _cont_working(sc, ds)
    fam = BetaDensity(dpi.d, CONT42_SCALE)
    kernel = KernelSpec(sc.kernel)
    plan = BandwidthPlan(h=sc.h, c_l=sc.c_l)
    out = {}
    beta_mle = None
    for method in sc.methods:
        try:
            if beta_mle is None:
                beta_mle = mle_fit(dpi, fam)
            if method == "balancing":
                beta = fit_balance_continuous(dpi, fam, basis, beta_mle, plan.l_for(sc.n),
                                              kernel=kernel, basis_covariates=Xb)
            else:
                beta = beta_mle
            curve = dose_response_curve(dpi, fam, basis, plan, grid, sc.estimator, "ratio",
                                        kernel=kernel, beta_hat=beta, allow_boundary=True)
            out[method] = np.asarray(curve.theta)
        except _REPLICATE_ERRORS as exc:
            out[method] = type(exc).__name__
    return out


class NonConvergenceMarker(BalcauseError):
    pass


_REPLICATE_ERRORS = (BalcauseError, ArithmeticError, np.linalg.LinAlgError, ValueError)


def _replicate(args):
    sc, r, grid = args
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if sc.continuous:
            return _cont_replicate(sc, r, grid)
        return _cat_replicate(sc, r)


# --- aggregation ---------------------------------------------------------------


def _cat_rows(sc, results, z):
    from .categorical import Z95
    z = Z95 if z is None else z
    truth = (CAT41_ALPHA @ CAT41_XMEAN)
    rows, failures = [], {}
    for method in sc.methods:
        ok = [res[method] for res in results if not isinstance(res[method], str)]
        failures[method] = len(results) - len(ok)
        if not ok:
            continue
        arr = np.stack(ok)  # (R_ok, K, 2)
        for k in range(CAT41_K):
            est, sd = arr[:, k, 0], arr[:, k, 1]
            target = truth[k + 1] - truth[0]
            err = est - target
            cover = np.abs(err) <= z * sd
            rows.append({
                "method": method,
                "contrast": f"theta{k + 1}-theta0",
                "bias": float(np.mean(err)),
                "sd": float(np.std(est, ddof=1)) if est.size > 1 else float("nan"),
                "mse": float(np.mean(err ** 2)),
                "sd_hat": float(np.mean(sd)),
                "coverage": float(np.mean(cover)),
                "n_ok": int(est.size),
            })
    cols = ["method", "contrast", "bias", "sd", "mse", "sd_hat", "coverage", "n_ok"]
    return cols, rows, failures


def integrated_metrics(estimates: np.ndarray, truth: np.ndarray, weights: np.ndarray, grid):
    """Integrated absolute bias and RMSE of curve estimates ``(R, G)``.

    Both integrands are weighted by ``weights`` (the dose density) and
    normalized by the weight's integral over the grid (trapezoid rule).
    """
    est = np.atleast_2d(estimates)
    bias = np.abs(est.mean(axis=0) - truth)
    rmse = np.sqrt(np.mean((est - truth) ** 2, axis=0))
    mass = np.trapezoid(weights, grid)
    return (float(np.trapezoid(bias * weights, grid) / mass),
            float(np.trapezoid(rmse * weights, grid) / mass))


def _cont_rows(sc, results, grid, fa, truth):
    rows, failures = [], {}
    for method in sc.methods:
        ok = [res[method] for res in results if not isinstance(res[method], str)]
        failures[method] = len(results) - len(ok)
        if not ok:
            continue
        bias, rmse = integrated_metrics(np.stack(ok), truth, fa, grid)
        rows.append({
            "method": method,
            "estimator": sc.estimator,
            "h_rule": str(sc.h),
            "bias_x100": 100.0 * bias,
            "rmse_x100": 100.0 * rmse,
            "n_ok": len(ok),
        })
    cols = ["method", "estimator", "h_rule", "bias_x100", "rmse_x100", "n_ok"]
    return cols, rows, failures


def run_replicates(sc: Scenario, workers: int = 1, *, z: Optional[float] = None,
                   keep_raw: bool = False, max_failure_rate: float = 0.05) -> MetricTable:
    """Run every replicate of ``sc`` and aggregate.

    Replicates are independent (replicate ``r`` uses generator key
    ``seed ^ r``) and may run in ``workers`` processes; results are collected
    in replicate order so the table does not depend on ``workers``.  Failed
    replicates are counted and excluded.  More than ``max_failure_rate`` of
    failures for any method raises :class:`SimulationFailed`, carrying the
    table as ``exc.table``.
    """
    grid = None
    if sc.continuous:
        grid, fa = cont42_population_grid(sc.grid_size)
        truth = true_curve(grid, sc.outcome)
    jobs = [(sc, r, grid) for r in range(sc.replicates)]
    if workers > 1 and sc.replicates > 1:
        chunk = max(1, sc.replicates // (4 * workers))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replicate, jobs, chunksize=chunk))
    else:
        results = [_replicate(j) for j in jobs]

    if sc.continuous:
        cols, rows, failures = _cont_rows(sc, results, grid, fa, truth)
        extra = {"grid": grid.tolist(), "truth": truth.tolist()}
    else:
        cols, rows, failures = _cat_rows(sc, results, z)
        extra = {"truth_contrasts": (CAT41_ALPHA[1:] @ CAT41_XMEAN
                                     - CAT41_ALPHA[0] @ CAT41_XMEAN).tolist()}
    if keep_raw:
        extra["raw"] = results
    table = MetricTable(sc, cols, rows, sc.replicates, failures, extra)
    if any(f > max_failure_rate * sc.replicates for f in failures.values()):
        exc = SimulationFailed(f"replicate failures {failures} exceed "
                               f"{max_failure_rate:.0%} of {sc.replicates}")
        exc.table = table
        raise exc
    return table
