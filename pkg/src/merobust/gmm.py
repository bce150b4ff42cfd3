"""GMM minimization, Sargan/Hansen J statistics and variance estimators.

Any object exposing ``n_params``, ``n_moments`` and
``evaluate(dataset, theta, jacobian) -> (U, G)`` can be fitted; ``U`` is the
(n, n_moments) matrix of per-row moments and ``G`` their mean Jacobian.
``moments.MomentSystem`` is the main implementation; ``EffectSystem`` adds
the structural effect ``psi`` as a leading parameter.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy import linalg, optimize, special

from .dataset import Dataset
from .moments import MomentError, MomentSystem, interaction_design, structural_shift

RIDGE_FACTOR = 1e-10
MAX_CONDITION = 1e12


class GmmError(RuntimeError):
    """Numerical failure of the GMM machinery."""


class SingularWeightError(GmmError):
    pass


class UnidentifiedError(GmmError):
    pass


class IdentificationWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class WeightingScheme:
    """How the GMM weight matrix is formed.

    kind : ``two_step`` | ``iterated`` | ``cue`` | ``profiled``
        ``profiled`` fixes gamma at the root of the outcome score, drops the
        score block and weights with the score-corrected covariance.
    covariance : ``iid`` | ``hac``
        ``hac`` uses Newey-West/Bartlett weights; rows must be in time order.
    """

    kind: str = "iterated"
    covariance: str = "iid"
    bandwidth: int | None = None
    max_iter: int = 50
    tol: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("two_step", "iterated", "cue", "profiled"):
            raise ValueError(f"unknown weighting kind {self.kind!r}")
        if self.covariance not in ("iid", "hac"):
            raise ValueError(f"unknown covariance {self.covariance!r}")
        if self.max_iter < 1 or not self.tol > 0:
            raise ValueError("max_iter must be >= 1 and tol > 0")
        if self.bandwidth is not None and self.bandwidth < 0:
            raise ValueError("bandwidth must be >= 0")

    def describe(self) -> str:
        cov = self.covariance
        if cov == "hac":
            cov += f"(bartlett, bandwidth={'auto' if self.bandwidth is None else self.bandwidth})"
        return f"{self.kind}/{cov}"


@dataclass
class GmmFit:
    theta: np.ndarray
    j_stat: float
    df: int
    p_value: float
    omega: np.ndarray
    n_iterations: int
    converged: bool
    objective_trace: list[float]
    jacobian_rank: int
    n: int
    scheme: str
    param_labels: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def params(self):
        return dict(zip(self.param_labels, self.theta.tolist()))


# -- covariance estimators -----------------------------------------------------

def default_bandwidth(n: int) -> int:
    """Newey-West rule ``floor(4 (n/100)^(2/9))``."""
    return int(math.floor(4.0 * (n / 100.0) ** (2.0 / 9.0)))


def _iid(u: np.ndarray) -> np.ndarray:
    return u.T @ u / u.shape[0]


def _hac(u: np.ndarray, bandwidth: int) -> np.ndarray:
    n = u.shape[0]
    if bandwidth >= n:
        raise ValueError(f"bandwidth {bandwidth} must be smaller than n = {n}")
    omega = u.T @ u / n
    for lag in range(1, bandwidth + 1):
        gamma = u[lag:].T @ u[:-lag] / n
        omega += (1.0 - lag / (bandwidth + 1.0)) * (gamma + gamma.T)
    return omega


def _condition(omega: np.ndarray):
    """Symmetrize, ridge once if needed, and return ``(omega, L^-1)``."""
    omega = 0.5 * (omega + omega.T)
    if not np.all(np.isfinite(omega)):
        raise SingularWeightError("non-finite moment covariance")

    def attempt(mat):
        try:
            chol = linalg.cholesky(mat, lower=True)
        except linalg.LinAlgError:
            return None
        d = np.diag(chol)
        # cond(omega) >= (max d / min d)^2; confirm with the exact value only when close
        if d.min() <= 0 or (d.max() / d.min()) ** 2 > MAX_CONDITION or (
                np.linalg.cond(mat) > MAX_CONDITION):
            return None
        return chol

    chol = attempt(omega)
    if chol is None:
        ridge = RIDGE_FACTOR * np.trace(omega) / omega.shape[0]
        omega = omega + ridge * np.eye(omega.shape[0])
        chol = attempt(omega) if ridge > 0 else None
        if chol is None:
            raise SingularWeightError("moment covariance is singular even after ridge")
    linv = linalg.solve_triangular(chol, np.eye(omega.shape[0]), lower=True)
    return omega, linv


def empirical_moments(system, dataset: Dataset, theta) -> np.ndarray:
    """Column means of the moment matrix."""
    return system.evaluate(dataset, theta, jacobian=False)[0].mean(axis=0)


def covariance_iid(system, dataset: Dataset, theta) -> np.ndarray:
    """Uncentered second-moment matrix ``(1/n) sum U_i U_i'``."""
    u = system.evaluate(dataset, theta, jacobian=False)[0]
    omega = _iid(u)
    _condition(omega)
    return omega


def covariance_hac(system, dataset: Dataset, theta, bandwidth: int | None = None) -> np.ndarray:
    """Newey-West covariance with Bartlett weights ``1 - l/(L+1)``."""
    u = system.evaluate(dataset, theta, jacobian=False)[0]
    if bandwidth is None:
        bandwidth = default_bandwidth(u.shape[0])
    omega = _hac(u, bandwidth)
    _condition(omega)
    return omega


def chi2_pvalue(stat: float, q: int) -> float:
    """Upper-tail probability of chi-squared with ``q`` degrees of freedom."""
    if stat < 0:
        raise ValueError("statistic must be nonnegative")
    if q < 1:
        raise ValueError("degrees of freedom must be >= 1")
    return float(special.gammaincc(q / 2.0, stat / 2.0))


# -- inner least-squares solver ------------------------------------------------

def numeric_jacobian(fn, x: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    """Central differences with step ``rel_step * (1 + |x_j|)``."""
    cols = []
    for j in range(x.shape[0]):
        h = rel_step * (1.0 + abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        cols.append((fn(xp) - fn(xm)) / (2.0 * h))
    return np.column_stack(cols)


def _levenberg_marquardt(fun, x0, max_iter=200, xtol=1e-10):
    """Minimize ``|r(x)|^2`` where ``fun(x, need_jac) -> (r, J)``.

    Plain Gauss-Newton steps while they reduce the cost, Marquardt damping
    otherwise.  Returns ``(x, cost, converged)``.
    """
    x = np.asarray(x0, dtype=float).copy()
    r, jac = fun(x, True)
    cost = float(r @ r)
    lam = 0.0
    for _ in range(max_iter):
        scale = np.sqrt(np.maximum(np.sum(jac * jac, axis=0), 1e-300))
        while True:
            if lam == 0.0:
                step = np.linalg.lstsq(jac, -r, rcond=None)[0]
            else:
                aug = np.vstack([jac, np.diag(np.sqrt(lam) * scale)])
                rhs = np.concatenate([-r, np.zeros(x.shape[0])])
                step = np.linalg.lstsq(aug, rhs, rcond=None)[0]
            if np.max(np.abs(step), initial=0.0) <= xtol * (1.0 + np.max(np.abs(x), initial=0.0)):
                return x, cost, True
            x_new = x + step
            try:
                with np.errstate(over="raise", invalid="raise"):
                    r_new, jac_new = fun(x_new, True)
                cost_new = float(r_new @ r_new)
            except (FloatingPointError, MomentError):
                cost_new = np.inf
            if cost_new <= cost:
                x, cost, r, jac = x_new, cost_new, r_new, jac_new
                lam = 0.0 if lam < 1e-6 else lam / 10.0
                break
            lam = 1e-4 if lam == 0.0 else lam * 10.0
            if lam > 1e12:
                return x, cost, False
    return x, cost, False


def _polish_nelder_mead(cost_fn, x):
    res = optimize.minimize(cost_fn, x, method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-16, "maxiter": 4000})
    return res.x


# -- problem wrappers ----------------------------------------------------------

class EffectSystem:
    """Moments of ``system`` evaluated at the shifted outcome ``Y - psi A``.

    Parameters are ``(psi, theta)`` with ``theta`` those of ``system``.
    """

    def __init__(self, system: MomentSystem):
        self.system = system
        self.n_params = system.n_params + 1
        self.n_moments = system.n_moments
        self.q = self.n_moments - self.n_params

    def param_labels(self):
        return ["psi"] + list(self.system.param_labels())

    def evaluate(self, dataset, theta, jacobian=True):
        theta = np.asarray(theta, dtype=float)
        psi, inner = theta[0], theta[1:]
        u, g = self.system.evaluate(structural_shift(dataset, psi), inner, jacobian)
        if jacobian:
            # moments are affine in the outcome, so a unit central difference is exact
            up = self.system.moments(structural_shift(dataset, psi + 1.0), inner)
            um = self.system.moments(structural_shift(dataset, psi - 1.0), inner)
            g = np.concatenate([((up - um).mean(axis=0) / 2.0)[:, None], g], axis=1)
        return u, g


class _FixedGamma:
    """Non-score blocks of an ror/dr system with gamma held fixed."""

    def __init__(self, system: MomentSystem, gamma: np.ndarray):
        self.system = system
        self.gamma = np.asarray(gamma, dtype=float)
        self.n_params = system.n_params - system.d_gamma
        self.n_moments = system.n_moments - system.n_score
        self.q = self.n_moments - self.n_params

    def full(self, alpha):
        return np.concatenate([np.asarray(alpha, dtype=float), self.gamma])

    def evaluate(self, dataset, theta, jacobian=True):
        u, g = self.system.evaluate(dataset, self.full(theta), jacobian)
        keep = self.n_moments
        return u[:, :keep], (g[:keep, :self.n_params] if jacobian else None)


def _covariance_fn(scheme: WeightingScheme):
    if scheme.covariance == "iid":
        return _iid
    return lambda u: _hac(u, default_bandwidth(u.shape[0]) if scheme.bandwidth is None
                          else scheme.bandwidth)


def _weighted_fun(system, dataset, linv):
    root_n = 1.0

    def fun(theta, need_jac):
        u, g = system.evaluate(dataset, theta, need_jac)
        r = linv @ (u.mean(axis=0) * root_n)
        return r, (linv @ g if need_jac else None)

    return fun


def _cue_fun(system, dataset, cov):
    def resid(theta):
        u = system.evaluate(dataset, theta, False)[0]
        _, linv = _condition(cov(u))
        return linv @ u.mean(axis=0)

    def fun(theta, need_jac):
        r = resid(theta)
        return r, (numeric_jacobian(resid, theta) if need_jac else None)

    return fun


# -- initial values ------------------------------------------------------------

def _glm(design, a, family, max_iter=50):
    """Newton-Raphson for logistic or Poisson regression."""
    beta = np.zeros(design.shape[1])
    if family == "poisson":
        beta = np.linalg.lstsq(design, np.log(a + 0.5), rcond=None)[0]
    for _ in range(max_iter):
        eta = np.clip(design @ beta, -30, 30)
        if family == "logit":
            mu = 1.0 / (1.0 + np.exp(-eta))
            w = mu * (1 - mu)
        else:
            mu = np.exp(eta)
            w = mu
        step = np.linalg.lstsq(design.T @ (w[:, None] * design), design.T @ (a - mu),
                               rcond=None)[0]
        beta = beta + step
        if np.max(np.abs(step)) < 1e-10:
            break
    return beta


def default_init(system, dataset: Dataset) -> np.ndarray:
    """Cheap starting values: exposure regression ignoring measurement error, score root."""
    if hasattr(system, "default_init"):
        return system.default_init(dataset)
    if isinstance(system, EffectSystem):
        return np.concatenate([[0.0], default_init(system.system, dataset)])
    if not isinstance(system, MomentSystem):
        return np.zeros(system.n_params)
    parts = []
    if system.p1 or system.p2:
        z2 = interaction_design(dataset.x, system.interaction_basis)
        base = system.exposure_basis if system.p1 else (
            system.outcome_basis if system.outcome_basis is not None else np.ones((dataset.n, 1)))
        design = np.concatenate([base, z2], axis=1)
        if system.kind == "rps_binary":
            coef = _glm(design, dataset.a, "logit")
        elif system.exposure_kind == "count":
            coef = _glm(design, dataset.a, "poisson")
        else:
            coef = np.linalg.lstsq(design, dataset.a, rcond=None)[0]
        if system.p1:
            parts.append(coef[:system.p1])
        parts.append(coef[base.shape[1]:])
    if system.d_gamma:
        parts.append(system.solve_score(dataset))
    return np.concatenate(parts) if parts else np.zeros(0)


# -- main entry point ----------------------------------------------------------

def _labels(system):
    labels = getattr(system, "param_labels", None)
    return list(labels()) if callable(labels) else []


def _finish(system, dataset, scheme, theta, omega, linv, j_stat, trace, iterations,
            converged, notes, labels=None):
    n = dataset.n
    q = system.n_moments - system.n_params
    g = system.evaluate(dataset, theta, True)[1]
    sv = np.linalg.svd(linv @ g, compute_uv=False) if g.size else np.zeros(0)
    rank = int(np.sum(sv > 1e-10 * max(sv.max(initial=0.0), 1e-300)))
    if rank < system.n_params:
        msg = f"moment Jacobian has rank {rank} < {system.n_params} at the optimum"
        warnings.warn(msg, IdentificationWarning, stacklevel=3)
        notes.append(msg)
    if not converged:
        notes.append("weight iteration did not converge")
    j_stat = max(float(j_stat), 0.0)
    p_value = chi2_pvalue(j_stat, q) if q >= 1 else 1.0
    return GmmFit(theta=theta, j_stat=j_stat, df=q, p_value=p_value, omega=omega,
                  n_iterations=iterations, converged=converged, objective_trace=trace,
                  jacobian_rank=rank, n=n, scheme=scheme.describe(),
                  param_labels=labels if labels is not None else _labels(system),
                  warnings=notes)


def gmm_minimize(system, dataset: Dataset, scheme: WeightingScheme | None = None,
                 init=None) -> GmmFit:
    """Fit ``system`` by GMM and return the J statistic with its p-value.

    The first step minimizes the unweighted quadratic form; the weight is then
    the inverse uncentered (or HAC) covariance of the moments at the current
    estimate.  ``two_step`` stops after one reweighting, ``iterated`` repeats
    until the estimate settles, ``cue`` minimizes with a parameter-dependent
    weight.  ``j_stat`` is ``n`` times the minimized quadratic form.
    """
    scheme = scheme or WeightingScheme()
    if isinstance(system, MomentSystem):
        system.check(dataset)
    if scheme.kind == "profiled":
        return _gmm_profiled(system, dataset, scheme, init)
    n = dataset.n
    cov = _covariance_fn(scheme)
    theta = default_init(system, dataset) if init is None else np.asarray(init, dtype=float)
    if theta.shape[0] != system.n_params:
        raise MomentError(f"init has length {theta.shape[0]}, expected {system.n_params}")
    notes: list[str] = []
    eye = np.eye(system.n_moments)
    theta, _, _ = _levenberg_marquardt(_weighted_fun(system, dataset, eye), theta)

    trace: list[float] = []
    converged = False
    iterations = 0
    theta_prev, j_prev = theta, None
    max_iter = 1 if scheme.kind == "two_step" else scheme.max_iter
    for iterations in range(1, max_iter + 1):
        u = system.evaluate(dataset, theta, False)[0]
        omega, linv = _condition(cov(u))
        fun = _weighted_fun(system, dataset, linv)
        theta, cost, ok = _levenberg_marquardt(fun, theta)
        if not ok:
            theta = _polish_nelder_mead(lambda t: float(np.sum(fun(t, False)[0] ** 2)), theta)
            theta, cost, ok = _levenberg_marquardt(fun, theta)
            if not ok:
                notes.append("inner minimization stalled")
        j_stat = n * cost
        trace.append(j_stat)
        if scheme.kind == "two_step":
            converged = True
            break
        step = np.max(np.abs(theta - theta_prev), initial=0.0)
        if step < scheme.tol * (1 + np.max(np.abs(theta_prev), initial=0.0)) or (
                j_prev is not None and abs(j_stat - j_prev) <= 1e-10 * max(j_stat, 1e-300)):
            converged = True
            break
        theta_prev, j_prev = theta, j_stat

    if scheme.kind == "cue":
        fun = _cue_fun(system, dataset, cov)
        theta, cost, ok = _levenberg_marquardt(fun, theta)
        if not ok:
            theta = _polish_nelder_mead(lambda t: float(np.sum(fun(t, False)[0] ** 2)), theta)
            theta, cost, ok = _levenberg_marquardt(fun, theta)
        converged = ok
        omega, linv = _condition(cov(system.evaluate(dataset, theta, False)[0]))
        j_stat = n * cost
        trace.append(j_stat)
    return _finish(system, dataset, scheme, theta, omega, linv, j_stat, trace, iterations,
                   converged, notes)


# -- profiled variance ---------------------------------------------------------

def _profiled_from(system: MomentSystem, u: np.ndarray, g: np.ndarray) -> np.ndarray:
    main = slice(0, system.n_moments - system.n_score)
    gs = g[system.score_columns, system.gamma_slice]
    gu = g[main, system.gamma_slice]
    corrected = u[:, main] - u[:, system.score_columns] @ np.linalg.solve(gs, gu.T)
    return corrected


def profiled_variance(system: MomentSystem, dataset: Dataset, theta, covariance=None,
                      tol: float = 1e-8) -> np.ndarray:
    """Covariance of the non-score blocks corrected for estimating gamma.

    ``(1/n) sum_i [U_i - (sum_j dU_j/dgamma)(sum_j dS_j/dgamma)^-1 S_i]^2``
    with ``gamma`` at the root of the outcome score.
    """
    if system.n_score == 0:
        raise MomentError(f"{system.kind} has no outcome score to profile")
    u, g = system.evaluate(dataset, theta, True)
    score = u[:, system.score_columns].mean(axis=0)
    if np.max(np.abs(score)) > tol:
        raise MomentError("gamma does not solve the outcome score equations")
    gs = g[system.score_columns, system.gamma_slice]
    if np.linalg.cond(gs) > MAX_CONDITION:
        raise SingularWeightError("score Jacobian is singular")
    corrected = _profiled_from(system, u, g)
    return (covariance or _iid)(corrected)


def _gmm_profiled(system, dataset, scheme, init):
    if not isinstance(system, MomentSystem) or system.n_score == 0:
        raise MomentError("profiled weighting needs a system with an outcome score")
    gamma = system.solve_score(dataset)
    sub = _FixedGamma(system, gamma)
    cov = _covariance_fn(scheme)
    start = default_init(system, dataset) if init is None else np.asarray(init, dtype=float)
    alpha = start[:sub.n_params]
    alpha, _, _ = _levenberg_marquardt(_weighted_fun(sub, dataset, np.eye(sub.n_moments)), alpha)
    n = dataset.n
    trace, notes = [], []
    converged, alpha_prev, iterations = False, alpha, 0
    for iterations in range(1, scheme.max_iter + 1):
        u, g = system.evaluate(dataset, sub.full(alpha), True)
        omega, linv = _condition(cov(_profiled_from(system, u, g)))
        alpha, cost, _ = _levenberg_marquardt(_weighted_fun(sub, dataset, linv), alpha)
        trace.append(n * cost)
        if np.max(np.abs(alpha - alpha_prev)) < scheme.tol * (1 + np.max(np.abs(alpha_prev))):
            converged = True
            break
        alpha_prev = alpha
    labels = _labels(system)[:sub.n_params]
    fit = _finish(sub, dataset, scheme, alpha, omega, linv, trace[-1], trace, iterations,
                  converged, notes, labels=labels)
    fit.theta = sub.full(alpha)
    fit.param_labels = _labels(system)
    return fit


# -- effect estimation ---------------------------------------------------------

class EffectEstimate(NamedTuple):
    psi_hat: float
    std_err: float
    fit: GmmFit
    grid: np.ndarray
    profile: np.ndarray


def sandwich_covariance(system, dataset: Dataset, theta, scheme=None) -> np.ndarray:
    """``(G' Omega^-1 G)^-1 / n`` at ``theta``."""
    scheme = scheme or WeightingScheme()
    u, g = system.evaluate(dataset, theta, True)
    _, linv = _condition(_covariance_fn(scheme)(u))
    a = linv @ g
    return np.linalg.inv(a.T @ a) / dataset.n


def _crude_effect(system, dataset):
    """OLS coefficient on A and its HC0 standard error, ignoring measurement error."""
    base = None
    for name in ("exposure_basis", "outcome_basis", "k"):
        base = getattr(system, name, None)
        if base is not None:
            break
    if base is None:
        base = np.ones((dataset.n, 1))
    design = np.concatenate([base, dataset.x, dataset.a[:, None]], axis=1)
    coef, se = ols_hc0(design, dataset.y)
    return coef[-1], se[-1]


def ols_hc0(design: np.ndarray, y: np.ndarray):
    """OLS coefficients with heteroskedasticity-robust (HC0) standard errors."""
    q, r = np.linalg.qr(design)
    if np.min(np.abs(np.diag(r))) <= 1e-12 * np.max(np.abs(np.diag(r))):
        raise np.linalg.LinAlgError("singular design")
    coef = linalg.solve_triangular(r, q.T @ y)
    resid = y - design @ coef
    rinv = linalg.solve_triangular(r, np.eye(r.shape[0]))
    bread = rinv @ rinv.T
    meat = (design * resid[:, None] ** 2).T @ design
    cov = bread @ meat @ bread
    return coef, np.sqrt(np.maximum(np.diag(cov), 0.0))


def _interior_minima(values: np.ndarray) -> list[int]:
    return [i for i in range(1, values.size - 1)
            if values[i] <= values[i - 1] and values[i] <= values[i + 1]]


def estimate_effect(system: MomentSystem, dataset: Dataset, scheme: WeightingScheme | None = None,
                    psi_grid=None, n_grid: int = 41, max_expand: int = 4,
                    level: float = 0.05) -> EffectEstimate:
    """Estimate the additive effect ``psi`` by profiling the test over ``Y - psi A``.

    For each grid value the inner system is refitted on the shifted outcome.
    The profile can have several near-zero minima (the moments are bilinear
    in ``psi`` and the exposure parameters), so the selected minimum is the
    one closest to the grid centre among interior local minima whose J lies
    within the ``1 - level`` chi-squared quantile of the smallest.  When the
    smallest value sits on an edge the grid is extended past that edge.
    Profile fits use two-step weighting since they only locate the basin;
    the selected point starts a joint fit over ``(psi, theta)`` under
    ``scheme``, whose sandwich covariance gives the standard error.
    """
    scheme = scheme or WeightingScheme()
    if psi_grid is None:
        _, se = _crude_effect(system, dataset)
        psi_grid = np.linspace(-10.0 * se, 10.0 * se, n_grid)
    grid = np.sort(np.asarray(psi_grid, dtype=float))
    if grid.size < 3:
        raise ValueError("psi grid needs at least three points")
    centre = 0.5 * (grid[0] + grid[-1])
    warm: dict = {"theta": None}

    locate = replace(scheme, kind="two_step") if scheme.kind != "profiled" else scheme

    def profile(psi):
        fit = gmm_minimize(system, structural_shift(dataset, psi), locate, init=warm["theta"])
        warm["theta"] = fit.theta
        return fit

    values = np.array([profile(psi).j_stat for psi in grid])
    for _ in range(max_expand + 1):
        best = int(np.argmin(values))
        if 0 < best < grid.size - 1:
            break
        step = grid[1] - grid[0] if best == 0 else grid[-1] - grid[-2]
        extra = step * np.arange(1, grid.size // 2 + 1)
        if best == 0:
            new = grid[0] - extra
            warm["theta"] = None
            new_values = np.array([profile(psi).j_stat for psi in new])
            grid = np.concatenate([new[::-1], grid])
            values = np.concatenate([new_values[::-1], values])
        else:
            new = grid[-1] + extra
            warm["theta"] = None
            new_values = np.array([profile(psi).j_stat for psi in new])
            grid = np.concatenate([grid, new])
            values = np.concatenate([values, new_values])
    else:
        raise UnidentifiedError("profile J has no interior minimum: unidentified at this resolution")

    q_inner = max(system.n_moments - system.n_params, 1)
    cutoff = values.min() + float(special.gammainccinv(q_inner / 2.0, level) * 2.0)
    candidates = [i for i in _interior_minima(values) if values[i] <= cutoff]
    best = min(candidates, key=lambda i: (abs(grid[i] - centre), values[i]))

    psi_star = float(grid[best])
    warm["theta"] = None
    inner = profile(psi_star)
    joint = EffectSystem(system)
    fit = gmm_minimize(joint, dataset, scheme, init=np.concatenate([[psi_star], inner.theta]))
    cov = sandwich_covariance(joint, dataset, fit.theta, scheme)
    return EffectEstimate(float(fit.theta[0]), float(np.sqrt(cov[0, 0])), fit, grid, values)
