"""Simulation designs, comparison tests and the Monte Carlo driver.

The continuous design draws

    Y0 ~ N(0, 1),  C = Y0 + N(0, 1),  X* = Y0 + C + Y0 C + N(0, 1),
    A = C + X* + N(0, 4),  X = X* + N(0, 9 (1/tau - 1)),  Y = Y0 + psi0 A,

so ``Var(X*) = 9`` and ``tau`` is the reliability ratio of X.  The exposure
model ``E(A|C, X*) = C + X*`` and outcome model ``E(Y0|C) = C/2`` are both
linear in ``[1, C]``; the misspecified regimes replace one of them by
``[1, C^2]``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats

from .basis import gram_schmidt_orthonormalize
from .dataset import Dataset
from .gmm import GmmError, WeightingScheme, gmm_minimize, ols_hc0
from .moments import MomentError, MomentSystem
from .optimal import ConditionalMomentSet

REGIMES = ("both_correct", "outcome_correct", "exposure_correct")
ROBUST_TESTS = ("rps", "ror", "dr")
BASELINE_TESTS = ("gest", "standard_or")
ALL_TESTS = ROBUST_TESTS + BASELINE_TESTS
VAR_X_STAR = 9.0
TRUE_ALPHA1 = (0.0, 1.0)
TRUE_ALPHA2 = 1.0
TRUE_GAMMA = (0.0, 0.5)


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    """One Monte Carlo cell.

    ``regime``: ``both_correct``; ``outcome_correct`` (exposure model
    misspecified); ``exposure_correct`` (outcome model misspecified).
    ``exposure_sd`` is the standard deviation of the exposure noise.
    """

    n: int = 2000
    tau: float = 1.0
    psi0: float = 0.0
    regime: str = "both_correct"
    n_reps: int = 1000
    seed: int = 20240101
    tests: tuple[str, ...] = ALL_TESTS
    alpha_level: float = 0.05
    weighting: str = "iterated"
    exposure_sd: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.n_reps < 1 or self.n < 10:
            raise ValueError("need n >= 10 and n_reps >= 1")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        bad = set(self.tests) - set(ALL_TESTS)
        if bad:
            raise ValueError(f"unknown tests {sorted(bad)}")
        if not 0.0 < self.alpha_level < 1.0:
            raise ValueError("alpha_level must lie in (0, 1)")
        object.__setattr__(self, "tests", tuple(self.tests))

    @property
    def error_variance(self) -> float:
        return VAR_X_STAR * (1.0 / self.tau - 1.0)


@dataclass(frozen=True)
class Latent:
    y0: np.ndarray
    x_star: np.ndarray
    error: np.ndarray


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    """Independent stream for one replicate, derived from the root seed by counter."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(replicate,)))


def generate_with_latent(config: SimConfig, replicate: int) -> tuple[Dataset, Latent]:
    rng = replicate_rng(config.seed, replicate)
    n = config.n
    # all draws happen in a fixed order so tau and psi0 only rescale them
    z = rng.standard_normal((5, n))
    y0 = z[0]
    c = y0 + z[1]
    x_star = y0 + c + y0 * c + z[2]
    a = c + x_star + config.exposure_sd * z[3]
    error = math.sqrt(config.error_variance) * z[4]
    x = x_star + error
    y = y0 + config.psi0 * a
    return Dataset(y, a, c, x), Latent(y0, x_star, error)


def generate(config: SimConfig, replicate: int) -> Dataset:
    """Dataset for one replicate."""
    return generate_with_latent(config, replicate)[0]


# -- regime wiring -------------------------------------------------------------

def regime_bases(c: np.ndarray, regime: str):
    """Exposure basis ``g_{A,1}`` and outcome basis ``g_Y`` for a regime."""
    one = np.ones_like(c)
    linear = np.column_stack([one, c])
    square = np.column_stack([one, c**2])
    exposure = square if regime == "outcome_correct" else linear
    outcome = square if regime == "exposure_correct" else linear
    return exposure, outcome


def cubic_instruments(c: np.ndarray) -> np.ndarray:
    """``[1, C, C^2, C^3]`` orthonormalized under the empirical inner product."""
    return gram_schmidt_orthonormalize(np.column_stack([c**0, c, c**2, c**3])).values


def build_system(test: str, dataset: Dataset, regime: str = "both_correct") -> MomentSystem:
    """Moment system for a robust test with the standard instrument choice.

    rps: ``l = Q``, ``m = 0``; ror: ``k = [1, C]``; dr: ``k = m = Q[:, :2]``,
    ``l = Q[:, 2:]``, where ``Q`` orthonormalizes ``[1, C, C^2, C^3]``.
    """
    c = dataset.c[:, 0]
    exposure, outcome = regime_bases(c, regime)
    labels = {"exposure_basis": ["1", "C^2" if regime == "outcome_correct" else "C"],
              "outcome_basis": ["1", "C^2" if regime == "exposure_correct" else "C"]}
    if test == "rps":
        return MomentSystem("rps", exposure_basis=exposure, ell=cubic_instruments(c),
                            labels=labels)
    if test == "ror":
        k = np.column_stack([np.ones_like(c), c])
        return MomentSystem("ror", k=k, outcome_basis=outcome, labels=labels)
    if test == "dr":
        q = cubic_instruments(c)
        return MomentSystem("dr", exposure_basis=exposure, outcome_basis=outcome,
                            k=q[:, :2], m=q[:, :2], ell=q[:, 2:4], labels=labels)
    raise ValueError(f"no moment system for test {test!r}")


def true_theta(test: str) -> np.ndarray:
    """Parameters at which the both-correct moments have mean zero."""
    parts = {"rps": (TRUE_ALPHA1, (TRUE_ALPHA2,)),
             "ror": ((TRUE_ALPHA2,), TRUE_GAMMA),
             "dr": (TRUE_ALPHA1, (TRUE_ALPHA2,), TRUE_GAMMA)}[test]
    return np.concatenate([np.asarray(p, dtype=float) for p in parts])


# -- comparison tests ----------------------------------------------------------

def _wald_pvalue(coef: float, se: float) -> float:
    if se == 0.0:
        return 1.0 if coef == 0.0 else 0.0
    return float(2.0 * stats.norm.sf(abs(coef / se)))


def comparison_standard_or(dataset: Dataset, outcome_basis=None) -> float:
    """Robust Wald p-value for A in the OLS regression of Y on (C-basis, X, A)."""
    if dataset.n <= 4:
        raise ValueError("need more than four rows")
    base = np.column_stack([np.ones(dataset.n), dataset.c]) if outcome_basis is None \
        else np.asarray(outcome_basis, dtype=float)
    coef, se = ols_hc0(np.column_stack([base, dataset.x, dataset.a]), dataset.y)
    return _wald_pvalue(coef[-1], se[-1])


def comparison_gest(dataset: Dataset, exposure_basis=None) -> float:
    """Robust Wald p-value for Y in the OLS regression of A on (C-basis, X, Y)."""
    if dataset.n <= 4:
        raise ValueError("need more than four rows")
    base = np.column_stack([np.ones(dataset.n), dataset.c]) if exposure_basis is None \
        else np.asarray(exposure_basis, dtype=float)
    coef, se = ols_hc0(np.column_stack([base, dataset.x, dataset.y]), dataset.a)
    return _wald_pvalue(coef[-1], se[-1])


def run_test(test: str, dataset: Dataset, regime: str = "both_correct",
             weighting: str = "iterated") -> float:
    """p-value of one test on one dataset."""
    exposure, outcome = regime_bases(dataset.c[:, 0], regime)
    if test == "standard_or":
        return comparison_standard_or(dataset, outcome)
    if test == "gest":
        return comparison_gest(dataset, exposure)
    system = build_system(test, dataset, regime)
    return gmm_minimize(system, dataset, WeightingScheme(weighting)).p_value


# -- Monte Carlo driver --------------------------------------------------------

@dataclass
class SimRow:
    regime: str
    tau: float
    test: str
    psi0: float
    n: int
    n_reps: int
    n_effective: int
    rejections: int
    rejection_rate: float
    monte_carlo_se: float


@dataclass
class SimReport:
    rows: list[SimRow] = field(default_factory=list)
    p_values: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    FIELDS = ("regime", "tau", "test", "psi0", "n", "n_reps", "n_effective", "rejections",
              "rejection_rate", "monte_carlo_se")

    def extend(self, other: SimReport) -> SimReport:
        self.rows += other.rows
        self.p_values.update(other.p_values)
        self.failures.update(other.failures)
        return self

    def rate(self, test: str, **where) -> float:
        rows = [r for r in self.rows if r.test == test and
                all(getattr(r, k) == v for k, v in where.items())]
        if len(rows) != 1:
            raise KeyError(f"{len(rows)} rows match {test} {where}")
        return rows[0].rejection_rate

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.FIELDS)
        for row in self.rows:
            values = asdict(row)
            writer.writerow([repr(v) if isinstance(v, float) else v
                             for v in (values[k] for k in self.FIELDS)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": [asdict(r) for r in self.rows]}, indent=2, sort_keys=True)


def _cell_key(config: SimConfig, test: str) -> tuple:
    return (config.regime, config.tau, test, config.psi0)


def _replicate(config: SimConfig, replicate: int) -> dict:
    dataset = generate(config, replicate)
    out = {}
    for test in config.tests:
        try:
            out[test] = run_test(test, dataset, config.regime, config.weighting)
        except (GmmError, MomentError, np.linalg.LinAlgError, FloatingPointError) as err:
            out[test] = f"{type(err).__name__}: {err}"
    return out


def _replicate_chunk(args) -> list[dict]:
    config, indices = args
    return [_replicate(config, i) for i in indices]


def _run_replicates(config: SimConfig, threads: int) -> list[dict]:
    indices = list(range(config.n_reps))
    if threads <= 1 or config.n_reps == 1:
        return [_replicate(config, i) for i in indices]
    size = max(1, math.ceil(len(indices) / (4 * threads)))
    chunks = [(config, indices[i:i + size]) for i in range(0, len(indices), size)]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return [res for chunk in pool.map(_replicate_chunk, chunks) for res in chunk]


def run_monte_carlo(config: SimConfig, threads: int = 1, max_failure_rate: float = 0.01) -> SimReport:
    """Run every configured test on ``n_reps`` datasets drawn from ``config``.

    Replicate ``i`` always uses the stream ``(seed, i)``, so the report does
    not depend on ``threads``.  Failed fits are excluded from
    ``n_effective``; more than ``max_failure_rate`` failures aborts.
    """
    results = _run_replicates(config, threads)
    report = SimReport()
    for test in config.tests:
        values = [r[test] for r in results]
        failed = [(i, v) for i, v in enumerate(values) if isinstance(v, str)]
        if len(failed) > max_failure_rate * config.n_reps:
            raise SimulationError(f"{test}: {len(failed)} of {config.n_reps} replicates failed; "
                                  f"first: {failed[0][1]}")
        p = np.array([v for v in values if not isinstance(v, str)], dtype=float)
        rejections = int(np.sum(p < config.alpha_level))
        rate = rejections / p.size if p.size else float("nan")
        se = math.sqrt(rate * (1 - rate) / p.size) if p.size else float("nan")
        report.rows.append(SimRow(config.regime, config.tau, test, config.psi0, config.n,
                                  config.n_reps, int(p.size), rejections, rate, se))
        report.p_values[_cell_key(config, test)] = p
        report.failures[_cell_key(config, test)] = failed
    return report


def run_grid(base: SimConfig, taus=None, regimes=None, psis=None, threads: int = 1) -> SimReport:
    """Monte Carlo over the product of ``taus``, ``regimes`` and ``psis``."""
    report = SimReport()
    for regime in regimes or (base.regime,):
        for tau in taus or (base.tau,):
            for psi in psis or (base.psi0,):
                cell = replace(base, tau=float(tau), regime=regime, psi0=float(psi))
                report.extend(run_monte_carlo(cell, threads))
    return report


def power_curve(config: SimConfig, psi_grid, threads: int = 1) -> SimReport:
    """Rejection rates under the alternative for each effect size in ``psi_grid``."""
    return run_grid(config, psis=list(psi_grid), threads=threads)


# -- analytic quantities of the design -----------------------------------------

def analytic_conditional_moments(c: np.ndarray, tau: float, exposure_var: float = 4.0,
                                 n_x: int = 1) -> ConditionalMomentSet:
    """Exact ``E(.|C)`` at the true parameters for the continuous design.

    At the truth ``Delta = exposure noise - measurement error`` is independent
    of ``(C, Y0, X*)`` with variance ``s2``, ``H = Y0`` and
    ``Y0 | C ~ N(C/2, 1/2)``.
    """
    c = np.asarray(c, dtype=float).ravel()
    s2 = exposure_var + VAR_X_STAR * (1.0 / tau - 1.0)
    e_h = c / 2.0
    e_h2 = c**2 / 4.0 + 0.5
    e_x = 1.5 * c + c**2 / 2.0
    e_hx = e_h2 * (1.0 + c) + c**2 / 2.0
    return ConditionalMomentSet(
        e_d2=np.full_like(c, s2), e_d2h=s2 * e_h, e_d2h2=s2 * e_h2,
        e_da=np.full_like(c, exposure_var), e_h=e_h,
        e_x=np.tile(e_x[:, None], (1, n_x)), e_hx=np.tile(e_hx[:, None], (1, n_x)),
        source="analytic")


def intercept_shift(kind: str, alpha0: float, alpha2: float, error_var: float) -> float:
    """Intercept at which the discrete-exposure moments are unbiased.

    With Gaussian measurement error of variance ``s`` and
    ``K = s alpha2^2 / 2`` (the log moment generating function of the error
    at ``alpha2``), the logistic and the doubly robust count moments need
    ``alpha0 + K`` while the propensity-score count moments need
    ``alpha0 - K``.
    """
    k = error_var * alpha2**2 / 2.0
    if kind in ("rps_binary", "dr_count"):
        return alpha0 + k
    if kind == "rps_count":
        return alpha0 - k
    if kind == "ror_count":
        return alpha0
    raise ValueError(f"no intercept shift for {kind!r}")


@dataclass(frozen=True)
class DiscreteDesign:
    """Binary or count exposure with a Gaussian-error covariate.

    ``Y0 ~ N(0,1)``, ``C = Y0 + N(0,1)``, ``X* = Y0 + C + N(0,1)``,
    ``X = X* + N(0, error_var)`` and ``A`` Bernoulli(expit) or Poisson(exp)
    of ``alpha0 + alpha1 C + alpha2 X*``; ``Y = Y0``.
    """

    exposure: str = "count"
    alpha0: float = 0.0
    alpha1: float = 0.2
    alpha2: float = 0.3
    error_var: float = 1.0

    def draw(self, n: int, rng: np.random.Generator) -> Dataset:
        y0 = rng.standard_normal(n)
        c = y0 + rng.standard_normal(n)
        x_star = y0 + c + rng.standard_normal(n)
        x = x_star + math.sqrt(self.error_var) * rng.standard_normal(n)
        eta = self.alpha0 + self.alpha1 * c + self.alpha2 * x_star
        if self.exposure == "binary":
            a = (rng.random(n) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
        elif self.exposure == "count":
            a = rng.poisson(np.exp(eta)).astype(float)
        else:
            raise ValueError(f"unknown exposure {self.exposure!r}")
        return Dataset(y0, a, c, x, exposure_kind=self.exposure)

    def pseudo_true(self, kind: str) -> np.ndarray:
        """Parameter vector at which ``kind`` has mean-zero moments (``g_Y = [1, C]``)."""
        gamma = [0.0, 0.5]
        alpha1 = [intercept_shift(kind, self.alpha0, self.alpha2, self.error_var), self.alpha1]
        if kind in ("rps_binary", "rps_count"):
            return np.array(alpha1 + [self.alpha2])
        if kind == "ror_count":
            return np.array([self.alpha2] + gamma)
        if kind == "dr_count":
            return np.array(alpha1 + [self.alpha2] + gamma)
        raise ValueError(f"no discrete pseudo-truth for {kind!r}")
