"""Per-observation moment functions for the measurement-error-robust tests.

Every moment system is a stack of blocks, each a residual multiplied by
instrument functions of the error-free covariates C:

========== ====================================================== ==============
kind       blocks (in column order)                               parameters
========== ====================================================== ==============
rps        (l Y + m) * dA                                         a1, a2
ror        k * dY * (A - X'g2)  ;  S(g)                           a2, g
dr         k * dY * dA  ;  (l Y + m) * dA  ;  S(g)                a1, a2, g
rps_binary (l Y + m) * exp(-a2'X A) * (A - expit(g1))             a1, a2
rps_count  (l Y + m) * (A - exp(g1 + a2'X))                       a1, a2
ror_count  k * dY * A exp(-a2'X)  ;  S(g)                         a2, g
dr_count   as dr, with dA = A exp(-a2'X) - exp(g1)                a1, a2, g
========== ====================================================== ==============

Here ``dA`` is the exposure residual, ``dY`` the outcome residual, ``g1`` the
exposure-model function of C, ``g2`` the C-dependent coefficient on X, and
``S(g) = b(C) dY`` the score for the outcome model.  Each system is
overidentified by ``q = n_moments - n_params >= 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import BasisSpec, evaluate_bases
from .dataset import Dataset

MOMENT_KINDS = ("rps", "ror", "dr", "rps_binary", "rps_count", "ror_count", "dr_count",
                "or_gof")
_HAS_ALPHA1 = {"rps", "dr", "rps_binary", "rps_count", "dr_count"}
_HAS_GAMMA = {"ror", "dr", "ror_count", "dr_count", "or_gof"}
_HAS_ALPHA2 = set(MOMENT_KINDS) - {"or_gof"}
_HAS_SCORE = _HAS_GAMMA - {"or_gof"}
_USES_LM = {"rps", "dr", "rps_binary", "rps_count", "dr_count"}
_USES_K = {"ror", "dr", "ror_count", "dr_count", "or_gof"}
_COUNT = {"rps_count", "ror_count", "dr_count"}
_EXP_LIMIT = 700.0


class MomentError(ValueError):
    """Ill-posed moment system (dimensions, rank, unsupported combination)."""


class MomentOverflowError(MomentError, FloatingPointError):
    def __init__(self, row: int, what: str):
        self.row = row
        super().__init__(f"exp overflow in {what} at row {row}")


@dataclass
class ParamVector:
    """Structured view of a flat parameter vector.

    ``alpha2`` has shape ``(p2, d_X)``: column ``j`` holds the coefficients of
    the C-basis multiplying error-prone covariate ``j``.
    """

    alpha1: np.ndarray | None = None
    alpha2: np.ndarray | None = None
    gamma: np.ndarray | None = None
    psi: float | None = None

    def as_array(self) -> np.ndarray:
        parts = []
        if self.psi is not None:
            parts.append(np.atleast_1d(float(self.psi)))
        for part in (self.alpha1, self.alpha2, self.gamma):
            if part is not None:
                parts.append(np.asarray(part, dtype=float).ravel(order="F"))
        return np.concatenate(parts) if parts else np.zeros(0)


def _check_exp(eta: np.ndarray, what: str) -> None:
    bad = np.flatnonzero(~(eta < _EXP_LIMIT))
    if bad.size:
        raise MomentOverflowError(int(bad[0]), what)


def _expit(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def interaction_design(x: np.ndarray, interaction_basis: np.ndarray) -> np.ndarray:
    """Columns ``X_j * b2(C)`` ordered by X column, then basis column."""
    if x.shape[1] == 0:
        return np.zeros((x.shape[0], 0))
    return np.concatenate([x[:, [j]] * interaction_basis for j in range(x.shape[1])], axis=1)


def residual_exposure(dataset: Dataset, alpha1, alpha2, exposure_basis=None,
                      interaction_basis=None, kind: str = "linear") -> np.ndarray:
    """Exposure residual ``dA`` for every row.

    ``kind="linear"``: ``A - g1(C) - X'g2(C)``.
    ``kind="count"``:  ``A exp(-X'g2(C)) - exp(g1(C))``.
    Bases default to a single constant column; ``alpha1=None`` drops ``g1``
    (as in the robust outcome-regression moments).
    """
    n = dataset.n
    b2 = np.ones((n, 1)) if interaction_basis is None else np.asarray(interaction_basis)
    z2 = interaction_design(dataset.x, b2)
    s = z2 @ np.asarray(alpha2, dtype=float).ravel(order="F") if z2.shape[1] else np.zeros(n)
    if alpha1 is None:
        g1 = np.zeros(n)
    else:
        b1 = np.ones((n, 1)) if exposure_basis is None else np.asarray(exposure_basis)
        g1 = b1 @ np.asarray(alpha1, dtype=float).ravel()
    if kind == "linear":
        return dataset.a - g1 - s
    if kind == "count":
        _check_exp(-s, "exp(-alpha2'X)")
        out = dataset.a * np.exp(-s)
        if alpha1 is not None:
            _check_exp(g1, "exp(g_A1)")
            out = out - np.exp(g1)
        return out
    raise MomentError(f"unknown exposure residual kind {kind!r}")


def residual_outcome(dataset: Dataset, gamma, outcome_basis, link: str = "identity") -> np.ndarray:
    """Outcome residual ``Y - h(b(C)'gamma)`` with ``h`` the inverse link."""
    eta = np.asarray(outcome_basis) @ np.asarray(gamma, dtype=float).ravel()
    if link == "identity":
        return dataset.y - eta
    if link == "log":
        _check_exp(eta, "exp(g_Y)")
        return dataset.y - np.exp(eta)
    raise MomentError(f"unknown outcome link {link!r}")


def structural_shift(dataset: Dataset, psi: float) -> Dataset:
    """Replace the outcome with ``H(psi) = Y - psi * A``."""
    psi = float(psi)
    if not np.isfinite(psi):
        raise MomentError("psi must be finite")
    if psi == 0.0:
        return dataset
    return dataset.with_outcome(dataset.y - psi * dataset.a)


def default_score_S(gamma_basis, score_basis=None) -> np.ndarray:
    """Instrument matrix ``b(C)`` for the outcome score ``S = b(C) dY``.

    Defaults to the outcome-model basis itself (the least-squares normal
    equations under the identity link); the score must exactly identify gamma.
    """
    gamma_basis = np.asarray(getattr(gamma_basis, "values", gamma_basis), dtype=float)
    if score_basis is None:
        return gamma_basis
    score_basis = np.asarray(getattr(score_basis, "values", score_basis), dtype=float)
    if score_basis.shape[1] != gamma_basis.shape[1]:
        raise MomentError(
            f"score has dimension {score_basis.shape[1]} but gamma has {gamma_basis.shape[1]}")
    return score_basis


def _values(m):
    if m is None:
        return None
    return np.asarray(getattr(m, "values", m), dtype=float)


def _labels(m, prefix, width):
    labels = getattr(m, "column_labels", None)
    return list(labels) if labels else [f"{prefix}{j}" for j in range(width)]


@dataclass
class MomentSystem:
    """A moment system bound to the rows of one dataset.

    Basis and instrument arrays are evaluated on C once and stored; the
    outcome, exposure and X columns are read from the dataset passed to
    ``moments``, so a structurally shifted copy of the dataset can be used
    with the same system.

    Parameters
    ----------
    kind : str
        One of ``MOMENT_KINDS``.
    exposure_basis : (n, p1) array, optional
        Design for ``g_{A,1}``; required for kinds with ``alpha1``.
    interaction_basis : (n, p2) array, optional
        Design for ``g_{A,2}``; defaults to a constant (no X-C interaction).
    ell, m : (n, r) arrays, optional
        Instruments for ``(l Y + m) dA``; ``None`` means zero.
    k : (n, r_k) array, optional
        Instruments for the outcome-residual block.
    outcome_basis : (n, d_gamma) array, optional
        Design for ``g_Y``.
    score_basis : (n, d_gamma) array, optional
        Instruments of the outcome score; defaults to ``outcome_basis``.
    outcome_link : {"identity", "log"}
    """

    kind: str
    exposure_basis: np.ndarray | None = None
    interaction_basis: np.ndarray | None = None
    ell: np.ndarray | None = None
    m: np.ndarray | None = None
    k: np.ndarray | None = None
    outcome_basis: np.ndarray | None = None
    score_basis: np.ndarray | None = None
    outcome_link: str = "identity"
    n_x: int = 1
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MOMENT_KINDS:
            raise MomentError(f"unknown moment kind {self.kind!r}")
        for name in ("exposure_basis", "interaction_basis", "ell", "m", "k",
                     "outcome_basis", "score_basis"):
            value = getattr(self, name)
            if value is not None:
                self.labels.setdefault(name, _labels(value, name + ":", _values(value).shape[1]))
                setattr(self, name, _values(value))
        rows = {getattr(self, name).shape[0] for name in
                ("exposure_basis", "interaction_basis", "ell", "m", "k", "outcome_basis",
                 "score_basis") if getattr(self, name) is not None}
        if len(rows) != 1:
            raise MomentError("all bases and instruments must have the same row count")
        self.n = rows.pop()
        if self.interaction_basis is None and self.kind in _HAS_ALPHA2:
            self.interaction_basis = np.ones((self.n, 1))
            self.labels["interaction_basis"] = ["1"]
        if self.kind in _HAS_ALPHA1 and self.exposure_basis is None:
            raise MomentError(f"{self.kind} needs an exposure basis")
        if self.kind in _HAS_GAMMA:
            if self.outcome_basis is None:
                raise MomentError(f"{self.kind} needs an outcome basis")
            self.score_basis = default_score_S(self.outcome_basis, self.score_basis)
        if self.kind in _USES_LM:
            if self.ell is None and self.m is None:
                raise MomentError(f"{self.kind} needs instruments l and/or m")
            width = (self.ell if self.ell is not None else self.m).shape[1]
            if self.ell is None:
                self.ell = np.zeros((self.n, width))
            if self.m is None:
                self.m = np.zeros((self.n, width))
            if self.ell.shape[1] != self.m.shape[1]:
                raise MomentError("l and m must have the same dimension")
        if self.kind in _USES_K and self.k is None:
            raise MomentError(f"{self.kind} needs instrument k")
        if self.kind in {"rps_binary", "rps_count", "ror_count", "dr_count"}:
            b2 = self.interaction_basis
            if b2.shape[1] != 1 or not np.allclose(b2, b2[0, 0]):
                raise MomentError("binary/count exposure models assume no X-C interaction")
        if self.outcome_link not in ("identity", "log"):
            raise MomentError(f"unknown outcome link {self.outcome_link!r}")
        self._check_dimensions()

    # -- bookkeeping -----------------------------------------------------
    @property
    def p1(self) -> int:
        return self.exposure_basis.shape[1] if self.kind in _HAS_ALPHA1 else 0

    @property
    def p2(self) -> int:
        return self.interaction_basis.shape[1] * self.n_x if self.kind in _HAS_ALPHA2 else 0

    @property
    def d_gamma(self) -> int:
        return self.outcome_basis.shape[1] if self.kind in _HAS_GAMMA else 0

    @property
    def n_params(self) -> int:
        return self.p1 + self.p2 + self.d_gamma

    @property
    def n_moments(self) -> int:
        total = 0
        if self.kind in _USES_K:
            total += self.k.shape[1]
        if self.kind in _USES_LM:
            total += self.ell.shape[1]
        return total + (self.d_gamma if self.kind in _HAS_SCORE else 0)

    @property
    def n_score(self) -> int:
        return self.d_gamma if self.kind in _HAS_SCORE else 0

    @property
    def q(self) -> int:
        return self.n_moments - self.n_params

    @property
    def gamma_slice(self) -> slice:
        return slice(self.p1 + self.p2, self.n_params)

    @property
    def score_columns(self) -> slice:
        return slice(self.n_moments - self.n_score, self.n_moments)

    @property
    def exposure_kind(self) -> str:
        if self.kind == "rps_binary":
            return "binary"
        return "count" if self.kind in _COUNT else "continuous"

    def _check_dimensions(self):
        if self.kind in ("rps", "rps_binary", "rps_count") and self.ell.shape[1] < self.p1 + self.p2:
            raise MomentError(f"dim(l) = dim(m) must be p + q >= {self.p1 + self.p2}")
        if self.kind in ("ror", "ror_count") and self.k.shape[1] < self.p2:
            raise MomentError(f"dim(k) must be p2 + q >= {self.p2}")
        if self.kind in ("dr", "dr_count"):
            if self.ell.shape[1] != self.p1:
                raise MomentError(f"dim(l) = dim(m) must equal p1 = {self.p1}")
            if self.k.shape[1] < self.p2:
                raise MomentError(f"dim(k) must be p2 + q >= {self.p2}")
        if self.kind == "or_gof" and self.k.shape[1] < self.d_gamma:
            raise MomentError("or_gof needs dim(k) >= dim(gamma)")

    def param_labels(self) -> list[str]:
        out = [f"alpha1[{lab}]" for lab in self.labels.get("exposure_basis", [])][: self.p1]
        b2 = self.labels.get("interaction_basis", ["1"])
        out += [f"alpha2[x{j + 1}:{lab}]" for j in range(self.n_x) for lab in b2][: self.p2]
        out += [f"gamma[{lab}]" for lab in self.labels.get("outcome_basis", [])][: self.d_gamma]
        return out

    def unpack(self, theta) -> ParamVector:
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.shape[0] != self.n_params:
            raise MomentError(f"theta has length {theta.shape[0]}, expected {self.n_params}")
        p1, p2 = self.p1, self.p2
        alpha1 = theta[:p1] if self.kind in _HAS_ALPHA1 else None
        alpha2 = None
        if self.kind in _HAS_ALPHA2:
            alpha2 = theta[p1:p1 + p2].reshape(self.interaction_basis.shape[1], self.n_x,
                                                order="F")
        gamma = theta[self.gamma_slice] if self.kind in _HAS_GAMMA else None
        return ParamVector(alpha1, alpha2, gamma)

    def check(self, dataset: Dataset) -> None:
        """Dataset-dependent preconditions: rows, exposure kind, instrument rank."""
        if dataset.n != self.n:
            raise MomentError(f"system built for {self.n} rows, dataset has {dataset.n}")
        if self.kind in _HAS_ALPHA2 and dataset.x.shape[1] != self.n_x:
            raise MomentError(f"system expects {self.n_x} error-prone columns")
        if dataset.exposure_kind == "binary" and self.kind not in ("rps", "rps_binary"):
            raise MomentError("no OR/DR extension for binary exposure")
        if self.kind == "rps_binary" and dataset.exposure_kind != "binary":
            raise MomentError("rps_binary needs a binary exposure")
        if self.kind in _COUNT and np.any(dataset.a < 0):
            raise MomentError("count moment systems need a nonnegative exposure")
        if self.q < 1:
            raise MomentError("test requires overidentification q >= 1")
        blocks = []
        if self.kind in _USES_LM:
            blocks.append(("l*Y + m", self.ell * dataset.y[:, None] + self.m))
        if self.kind in _USES_K:
            blocks.append(("k", self.k))
        for name, block in blocks:
            rank = np.linalg.matrix_rank(block / np.sqrt(dataset.n), tol=None)
            if rank < block.shape[1]:
                raise MomentError(f"elements of {name} are not linearly independent "
                                  f"(rank {rank} < {block.shape[1]})")

    # -- evaluation ------------------------------------------------------
    def moments(self, dataset: Dataset, theta) -> np.ndarray:
        return self.evaluate(dataset, theta, jacobian=False)[0]

    def jacobian(self, dataset: Dataset, theta) -> np.ndarray:
        """Mean Jacobian ``(1/n) sum_i dU_i/dtheta`` of shape (n_moments, n_params)."""
        return self.evaluate(dataset, theta, jacobian=True)[1]

    def evaluate(self, dataset: Dataset, theta, jacobian: bool = True):
        """Return ``(U, G)``: per-row moments and their mean Jacobian."""
        par = self.unpack(theta)
        n = dataset.n
        y, a, kind = dataset.y, dataset.a, self.kind
        blocks, grads = [], []

        z2 = s = None
        if kind in _HAS_ALPHA2:
            z2 = interaction_design(dataset.x, self.interaction_basis)
            s = z2 @ par.alpha2.ravel(order="F")
        zero_a1 = np.zeros((n, self.p1))
        zero_a2 = np.zeros((n, self.p2))

        # exposure residual and its row-wise gradient w.r.t. (alpha1, alpha2)
        d_a = dd_a = None
        if kind in ("rps", "dr"):
            d_a = a - self.exposure_basis @ par.alpha1 - s
            dd_a = np.concatenate([-self.exposure_basis, -z2], axis=1)
        elif kind == "dr_count":
            g1 = self.exposure_basis @ par.alpha1
            _check_exp(g1, "exp(g_A1)")
            _check_exp(-s, "exp(-alpha2'X)")
            w, mu = a * np.exp(-s), np.exp(g1)
            d_a = w - mu
            dd_a = np.concatenate([-mu[:, None] * self.exposure_basis, -w[:, None] * z2], axis=1)
        elif kind == "rps_count":
            eta = self.exposure_basis @ par.alpha1 + s
            _check_exp(eta, "exp(g_A1 + alpha2'X)")
            mu = np.exp(eta)
            d_a = a - mu
            dd_a = -mu[:, None] * np.concatenate([self.exposure_basis, z2], axis=1)
        elif kind == "rps_binary":
            _check_exp(-s * a, "exp(-alpha2'X A)")
            w = np.exp(-s * a)
            p = _expit(self.exposure_basis @ par.alpha1)
            e = a - p
            d_a = w * e
            dd_a = np.concatenate([-(w * p * (1 - p))[:, None] * self.exposure_basis,
                                   -(a * w * e)[:, None] * z2], axis=1)

        d_y = dd_y = None
        if kind in _HAS_GAMMA:
            eta = self.outcome_basis @ par.gamma
            if self.outcome_link == "log":
                _check_exp(eta, "exp(g_Y)")
                mu_y = np.exp(eta)
                dd_y = -mu_y[:, None] * self.outcome_basis
            else:
                mu_y = eta
                dd_y = -self.outcome_basis
            d_y = y - mu_y

        # outcome-residual block
        if kind in ("ror", "ror_count"):
            if kind == "ror":
                r = a - s
                dr_a2 = -z2
            else:
                _check_exp(-s, "exp(-alpha2'X)")
                r = a * np.exp(-s)
                dr_a2 = -r[:, None] * z2
            blocks.append(self.k * (d_y * r)[:, None])
            if jacobian:
                grads.append(np.concatenate(
                    [self.k.T @ (d_y[:, None] * dr_a2), self.k.T @ (r[:, None] * dd_y)],
                    axis=1) / n)
        elif kind in ("dr", "dr_count"):
            blocks.append(self.k * (d_y * d_a)[:, None])
            if jacobian:
                grads.append(np.concatenate(
                    [self.k.T @ (d_y[:, None] * dd_a), self.k.T @ (d_a[:, None] * dd_y)],
                    axis=1) / n)
        elif kind == "or_gof":
            blocks.append(self.k * d_y[:, None])
            if jacobian:
                grads.append(self.k.T @ dd_y / n)

        # propensity block
        if kind in _USES_LM:
            inst = self.ell * y[:, None] + self.m
            blocks.append(inst * d_a[:, None])
            if jacobian:
                g = inst.T @ dd_a / n
                if kind in _HAS_GAMMA:
                    g = np.concatenate([g, np.zeros((g.shape[0], self.d_gamma))], axis=1)
                grads.append(g)

        # outcome score
        if kind in _HAS_SCORE:
            blocks.append(self.score_basis * d_y[:, None])
            if jacobian:
                gs = self.score_basis.T @ dd_y / n
                grads.append(np.concatenate(
                    [np.zeros((gs.shape[0], self.p1 + self.p2)), gs], axis=1))

        u = np.concatenate(blocks, axis=1)
        return u, (np.concatenate(grads, axis=0) if jacobian else None)

    def solve_score(self, dataset: Dataset, tol: float = 1e-12, max_iter: int = 100) -> np.ndarray:
        """Root of ``P_n S(gamma) = 0``."""
        b, bs, y = self.outcome_basis, self.score_basis, dataset.y
        if self.outcome_link == "identity":
            return np.linalg.solve(bs.T @ b, bs.T @ y)
        gamma = np.zeros(b.shape[1])
        gamma[0] = np.log(max(np.mean(y), 1e-8)) if np.allclose(b[:, 0], 1) else 0.0
        for _ in range(max_iter):
            eta = b @ gamma
            _check_exp(eta, "exp(g_Y)")
            mu = np.exp(eta)
            step = np.linalg.solve(bs.T @ (mu[:, None] * b), bs.T @ (y - mu))
            gamma = gamma + step
            if np.max(np.abs(step)) < tol * (1 + np.max(np.abs(gamma))):
                break
        return gamma


def build_moments(system: MomentSystem, dataset: Dataset, theta) -> np.ndarray:
    """Per-row moment matrix ``U`` (n x n_moments)."""
    return system.moments(dataset, theta)


def make_system(kind: str, dataset: Dataset, *, exposure=None, interaction=None, outcome=None,
                ell=None, m=None, k=None, score=None, outcome_link="identity",
                check=True) -> MomentSystem:
    """Build a ``MomentSystem`` from basis specs or arrays evaluated on ``dataset``."""

    def ev(spec):
        if spec is None:
            return None
        if isinstance(spec, (BasisSpec, list, tuple)):
            return evaluate_bases(spec, dataset)
        return spec

    system = MomentSystem(
        kind=kind, exposure_basis=ev(exposure), interaction_basis=ev(interaction),
        ell=ev(ell), m=ev(m), k=ev(k), outcome_basis=ev(outcome), score_basis=ev(score),
        outcome_link=outcome_link, n_x=dataset.x.shape[1],
    )
    if check:
        system.check(dataset)
    return system


def with_instruments(system: MomentSystem, **arrays) -> MomentSystem:
    """Copy of ``system`` with some bases or instruments replaced."""
    names = ("kind", "exposure_basis", "interaction_basis", "ell", "m", "k", "outcome_basis",
             "score_basis", "outcome_link", "n_x")
    fields = {name: getattr(system, name) for name in names}
    if "outcome_basis" in arrays and "score_basis" not in arrays and (
            system.score_basis is system.outcome_basis):
        fields["score_basis"] = None
    fields.update(arrays)
    fields["labels"] = {key: val for key, val in system.labels.items() if key not in arrays}
    return MomentSystem(**fields)


__all__ = [
    "MOMENT_KINDS", "MomentError", "MomentOverflowError", "MomentSystem", "ParamVector",
    "build_moments", "default_score_S", "interaction_design", "make_system",
    "residual_exposure", "residual_outcome", "structural_shift", "with_instruments",
]
