"""Efficiency-optimal instruments for the robust propensity-score moments.

For the moments ``(l(C) H + m(C)) Delta`` with ``H = Y - psi A`` and
parameters ``(psi, alpha1, alpha2)``, the optimal pair solves, row by row
and for each parameter block ``k``,

    [E(D2 H^2|C)  E(D2 H|C)] [l_k]   [E(V_k|C)]
    [E(D2 H|C)    E(D2|C)  ] [m_k] = [E(W_k|C)]

with ``D2 = Delta^2``, ``V = (A Delta, H b1, H X b2)`` and
``W = (0, b1, X b2)``.  The conditional expectations are either supplied
analytically or estimated by least-squares projection on a basis of C.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import BasisSpec, evaluate_bases
from .dataset import Dataset
from .moments import MomentError, MomentSystem, interaction_design, residual_exposure

FLOOR_FACTOR = 1e-10


class DegenerateMomentsError(MomentError):
    """The 2x2 conditional system is singular for some rows."""


@dataclass
class ConditionalMomentSet:
    """Row-wise conditional expectations given C.

    e_d2, e_d2h, e_d2h2, e_da, e_h : (n,) arrays
        ``E(D2|C)``, ``E(D2 H|C)``, ``E(D2 H^2|C)``, ``E(Delta A|C)``, ``E(H|C)``.
    e_x, e_hx : (n, d_X) arrays
        ``E(X|C)`` and ``E(H X|C)``.
    source : ``analytic`` or ``regression``.
    n_floored : rows where a variance-like fit was raised to the floor.
    """

    e_d2: np.ndarray
    e_d2h: np.ndarray
    e_d2h2: np.ndarray
    e_da: np.ndarray
    e_h: np.ndarray
    e_x: np.ndarray
    e_hx: np.ndarray
    source: str = "analytic"
    n_floored: int = 0
    coefficients: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("e_d2", "e_d2h", "e_d2h2", "e_da", "e_h"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        n = self.e_d2.shape[0]
        for name in ("e_x", "e_hx"):
            val = np.asarray(getattr(self, name), dtype=float)
            setattr(self, name, val.reshape(n, -1))
        if any(getattr(self, name).shape[0] != n for name in
               ("e_d2h", "e_d2h2", "e_da", "e_h", "e_x", "e_hx")):
            raise ValueError("conditional moments must share the row count")
        if self.source not in ("analytic", "regression"):
            raise ValueError(f"unknown source {self.source!r}")

    @property
    def n(self) -> int:
        return self.e_d2.shape[0]

    def determinant(self) -> np.ndarray:
        """``d(C) = E(D2 H^2|C) E(D2|C) - E(D2 H|C)^2``."""
        return self.e_d2h2 * self.e_d2 - self.e_d2h**2

    def floor(self) -> float:
        scale = np.mean(np.abs(self.e_d2h2)) * np.mean(np.abs(self.e_d2))
        return FLOOR_FACTOR * max(scale, np.finfo(float).tiny)


def _products(dataset: Dataset, system: MomentSystem, theta, psi: float):
    par = system.unpack(theta)
    delta = residual_exposure(dataset, par.alpha1, par.alpha2, system.exposure_basis,
                              system.interaction_basis)
    h = dataset.y - psi * dataset.a
    d2 = delta**2
    return {
        "e_d2": d2, "e_d2h": d2 * h, "e_d2h2": d2 * h * h, "e_da": delta * dataset.a,
        "e_h": h, "e_x": dataset.x, "e_hx": h[:, None] * dataset.x,
    }


def _basis_values(basis, dataset):
    if isinstance(basis, (BasisSpec, list, tuple)):
        return evaluate_bases(basis, dataset).values
    return np.asarray(getattr(basis, "values", basis), dtype=float)


def fit_conditional_moments(dataset: Dataset, system: MomentSystem, theta, psi: float,
                            basis) -> ConditionalMomentSet:
    """Project the realized products on ``basis`` to estimate each ``E(.|C)``.

    ``system`` supplies the exposure residual at ``theta``.  Fitted values of
    ``E(D2|C)`` and ``E(D2 H^2|C)`` below the floor are raised to it and
    counted in ``n_floored``.
    """
    b = _basis_values(basis, dataset)
    if b.shape[0] != dataset.n:
        raise MomentError("basis rows do not match the dataset")
    if np.linalg.matrix_rank(b) < b.shape[1]:
        raise MomentError("projection basis is rank deficient")
    products = _products(dataset, system, theta, psi)
    fitted, coefs = {}, {}
    for name, target in products.items():
        beta = np.linalg.lstsq(b, target, rcond=None)[0]
        coefs[name] = beta
        fitted[name] = b @ beta
    floored = 0
    for name in ("e_d2", "e_d2h2"):
        scale = np.mean(np.abs(products[name]))
        delta_floor = FLOOR_FACTOR * max(scale, np.finfo(float).tiny)
        low = fitted[name] < delta_floor
        if low.all():
            raise DegenerateMomentsError(f"every fitted value of {name} is below the floor")
        floored += int(low.sum())
        fitted[name] = np.where(low, delta_floor, fitted[name])
    return ConditionalMomentSet(**fitted, source="regression", n_floored=floored,
                                coefficients=coefs)


def projection_scores(dataset: Dataset, system: MomentSystem, theta, psi: float, basis,
                      cm: ConditionalMomentSet) -> np.ndarray:
    """Least-squares normal equations of the projections behind ``cm``.

    Stacking these columns next to the test moments accounts for the
    estimated instruments in the moment covariance.  Each block is
    ``b(C) * (product - b(C)'beta)``; block order follows the fields.
    """
    if cm.source != "regression":
        raise MomentError("projection scores need a regression-based moment set")
    b = _basis_values(basis, dataset)
    products = _products(dataset, system, theta, psi)
    cols = []
    for name, target in products.items():
        resid = target - b @ cm.coefficients[name]
        resid = resid.reshape(dataset.n, -1)
        for j in range(resid.shape[1]):
            cols.append(b * resid[:, [j]])
    return np.concatenate(cols, axis=1)


def solve_block(cm: ConditionalMomentSet, ev: np.ndarray, ew: np.ndarray):
    """Row-wise solution of the 2x2 system for right-hand sides ``ev``, ``ew``.

    ``ev`` and ``ew`` are (n, r); returns ``(l, m)`` of the same shape.
    """
    d = cm.determinant()
    if np.any(~(d > cm.floor())):
        raise DegenerateMomentsError(
            f"d(C) is below the floor for {int(np.sum(~(d > cm.floor())))} rows")
    ev = np.asarray(ev, dtype=float).reshape(cm.n, -1)
    ew = np.asarray(ew, dtype=float).reshape(cm.n, -1)
    a11, a12, a22 = cm.e_d2h2[:, None], cm.e_d2h[:, None], cm.e_d2[:, None]
    ell = (a22 * ev - a12 * ew) / d[:, None]
    m = (-a12 * ev + a11 * ew) / d[:, None]
    return ell, m


def optimal_instruments(cm: ConditionalMomentSet, exposure_gradient, interaction_gradient):
    """Optimal ``(l*, m*)`` with columns ordered ``(psi, alpha1, alpha2)``.

    ``exposure_gradient`` is the (n, p1) gradient of ``g_{A,1}`` in
    ``alpha1`` (the exposure basis for a linear model) and
    ``interaction_gradient`` the (n, p2) gradient of ``g_{A,2}``.  The
    ``alpha2`` block is ordered by X column, then basis column.
    """
    b1 = np.asarray(exposure_gradient, dtype=float).reshape(cm.n, -1)
    b2 = np.asarray(interaction_gradient, dtype=float).reshape(cm.n, -1)
    ev = [cm.e_da[:, None], cm.e_h[:, None] * b1, interaction_design(cm.e_hx, b2)]
    ew = [np.zeros((cm.n, 1)), b1, interaction_design(cm.e_x, b2)]
    return solve_block(cm, np.concatenate(ev, axis=1), np.concatenate(ew, axis=1))


def optimal_system(cm: ConditionalMomentSet, exposure_basis, interaction_basis=None,
                   n_x: int | None = None) -> MomentSystem:
    """Robust propensity-score system using the optimal instruments."""
    b1 = np.asarray(getattr(exposure_basis, "values", exposure_basis), dtype=float)
    b2 = np.ones((cm.n, 1)) if interaction_basis is None else np.asarray(
        getattr(interaction_basis, "values", interaction_basis), dtype=float)
    ell, m = optimal_instruments(cm, b1, b2)
    return MomentSystem("rps", exposure_basis=b1, interaction_basis=b2, ell=ell, m=m,
                        n_x=cm.e_x.shape[1] if n_x is None else n_x)
