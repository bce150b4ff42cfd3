"""Feature maps over the error-free covariates.

Bases serve two purposes: regression designs for the exposure and outcome
models, and instrument functions multiplying residuals in the moment
conditions.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataset import DataError, Dataset

BASIS_KINDS = ("polynomial", "fourier", "dummy", "interaction", "custom")

CUSTOM_FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "square": np.square,
    "cube": lambda v: v**3,
    "abs": np.abs,
    "log1p_abs": lambda v: np.log1p(np.abs(v)),
}


def register_custom(name: str, fn: Callable[[np.ndarray], np.ndarray]) -> None:
    """Make ``fn`` available to ``BasisSpec.custom`` under ``name``."""
    CUSTOM_FUNCTIONS[name] = fn


class BasisError(ValueError):
    """Invalid basis specification or evaluation input."""


class RankDeficientError(BasisError):
    def __init__(self, column: str, message: str | None = None):
        self.column = column
        super().__init__(message or f"column {column!r} is linearly dependent on earlier columns")


@dataclass(frozen=True)
class BasisSpec:
    """Declarative feature map over one covariate column (or two parent specs).

    Use the classmethod constructors rather than the raw fields.
    ``polynomial`` accepts an optional ``scale``: the column is divided by it
    before raising to powers, which leaves the spanned space unchanged.
    ``scale=None`` uses the largest absolute value of the column.
    """

    kind: str
    column: str | None = None
    degree: int = 0
    powers: tuple[int, ...] | None = None
    scale: float | None = 1.0
    period: float = 1.0
    n_harmonics: int = 1
    levels: tuple[float, ...] | None = None
    parts: tuple[BasisSpec, ...] | None = None
    expression: str | None = None
    include_intercept: bool = True

    def __post_init__(self):
        if self.kind not in BASIS_KINDS:
            raise BasisError(f"unknown basis kind {self.kind!r}")
        if self.kind == "polynomial":
            if self.degree < 0:
                raise BasisError("polynomial degree must be >= 0")
            if self.powers is not None and any(p < 1 for p in self.powers):
                raise BasisError("explicit polynomial powers must be >= 1")
            if self.scale is not None and not self.scale > 0:
                raise BasisError("polynomial scale must be positive")
        if self.kind == "fourier":
            if self.n_harmonics < 1:
                raise BasisError("fourier n_harmonics must be >= 1")
            if not self.period > 0:
                raise BasisError("fourier period must be > 0")
        if self.kind == "dummy" and not self.levels:
            raise BasisError("dummy basis needs at least one level")
        if self.kind == "interaction" and (self.parts is None or len(self.parts) != 2):
            raise BasisError("interaction basis needs exactly two parent specs")
        if self.kind == "custom" and self.expression is None:
            raise BasisError("custom basis needs a named expression")

    @classmethod
    def polynomial(cls, column=None, degree=1, include_intercept=True, powers=None, scale=1.0):
        powers = tuple(int(p) for p in powers) if powers is not None else None
        if powers is not None:
            degree = max(powers, default=0)
        return cls("polynomial", column=column, degree=int(degree), powers=powers,
                   scale=None if scale is None else float(scale),
                   include_intercept=include_intercept)

    @classmethod
    def constant(cls):
        return cls.polynomial(None, 0, include_intercept=True)

    @classmethod
    def fourier(cls, column, period, n_harmonics=1, include_intercept=False):
        return cls("fourier", column=column, period=float(period),
                   n_harmonics=int(n_harmonics), include_intercept=include_intercept)

    @classmethod
    def dummy(cls, column, levels, include_intercept=False):
        return cls("dummy", column=column, levels=tuple(levels),
                   include_intercept=include_intercept)

    @classmethod
    def interaction(cls, first, second, include_intercept=True):
        return cls("interaction", parts=(first, second), include_intercept=include_intercept)

    @classmethod
    def custom(cls, column, expression, include_intercept=False):
        return cls("custom", column=column, expression=expression,
                   include_intercept=include_intercept)

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if v is not None or k == "scale"}
        if self.parts is not None:
            out["parts"] = [p.to_dict() for p in self.parts]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> BasisSpec:
        data = dict(data)
        if "parts" in data and data["parts"] is not None:
            data["parts"] = tuple(cls.from_dict(p) for p in data["parts"])
        for key in ("powers", "levels"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class DesignMatrix:
    values: np.ndarray
    column_labels: list[str] = field(default_factory=list)
    orthonormal: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values.reshape(-1, 1)
        if not self.column_labels:
            self.column_labels = [f"f{j}" for j in range(self.values.shape[1])]
        if len(self.column_labels) != self.values.shape[1]:
            raise BasisError("label count does not match column count")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def n_columns(self) -> int:
        return self.values.shape[1]

    def select(self, columns: Sequence[int]) -> DesignMatrix:
        columns = list(columns)
        return DesignMatrix(self.values[:, columns],
                            [self.column_labels[j] for j in columns])


def _powers(spec: BasisSpec):
    return list(spec.powers if spec.powers is not None else range(1, spec.degree + 1))


def _column(dataset: Dataset, name: str | None) -> np.ndarray:
    if name is None:
        if dataset.c.shape[1] != 1:
            raise BasisError("basis needs an explicit column when C is not scalar")
        values = dataset.c[:, 0]
    else:
        try:
            values = dataset.column(name)
        except DataError as err:
            raise BasisError(str(err)) from None
    if not np.all(np.isfinite(values)):
        raise BasisError(f"non-finite values in column {name!r}")
    return values


def _is_intercept(label: str) -> bool:
    return label == "1"


def evaluate_basis(spec: BasisSpec, dataset: Dataset) -> DesignMatrix:
    """Evaluate ``spec`` row by row on ``dataset``; the intercept comes first."""
    n = dataset.n
    cols: list[np.ndarray] = []
    labels: list[str] = []
    if spec.kind == "interaction":
        first = evaluate_basis(spec.parts[0], dataset)
        second = evaluate_basis(spec.parts[1], dataset)
        seen = set()
        for i, la in enumerate(first.column_labels):
            for j, lb in enumerate(second.column_labels):
                if _is_intercept(la) and _is_intercept(lb):
                    continue
                if _is_intercept(la):
                    label = lb
                elif _is_intercept(lb):
                    label = la
                else:
                    label = f"{la}*{lb}"
                if label in seen:
                    continue
                seen.add(label)
                cols.append(first.values[:, i] * second.values[:, j])
                labels.append(label)
    elif spec.kind == "polynomial" and not _powers(spec):
        pass  # intercept only, no column needed
    else:
        v = _column(dataset, spec.column)
        name = spec.column or dataset.c_names[0]
        if spec.kind == "polynomial":
            powers = _powers(spec)
            scale = spec.scale
            if scale is None:
                top = float(np.max(np.abs(v)))
                scale = top if top > 0 else 1.0
            scaled = v / scale
            for p in powers:
                cols.append(scaled**p)
                labels.append(name if p == 1 else f"{name}^{p}")
        elif spec.kind == "fourier":
            for h in range(1, spec.n_harmonics + 1):
                phase = 2.0 * np.pi * h * v / spec.period
                cols += [np.sin(phase), np.cos(phase)]
                labels += [f"sin{h}({name})", f"cos{h}({name})"]
        elif spec.kind == "dummy":
            levels = spec.levels[1:] if spec.include_intercept else spec.levels
            for lev in levels:
                cols.append((v == lev).astype(float))
                labels.append(f"{name}=={lev:g}")
        elif spec.kind == "custom":
            fn = CUSTOM_FUNCTIONS.get(spec.expression)
            if fn is None:
                raise BasisError(f"unknown custom expression {spec.expression!r}")
            cols.append(np.asarray(fn(v), dtype=float))
            labels.append(f"{spec.expression}({name})")
    if spec.include_intercept:
        cols.insert(0, np.ones(n))
        labels.insert(0, "1")
    if not cols:
        raise BasisError("basis evaluates to zero columns")
    values = np.column_stack(cols)
    if not np.all(np.isfinite(values)):
        raise BasisError("basis produced non-finite values")
    return DesignMatrix(values, labels)


def evaluate_bases(specs: Sequence[BasisSpec], dataset: Dataset) -> DesignMatrix:
    """Concatenate several bases, keeping at most one intercept column."""
    if isinstance(specs, BasisSpec):
        return evaluate_basis(specs, dataset)
    values, labels = [], []
    for spec in specs:
        dm = evaluate_basis(spec, dataset)
        for j, label in enumerate(dm.column_labels):
            if label in labels:
                continue
            values.append(dm.values[:, j])
            labels.append(label)
    if not values:
        raise BasisError("no basis specs given")
    return DesignMatrix(np.column_stack(values), labels)


def extension_basis(spec: BasisSpec, dataset: Dataset, count: int = 2) -> DesignMatrix:
    """The next ``count`` basis functions in the family of ``spec``.

    Polynomials add the next powers; Fourier bases add further harmonics
    (sine/cosine pairs, so ``count`` must be even).
    """
    if spec.kind == "polynomial":
        top = max(spec.powers) if spec.powers else spec.degree
        ext = BasisSpec.polynomial(spec.column, include_intercept=False, scale=spec.scale,
                                   powers=range(top + 1, top + 1 + count))
        return evaluate_basis(ext, dataset)
    if spec.kind == "fourier":
        if count % 2:
            raise BasisError("fourier bases extend by sine/cosine pairs")
        ext = BasisSpec.fourier(spec.column, spec.period, spec.n_harmonics + count // 2)
        dm = evaluate_basis(ext, dataset)
        return dm.select(range(2 * spec.n_harmonics, dm.n_columns))
    raise BasisError(f"cannot extend a {spec.kind} basis")


def gram_schmidt_orthonormalize(m: DesignMatrix | np.ndarray, rtol: float = 1e-10) -> DesignMatrix:
    """Orthonormalize columns under ``<u, v> = mean(u * v)``.

    Classical Gram-Schmidt with one re-orthogonalization pass, left to right.
    Raises ``RankDeficientError`` naming the first dependent column.
    """
    if not isinstance(m, DesignMatrix):
        m = DesignMatrix(m)
    a = m.values
    n, d = a.shape
    q = np.empty_like(a)
    for j in range(d):
        v = a[:, j].copy()
        ref = np.sqrt(v @ v / n)
        for _ in range(2):
            if j:
                v -= q[:, :j] @ (q[:, :j].T @ v / n)
        norm = np.sqrt(v @ v / n)
        if ref == 0 or norm <= rtol * ref:
            raise RankDeficientError(m.column_labels[j])
        q[:, j] = v / norm
    return DesignMatrix(q, [f"gs({label})" for label in m.column_labels], orthonormal=True)
