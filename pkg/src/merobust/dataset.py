"""Observed-data container shared by every module."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

EXPOSURE_KINDS = ("continuous", "binary", "count")


class DataError(ValueError):
    """Raised when observed data violate the dataset invariants."""


def _as_matrix(values, n: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.size == 0:
        arr = np.zeros((n, 0))
    if arr.ndim != 2 or arr.shape[0] != n:
        raise DataError(f"{name} must have {n} rows, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Dataset:
    """Outcome ``y``, exposure ``a``, error-free ``c`` and error-prone ``x``.

    ``c`` and ``x`` are stored as 2-d arrays; column names are optional and
    default to ``c1, c2, ...`` and ``x1, x2, ...``.
    """

    y: np.ndarray
    a: np.ndarray
    c: np.ndarray
    x: np.ndarray
    exposure_kind: str = "continuous"
    c_names: tuple[str, ...] = field(default=())
    x_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        n = y.shape[0]
        a = np.asarray(self.a, dtype=float).ravel()
        if a.shape[0] != n:
            raise DataError(f"exposure has {a.shape[0]} rows, outcome has {n}")
        c = _as_matrix(self.c, n, "c")
        x = _as_matrix(self.x, n, "x")
        for name, arr in (("y", y), ("a", a), ("c", c), ("x", x)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"non-finite entries in {name}")
        if self.exposure_kind not in EXPOSURE_KINDS:
            raise DataError(f"unknown exposure kind {self.exposure_kind!r}")
        if self.exposure_kind == "binary" and not np.all((a == 0) | (a == 1)):
            raise DataError("binary exposure must take values in {0, 1}")
        if self.exposure_kind == "count" and not (
            np.all(a >= 0) and np.all(a == np.floor(a))
        ):
            raise DataError("count exposure must be a nonnegative integer")
        c_names = tuple(self.c_names) or tuple(f"c{j + 1}" for j in range(c.shape[1]))
        x_names = tuple(self.x_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(c_names) != c.shape[1] or len(x_names) != x.shape[1]:
            raise DataError("column name count does not match column count")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "c_names", c_names)
        object.__setattr__(self, "x_names", x_names)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def column(self, name: str) -> np.ndarray:
        """Look up a named column among ``y``, ``a``, C and X columns."""
        if name in self.c_names:
            return self.c[:, self.c_names.index(name)]
        if name in self.x_names:
            return self.x[:, self.x_names.index(name)]
        if name in ("y", "a"):
            return getattr(self, name)
        raise DataError(f"unknown column {name!r}")

    def take(self, index) -> Dataset:
        """Row subset or permutation."""
        index = np.asarray(index)
        return replace(
            self, y=self.y[index], a=self.a[index], c=self.c[index], x=self.x[index]
        )

    def with_outcome(self, y) -> Dataset:
        return replace(self, y=y)
