"""Incomplete numeric datasets with column roles, and CSV round-tripping."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

DEFAULT_SENTINEL = "NA"


class DatasetError(ValueError):
    pass


class SchemaError(DatasetError):
    pass


class CsvParseError(DatasetError):
    def __init__(self, row: int, column: str, cell: str):
        self.row = row
        self.column = column
        super().__init__(f"row {row}, column {column!r}: cannot parse {cell!r} as a finite number")


class RoleViolationError(DatasetError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class IncompleteDataset:
    """n x (2+p) table; ``mask`` is True where a cell is observed.

    ``roles`` holds one of "Y", "D", "X" per column, in file order. Masked
    cells carry NaN in ``values`` and are never read numerically.
    ``row_ids`` records which source row each row came from (bootstrap
    draws repeat ids); it does not take part in equality.
    """

    values: np.ndarray
    mask: np.ndarray
    roles: tuple[str, ...]
    column_names: tuple[str, ...]
    row_ids: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if values.ndim != 2 or values.shape != mask.shape:
            raise SchemaError("values and mask must be 2-d arrays of identical shape")
        n, k = values.shape
        roles = tuple(self.roles)
        names = tuple(self.column_names)
        if len(roles) != k or len(names) != k:
            raise SchemaError("need one role and one name per column")
        if roles.count("Y") != 1 or roles.count("D") != 1 or set(roles) - {"Y", "D", "X"}:
            raise SchemaError("roles must contain exactly one 'Y', one 'D', and 'X' otherwise")
        if len(set(names)) != k:
            raise SchemaError("duplicate column names")
        if n < 2 or k < 3:
            raise SchemaError("need n >= 2 rows and at least one X column")
        values = np.where(mask, values, np.nan)
        if not np.all(np.isfinite(values[mask])):
            raise DatasetError("observed cells must be finite")
        for role in ("Y", "D"):
            j = roles.index(role)
            if not mask[:, j].all():
                raise RoleViolationError(f"{role} column {names[j]!r} has missing values")
        row_ids = np.arange(n) if self.row_ids is None else np.asarray(self.row_ids, dtype=np.int64)
        if row_ids.shape != (n,):
            raise SchemaError("row_ids must have one entry per row")
        object.__setattr__(self, "row_ids", _frozen(row_ids))
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "mask", _frozen(mask))
        object.__setattr__(self, "roles", roles)
        object.__setattr__(self, "column_names", names)

    @classmethod
    def from_arrays(cls, y, d, x, x_mask=None, x_names=None, y_name="Y", d_name="D") -> IncompleteDataset:
        """Build a dataset laid out as [Y, D, X1..Xp]."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        n, p = x.shape
        values = np.column_stack([np.asarray(y, float), np.asarray(d, float), x])
        mask = np.ones_like(values, dtype=bool)
        if x_mask is not None:
            mask[:, 2:] = np.asarray(x_mask, dtype=bool)
        names = list(x_names) if x_names is not None else [f"X{j + 1}" for j in range(p)]
        return cls(values, mask, ("Y", "D") + ("X",) * p, (y_name, d_name, *names))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return len(self.x_index)

    @property
    def y_index(self) -> int:
        return self.roles.index("Y")

    @property
    def d_index(self) -> int:
        return self.roles.index("D")

    @property
    def x_index(self) -> tuple[int, ...]:
        return tuple(i for i, r in enumerate(self.roles) if r == "X")

    @property
    def x_names(self) -> tuple[str, ...]:
        return tuple(self.column_names[i] for i in self.x_index)

    @property
    def y(self) -> np.ndarray:
        return self.values[:, self.y_index]

    @property
    def d(self) -> np.ndarray:
        return self.values[:, self.d_index]

    @property
    def x(self) -> np.ndarray:
        return self.values[:, list(self.x_index)]

    @property
    def x_mask(self) -> np.ndarray:
        return self.mask[:, list(self.x_index)]

    @property
    def n_missing(self) -> int:
        return int((~self.mask).sum())

    @property
    def missing_rate(self) -> float:
        """Share of missing cells among the X columns."""
        return float((~self.x_mask).sum()) / (self.n * self.p)

    def take_rows(self, rows) -> IncompleteDataset:
        rows = np.asarray(rows)
        return IncompleteDataset(self.values[rows], self.mask[rows], self.roles, self.column_names, self.row_ids[rows])

    def __eq__(self, other):
        if not isinstance(other, IncompleteDataset):
            return NotImplemented
        return (
            self.roles == other.roles
            and self.column_names == other.column_names
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.values, other.values, equal_nan=True)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class CompletedDataset:
    """A fully observed copy of an incomplete dataset, with the same roles."""

    values: np.ndarray
    roles: tuple[str, ...]
    column_names: tuple[str, ...]
    provenance: str = ""
    flags: tuple[str, ...] = field(default=())
    row_ids: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(values)):
            raise DatasetError("completed dataset contains missing or non-finite cells")
        object.__setattr__(self, "values", _frozen(values))
        row_ids = np.arange(values.shape[0]) if self.row_ids is None else np.asarray(self.row_ids)
        object.__setattr__(self, "row_ids", _frozen(row_ids))

    @classmethod
    def from_complete(cls, dataset: IncompleteDataset, provenance: str = "") -> CompletedDataset:
        if dataset.n_missing:
            raise DatasetError("dataset has missing cells")
        return cls(dataset.values, dataset.roles, dataset.column_names, provenance, row_ids=dataset.row_ids)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def x_index(self) -> tuple[int, ...]:
        return tuple(i for i, r in enumerate(self.roles) if r == "X")

    @property
    def p(self) -> int:
        return len(self.x_index)

    @property
    def y(self) -> np.ndarray:
        return self.values[:, self.roles.index("Y")]

    @property
    def d(self) -> np.ndarray:
        return self.values[:, self.roles.index("D")]

    @property
    def x(self) -> np.ndarray:
        return self.values[:, list(self.x_index)]


def load_csv(path, y: str, d: str, sentinel: str = DEFAULT_SENTINEL) -> IncompleteDataset:
    """Read a comma-delimited UTF-8 file with a header row.

    Empty cells and ``sentinel`` cells are missing. ``y`` and ``d`` name the
    outcome and the variable of interest; every other column is a candidate
    control.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            dup = sorted({h for h in header if header.count(h) > 1})
            raise SchemaError(f"duplicate column names: {', '.join(dup)}")
        for role, name in (("Y", y), ("D", d)):
            if name not in header:
                raise SchemaError(f"{role} column {name!r} not found in header")
        if y == d:
            raise SchemaError("Y and D must be different columns")
        k = len(header)
        rows, masks = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != k:
                raise SchemaError(f"row {lineno}: expected {k} fields, found {len(rec)}")
            vals, obs = [], []
            for name, cell in zip(header, rec):
                cell = cell.strip()
                if cell == "" or cell == sentinel:
                    vals.append(math.nan)
                    obs.append(False)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise CsvParseError(lineno, name, cell) from None
                if not math.isfinite(v):
                    raise CsvParseError(lineno, name, cell)
                vals.append(v)
                obs.append(True)
            rows.append(vals)
            masks.append(obs)
    roles = tuple("Y" if h == y else "D" if h == d else "X" for h in header)
    values = np.array(rows, dtype=float).reshape(len(rows), k)
    mask = np.array(masks, dtype=bool).reshape(len(rows), k)
    return IncompleteDataset(values, mask, roles, tuple(header))


def write_csv(dataset: IncompleteDataset, path, sentinel: str = DEFAULT_SENTINEL) -> None:
    """Write ``dataset`` so that ``load_csv`` reproduces it exactly.

    Floats use ``repr``, the shortest round-trip-safe decimal form.
    """
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(dataset.column_names)
        for vals, obs in zip(dataset.values, dataset.mask):
            w.writerow([repr(float(v)) if o else sentinel for v, o in zip(vals, obs)])
    os.replace(tmp, path)
