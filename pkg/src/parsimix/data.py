"""Tabular data ingestion: typed columns, CSV reading, missing-row policy."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass

import numpy as np

MISSING_MARKERS = frozenset({"", "NA", "NaN", "nan"})


class DataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Factor:
    """A categorical column: integer codes into an ordered level list."""

    levels: tuple[str, ...]
    codes: np.ndarray  # int32, values in [0, len(levels))

    def __post_init__(self):
        if len(self.levels) == 0:
            raise DataError("factor has no levels")

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def __eq__(self, other):
        return (
            isinstance(other, Factor)
            and self.levels == other.levels
            and np.array_equal(self.codes, other.codes)
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable named columns, each numeric (float64) or a :class:`Factor`."""

    columns: dict[str, np.ndarray | Factor]
    n_dropped: int = 0

    def __post_init__(self):
        lengths = {len(v.codes) if isinstance(v, Factor) else len(v) for v in self.columns.values()}
        if len(lengths) > 1:
            raise DataError(f"columns have unequal lengths: {sorted(lengths)}")

    @property
    def n_rows(self) -> int:
        for v in self.columns.values():
            return len(v.codes) if isinstance(v, Factor) else len(v)
        return 0

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def is_factor(self, name: str) -> bool:
        return isinstance(self._get(name), Factor)

    def factor(self, name: str) -> Factor:
        col = self._get(name)
        if not isinstance(col, Factor):
            raise DataError(f"column {name!r} is numeric, expected a factor")
        return col

    def numeric(self, name: str) -> np.ndarray:
        col = self._get(name)
        if isinstance(col, Factor):
            raise DataError(f"column {name!r} is a factor, expected numeric")
        return col

    def _get(self, name: str):
        try:
            return self.columns[name]
        except KeyError:
            raise DataError(f"no column named {name!r}") from None

    def schema(self) -> list[dict]:
        out = []
        for name, col in self.columns.items():
            if isinstance(col, Factor):
                out.append({"name": name, "type": "factor", "n_levels": col.n_levels})
            else:
                out.append({"name": name, "type": "numeric"})
        return out

    def fingerprint(self) -> str:
        """Content hash over column names, types, and values."""
        h = hashlib.sha256()
        h.update(str(self.n_rows).encode())
        for name, col in self.columns.items():
            h.update(name.encode())
            if isinstance(col, Factor):
                h.update(b"factor")
                h.update("\x1f".join(col.levels).encode())
                h.update(np.ascontiguousarray(col.codes, dtype=np.int32).tobytes())
            else:
                h.update(b"numeric")
                h.update(np.ascontiguousarray(col, dtype=np.float64).tobytes())
        return h.hexdigest()


def factor_from_strings(values: list[str] | np.ndarray, levels: tuple[str, ...] | None = None) -> Factor:
    """Build a factor with levels ordered by first appearance (or as given)."""
    if levels is None:
        seen: dict[str, int] = {}
        for v in values:
            if v not in seen:
                seen[v] = len(seen)
        levels = tuple(seen)
    else:
        seen = {lev: i for i, lev in enumerate(levels)}
        for v in values:
            if v not in seen:
                raise DataError(f"value {v!r} not in declared levels")
    codes = np.fromiter((seen[v] for v in values), dtype=np.int32, count=len(values))
    return Factor(levels=levels, codes=codes)


def from_columns(
    data: dict[str, object],
    factors: tuple[str, ...] = (),
    n_dropped: int = 0,
) -> Dataset:
    """Build a Dataset from arrays/lists; string columns become factors."""
    cols: dict[str, np.ndarray | Factor] = {}
    for name, raw in data.items():
        if isinstance(raw, Factor):
            cols[name] = raw
            continue
        arr = np.asarray(raw)
        if name in factors or arr.dtype.kind in ("U", "S", "O"):
            cols[name] = factor_from_strings([str(v) for v in arr])
        else:
            cols[name] = arr.astype(np.float64)
    return Dataset(columns=cols, n_dropped=n_dropped)


def _is_number(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def ingest_csv(
    path: str,
    factors: tuple[str, ...] = (),
    numerics: tuple[str, ...] = (),
) -> Dataset:
    """Read a header-ed CSV into a typed :class:`Dataset`.

    Columns are numeric when every non-missing value parses as a float,
    otherwise factors with levels ordered by first appearance.  ``factors``
    and ``numerics`` override the inference by column name.  Rows with a
    missing cell are dropped and counted in ``Dataset.n_dropped``.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if not header or all(not c.strip() for c in header):
            raise DataError(f"{path}: empty header row")
        header = [c.strip() for c in header]
        for name in (*factors, *numerics):
            if name not in header:
                raise DataError(f"{path}: schema override for unknown column {name!r}")
        rows: list[list[str]] = []
        n_dropped = 0
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}"
                )
            if any(cell.strip() in MISSING_MARKERS for cell in row):
                n_dropped += 1
                continue
            rows.append([cell.strip() for cell in row])
    if not rows:
        raise DataError(f"{path}: no usable data rows")

    cols: dict[str, np.ndarray | Factor] = {}
    for j, name in enumerate(header):
        values = [row[j] for row in rows]
        as_factor = name in factors or (
            name not in numerics and not all(_is_number(v) for v in values)
        )
        if as_factor:
            cols[name] = factor_from_strings(values)
        else:
            try:
                cols[name] = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError as exc:
                raise DataError(f"{path}: column {name!r} is not numeric: {exc}") from None
    return Dataset(columns=cols, n_dropped=n_dropped)
