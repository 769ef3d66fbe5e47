"""Spatio-temporal panel data: response construction and row validation.

A :class:`Panel` holds one row per (tract, time slot) pair. Covariates live in a
float matrix where NaN marks a missing cell and categorical columns store level
indices into a per-column level registry. Rows with missing covariates are kept;
the tree learner routes them at every split.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

QUANTITATIVE = "quantitative"
CATEGORICAL = "categorical"
MISSING_TOKENS = frozenset({"", "NA", "na", "NaN", "nan"})


class PanelValidationError(ValueError):
    """Raised when raw rows cannot form a valid panel."""


@dataclass(frozen=True)
class RateTransform:
    """``log(((count + offset) / population) * scale)``, natural log."""

    offset: float = 1e-4
    scale: float = 1000.0

    def __post_init__(self):
        if not (self.offset > 0 and math.isfinite(self.offset)):
            raise ValueError(f"offset must be positive, got {self.offset}")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive, got {self.scale}")


def build_response(count, population, transform: RateTransform | None = None):
    """Log rate per ``transform.scale`` people.

    Works elementwise on arrays; scalars in give a float out.
    """
    t = transform or RateTransform()
    count = np.asarray(count, dtype=float)
    population = np.asarray(population, dtype=float)
    if np.any(~np.isfinite(population)) or np.any(population <= 0):
        raise ValueError("population must be positive and finite")
    if np.any(~np.isfinite(count)) or np.any(count < 0):
        raise ValueError("count must be non-negative and finite")
    out = np.log((count + t.offset) / population * t.scale)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Observation:
    tract_id: str
    time_slot: int
    response: float | None
    covariates: tuple


@dataclass(frozen=True, eq=False)
class Panel:
    """Validated, immutable panel.

    ``tract`` holds 0-based indices into ``tract_ids``; ``slot`` holds 1-based
    time slot indices into ``time_labels``.
    """

    tract_ids: tuple
    time_labels: tuple
    tract: np.ndarray
    slot: np.ndarray
    y: np.ndarray
    X: np.ndarray
    covariate_names: tuple
    covariate_kinds: tuple
    levels: tuple

    def __post_init__(self):
        for arr in (self.tract, self.slot, self.y, self.X):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def T(self) -> int:
        return len(self.time_labels)

    @property
    def C(self) -> int:
        return len(self.tract_ids)

    @property
    def p(self) -> int:
        return len(self.covariate_names)

    @property
    def categorical(self) -> np.ndarray:
        return np.array([k == CATEGORICAL for k in self.covariate_kinds], dtype=bool)

    @property
    def observations(self) -> list[Observation]:
        return [
            Observation(
                self.tract_ids[self.tract[i]],
                int(self.slot[i]),
                float(self.y[i]),
                tuple(self._cell(i, j) for j in range(self.p)),
            )
            for i in range(self.n)
        ]

    def is_balanced(self) -> bool:
        """True when every slot has exactly one row for every tract."""
        return self.n == self.T * self.C

    def slot_matrix(self, values) -> np.ndarray:
        """Scatter per-row ``values`` into a (T, C) array; absent cells are NaN."""
        out = np.full((self.T, self.C), np.nan)
        out[self.slot - 1, self.tract] = values
        return out

    def _cell(self, i, j):
        v = self.X[i, j]
        if np.isnan(v):
            return None
        if self.covariate_kinds[j] == CATEGORICAL:
            return self.levels[j][int(v)]
        return float(v)

    def to_rows(self, tract_col="tract", time_col="time", response_col="y") -> list[dict]:
        rows = []
        for i in range(self.n):
            row = {
                tract_col: self.tract_ids[self.tract[i]],
                time_col: self.time_labels[self.slot[i] - 1],
                response_col: float(self.y[i]),
            }
            for j, name in enumerate(self.covariate_names):
                row[name] = self._cell(i, j)
            rows.append(row)
        return rows

    def __eq__(self, other):
        if not isinstance(other, Panel):
            return NotImplemented
        return (
            self.tract_ids == other.tract_ids
            and self.time_labels == other.time_labels
            and self.covariate_names == other.covariate_names
            and self.covariate_kinds == other.covariate_kinds
            and self.levels == other.levels
            and np.array_equal(self.tract, other.tract)
            and np.array_equal(self.slot, other.slot)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.X, other.X, equal_nan=True)
        )

    __hash__ = None


def is_missing(value) -> bool:
    if value is None:
        return True
    if isinstance(value, float) and math.isnan(value):
        return True
    return isinstance(value, str) and value.strip() in MISSING_TOKENS


def _as_float(value):
    if isinstance(value, (int, float, np.integer, np.floating)) and not isinstance(value, bool):
        return float(value)
    try:
        return float(str(value).strip())
    except ValueError:
        return None


def _time_key(value):
    f = _as_float(value)
    if f is not None and f.is_integer():
        return int(f)
    return str(value).strip()


def _infer_kind(values) -> str:
    for v in values:
        if not is_missing(v):
            f = _as_float(v)
            if f is None or math.isinf(f):
                return CATEGORICAL
    return QUANTITATIVE


def validate_panel(
    rows: Iterable[Mapping[str, Any]] | Panel,
    covariates: Sequence[str] | None = None,
    *,
    tract_col: str = "tract",
    time_col: str = "time",
    response_col: str | None = "y",
    count_col: str | None = None,
    population_col: str | None = None,
    transform: RateTransform | None = None,
    kinds: Mapping[str, str] | None = None,
    tract_registry: Sequence[str] | None = None,
) -> Panel:
    """Build a :class:`Panel` from parsed rows.

    The response is either read from ``response_col`` or, when ``count_col``
    and ``population_col`` are given, built with :func:`build_response`.
    Covariate kinds are inferred (any non-numeric entry makes a column
    categorical) unless given in ``kinds``. Passing a ``Panel`` re-validates it
    and returns an equal panel.
    """
    if isinstance(rows, Panel):
        panel = rows
        return validate_panel(
            panel.to_rows(tract_col, time_col, "y"),
            panel.covariate_names,
            tract_col=tract_col,
            time_col=time_col,
            response_col="y",
            kinds=dict(zip(panel.covariate_names, panel.covariate_kinds)),
            tract_registry=panel.tract_ids,
        )

    rows = list(rows)
    if not rows:
        raise PanelValidationError("no rows")
    if covariates is None:
        skip = {tract_col, time_col, response_col, count_col, population_col}
        covariates = [k for k in rows[0] if k not in skip]
    covariates = list(covariates)
    kinds = dict(kinds or {})
    use_counts = count_col is not None or population_col is not None
    if use_counts and (count_col is None or population_col is None):
        raise PanelValidationError("count_col and population_col must be given together")

    problems = []
    for r, row in enumerate(rows, start=1):
        missing_cols = [c for c in (tract_col, time_col, *covariates) if c not in row]
        if missing_cols:
            problems.append(f"row {r}: missing column(s) {', '.join(missing_cols)}")
    if problems:
        raise PanelValidationError("; ".join(problems[:20]))

    keys = [(str(row[tract_col]).strip(), _time_key(row[time_col])) for row in rows]
    dupes = sorted(k for k, c in Counter(keys).items() if c > 1)
    if dupes:
        listing = ", ".join(f"({t}, {s})" for t, s in dupes[:20])
        raise PanelValidationError(f"duplicate (tract, time) pairs: {listing}")

    if tract_registry is None:
        registry = tuple(sorted({k[0] for k in keys}))
    else:
        registry = tuple(str(t) for t in tract_registry)
        if len(set(registry)) != len(registry):
            raise PanelValidationError("tract registry contains duplicates")
    tract_index = {t: i for i, t in enumerate(registry)}
    unknown = sorted({k[0] for k in keys} - tract_index.keys())
    if unknown:
        raise PanelValidationError(f"tract ids not in registry: {', '.join(unknown[:20])}")

    try:
        time_labels = tuple(sorted({k[1] for k in keys}))
    except TypeError:
        time_labels = tuple(sorted({k[1] for k in keys}, key=str))
    slot_index = {t: s + 1 for s, t in enumerate(time_labels)}
    tract = np.array([tract_index[k[0]] for k in keys], dtype=np.int64)
    slot = np.array([slot_index[k[1]] for k in keys], dtype=np.int64)

    y = np.empty(len(rows))
    if use_counts:
        counts, pops = [], []
        for r, row in enumerate(rows, start=1):
            c, p = _as_float(row.get(count_col)), _as_float(row.get(population_col))
            if c is None or p is None or is_missing(row.get(count_col)):
                problems.append(f"row {r}: count/population not numeric")
                c, p = 0.0, 1.0
            elif c < 0 or p <= 0:
                problems.append(f"row {r}: count must be >= 0 and population > 0")
                c, p = 0.0, 1.0
            counts.append(c)
            pops.append(p)
        y[:] = build_response(counts, pops, transform)
    else:
        if response_col is None:
            raise PanelValidationError("a response column or count/population columns are required")
        for r, row in enumerate(rows, start=1):
            v = row.get(response_col)
            f = None if is_missing(v) else _as_float(v)
            if f is None or not math.isfinite(f):
                problems.append(f"row {r}: response {v!r} is missing or not numeric")
                f = np.nan
            y[r - 1] = f
    if problems:
        raise PanelValidationError("; ".join(problems[:20]))

    X = np.full((len(rows), len(covariates)), np.nan)
    col_kinds, col_levels = [], []
    for j, name in enumerate(covariates):
        values = [row[name] for row in rows]
        kind = kinds.get(name) or _infer_kind(values)
        if kind not in (QUANTITATIVE, CATEGORICAL):
            raise PanelValidationError(f"covariate {name!r}: unknown kind {kind!r}")
        present = [i for i, v in enumerate(values) if not is_missing(v)]
        if not present:
            raise PanelValidationError(f"covariate {name!r} has no non-missing values")
        if kind == CATEGORICAL:
            labels = {i: str(values[i]).strip() for i in present}
            level_list = tuple(sorted(set(labels.values())))
            code = {lv: k for k, lv in enumerate(level_list)}
            for i, lv in labels.items():
                X[i, j] = code[lv]
        else:
            level_list = ()
            for i in present:
                f = _as_float(values[i])
                if f is None or not math.isfinite(f):
                    problems.append(f"row {i + 1}: covariate {name!r} value {values[i]!r} is not numeric")
                else:
                    X[i, j] = f
        col_kinds.append(kind)
        col_levels.append(level_list)
    if problems:
        raise PanelValidationError("; ".join(problems[:20]))

    return Panel(
        tract_ids=registry,
        time_labels=time_labels,
        tract=tract,
        slot=slot,
        y=y,
        X=X,
        covariate_names=tuple(covariates),
        covariate_kinds=tuple(col_kinds),
        levels=tuple(col_levels),
    )
