"""Per-table statistics: equi-depth histograms and row samples.

Statistics file schema (JSON)::

    {"format": "hintlm-stats", "version": 1,
     "tables": {<relation>: {"row_count": float,
                             "columns": {<col>: {"buckets": [[lo, hi, frac, ndistinct], ...]}},
                             "sample": [{<col>: value, ...}, ...]}}}

Only numeric columns carry buckets; text columns have an empty bucket list.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .plan_ir import OperandKind, PredicateExpr, PredOp

STATS_FORMAT = "hintlm-stats"
STATS_VERSION = 1


class MissingStatistics(KeyError):
    pass


@dataclass(frozen=True)
class Bucket:
    lo: float
    hi: float
    frac: float
    ndistinct: int


@dataclass
class ColumnStats:
    buckets: List[Bucket] = field(default_factory=list)

    @property
    def numeric(self) -> bool:
        return bool(self.buckets)


@dataclass
class TableStats:
    row_count: float
    columns: Dict[str, ColumnStats] = field(default_factory=dict)
    sample: List[Dict[str, Any]] = field(default_factory=list)


@dataclass
class Statistics:
    tables: Dict[str, TableStats] = field(default_factory=dict)

    def __getitem__(self, relation: str) -> TableStats:
        try:
            return self.tables[relation]
        except KeyError:
            raise MissingStatistics(relation) from None

    def __contains__(self, relation: str) -> bool:
        return relation in self.tables

    def relation_rows(self) -> Dict[str, float]:
        return {k: t.row_count for k, t in self.tables.items()}

    def to_dict(self) -> Dict[str, Any]:
        tables = {}
        for name in sorted(self.tables):
            t = self.tables[name]
            tables[name] = {
                "row_count": t.row_count,
                "columns": {c: {"buckets": [[b.lo, b.hi, b.frac, b.ndistinct] for b in cs.buckets]}
                            for c, cs in sorted(t.columns.items())},
                "sample": t.sample,
            }
        return {"format": STATS_FORMAT, "version": STATS_VERSION, "tables": tables}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Statistics":
        if d.get("version") != STATS_VERSION:
            raise ValueError(f"unsupported statistics version {d.get('version')}")
        tables = {}
        for name, t in d["tables"].items():
            cols = {c: ColumnStats([Bucket(float(b[0]), float(b[1]), float(b[2]), int(b[3]))
                                    for b in cs["buckets"]])
                    for c, cs in t["columns"].items()}
            tables[name] = TableStats(float(t["row_count"]), cols, list(t.get("sample", [])))
        return cls(tables)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Statistics":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_histogram(values: Sequence[float], n_buckets: int) -> List[Bucket]:
    """Equi-depth histogram with at most ``n_buckets`` buckets."""
    arr = np.sort(np.asarray(values, dtype=float))
    if arr.size == 0:
        return []
    chunks = np.array_split(arr, min(n_buckets, arr.size))
    return [Bucket(float(c[0]), float(c[-1]), c.size / arr.size, int(np.unique(c).size))
            for c in chunks if c.size]


def build_table_stats(rows: Sequence[Mapping[str, Any]], row_count: float, n_buckets: int,
                      sample_size: int, rng: Optional[np.random.Generator] = None) -> TableStats:
    """Histograms over all given rows plus a uniform sample of ``sample_size`` of them."""
    rng = rng or np.random.default_rng(0)
    cols: Dict[str, ColumnStats] = {}
    names = list(rows[0].keys()) if rows else []
    for c in names:
        vals = [r[c] for r in rows]
        if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals):
            cols[c] = ColumnStats(build_histogram(vals, n_buckets))
        else:
            cols[c] = ColumnStats([])
    k = min(sample_size, len(rows))
    idx = np.sort(rng.choice(len(rows), size=k, replace=False)) if k else []
    return TableStats(float(row_count), cols, [dict(rows[i]) for i in idx])


# ---------------------------------------------------------------------------
# predicate evaluation

def column_name(col: str) -> str:
    return col.rsplit(".", 1)[-1]


def _as_float(text: str) -> Optional[float]:
    try:
        return float(text)
    except (TypeError, ValueError):
        return None


def _value_list(text: str) -> List[str]:
    return [v.strip().strip("'\"") for v in text.split(",") if v.strip()]


def bucket_fractions(pred: PredicateExpr, col: ColumnStats) -> Optional[np.ndarray]:
    """Fraction of each bucket satisfying ``pred``; None when not estimable."""
    if not col.numeric or pred.operand_kind is OperandKind.COLUMN:
        return None
    if pred.op is PredOp.IN:
        vals = [_as_float(v) for v in _value_list(pred.operand_text)]
        if any(v is None for v in vals):
            return None
        out = np.zeros(len(col.buckets))
        for v in vals:
            out += _eq_fraction(col, v)
        return np.minimum(out, 1.0)
    if pred.op in (PredOp.LIKE, PredOp.OTHER):
        return None
    v = _as_float(pred.operand_text)
    if v is None:
        return None
    eq = _eq_fraction(col, v)
    below = np.array([_below(b, v) for b in col.buckets])
    if pred.op is PredOp.EQ:
        return eq
    if pred.op is PredOp.NEQ:
        return 1.0 - eq
    if pred.op is PredOp.LT:
        return below
    if pred.op is PredOp.LE:
        return np.minimum(below + eq, 1.0)
    if pred.op is PredOp.GT:
        return np.clip(1.0 - below - eq, 0.0, 1.0)
    if pred.op is PredOp.GE:
        return np.clip(1.0 - below, 0.0, 1.0)
    return None


def _eq_fraction(col: ColumnStats, v: float) -> np.ndarray:
    return np.array([1.0 / max(b.ndistinct, 1) if b.lo <= v <= b.hi else 0.0 for b in col.buckets])


def _below(b: Bucket, v: float) -> float:
    """Fraction of bucket strictly below ``v`` under a uniform spread."""
    if v <= b.lo:
        return 0.0
    if v > b.hi:
        return 1.0
    if b.hi == b.lo:
        return 0.0
    return (v - b.lo) / (b.hi - b.lo)


def _like_regex(pattern: str) -> re.Pattern:
    out = []
    for ch in pattern:
        if ch == "%":
            out.append(".*")
        elif ch == "_":
            out.append(".")
        else:
            out.append(re.escape(ch))
    return re.compile("^" + "".join(out) + "$", re.DOTALL)


def eval_predicate(pred: PredicateExpr, row: Mapping[str, Any]) -> bool:
    """Evaluate on one sampled row; predicates that cannot be evaluated pass."""
    if pred.op is PredOp.OTHER or pred.operand_kind is OperandKind.COLUMN:
        return True
    name = column_name(pred.column)
    if name not in row:
        return True
    value = row[name]
    if value is None:
        return False
    if pred.op is PredOp.LIKE:
        return bool(_like_regex(pred.operand_text).match(str(value)))
    if pred.op is PredOp.IN:
        items = _value_list(pred.operand_text)
        num = _as_float(str(value)) if isinstance(value, (int, float)) else None
        if num is not None:
            return any(_as_float(i) == num for i in items)
        return str(value) in items
    rhs: Any = pred.operand_text
    if isinstance(value, (int, float)):
        rhs = _as_float(pred.operand_text)
        if rhs is None:
            return True
    else:
        value = str(value)
    if pred.op is PredOp.EQ:
        return value == rhs
    if pred.op is PredOp.NEQ:
        return value != rhs
    if pred.op is PredOp.LT:
        return value < rhs
    if pred.op is PredOp.LE:
        return value <= rhs
    if pred.op is PredOp.GT:
        return value > rhs
    if pred.op is PredOp.GE:
        return value >= rhs
    return True
