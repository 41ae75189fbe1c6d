"""Plan and latency collection under hint sets, and the line-delimited workload store.

Workload store format: the first line is a header
``{"format": "hintlm-workload", "version": 1}``; every further line is one
WorkloadRecord as JSON. A query may appear on several lines (appends made
while resuming); later lines overwrite earlier cells of the same query.
"""
from __future__ import annotations

import json
import logging
import statistics as pystats
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Protocol, Sequence, Tuple

from .hints import HintCatalog, HintSet, render_session_commands, reset_session_commands
from .stats import Statistics, build_table_stats

log = logging.getLogger(__name__)

STORE_FORMAT = "hintlm-workload"
STORE_VERSION = 1
TIMEOUT = "TIMEOUT"
DSN_ENV = "HINTLM_DSN"


class ConnectionError(RuntimeError):  # noqa: A001 - mirrors the DB-API name
    pass


class PlannerError(RuntimeError):
    pass


class StatementTimeout(RuntimeError):
    pass


@dataclass
class GatewayConfig:
    dsn: str = ""
    statement_timeout_ms: int = 1_000_000
    repetitions: int = 3
    warmups: int = 1

    def __post_init__(self):
        if self.statement_timeout_ms <= 0:
            raise ValueError("statement timeout must be positive")
        if self.repetitions < 1 or self.warmups < 0:
            raise ValueError("repetitions >= 1 and warmups >= 0 required")


@dataclass
class HintCell:
    plan_json: Optional[str] = None
    latency_ms: Optional[float] = None
    timed_out: bool = False
    timeout_ms: Optional[float] = None
    raw_ms: List[float] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def valid(self) -> bool:
        """Usable as training data: plan present and measured within the timeout."""
        return self.plan_json is not None and self.latency_ms is not None and not self.timed_out

    @property
    def complete(self) -> bool:
        return self.error is None and self.plan_json is not None and (
            self.timed_out or self.latency_ms is not None)

    def effective_latency(self) -> Optional[float]:
        """Latency for evaluation: timed-out cells count as the timeout value."""
        if self.timed_out:
            return self.timeout_ms
        return self.latency_ms

    def to_dict(self) -> Dict[str, Any]:
        d: Dict[str, Any] = {"plan_json": self.plan_json,
                             "latency_ms": TIMEOUT if self.timed_out else self.latency_ms}
        if self.timeout_ms is not None:
            d["timeout_ms"] = self.timeout_ms
        if self.raw_ms:
            d["raw_ms"] = list(self.raw_ms)
        if self.error is not None:
            d["error"] = self.error
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "HintCell":
        lat = d.get("latency_ms")
        timed_out = lat == TIMEOUT
        if lat is not None and not timed_out:
            lat = float(lat)
            if lat <= 0:
                raise ValueError("latency must be positive")
        return cls(plan_json=d.get("plan_json"), latency_ms=None if timed_out else lat,
                   timed_out=timed_out, timeout_ms=d.get("timeout_ms"),
                   raw_ms=list(d.get("raw_ms", [])), error=d.get("error"))


@dataclass
class WorkloadRecord:
    query_id: str
    sql: str
    rewritten_nl: Optional[str] = None
    per_hint: Dict[str, HintCell] = field(default_factory=dict)
    template: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        d: Dict[str, Any] = {"query_id": self.query_id, "sql": self.sql,
                             "rewritten_nl": self.rewritten_nl,
                             "per_hint": {k: v.to_dict() for k, v in self.per_hint.items()}}
        if self.template is not None:
            d["template"] = self.template
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "WorkloadRecord":
        return cls(query_id=d["query_id"], sql=d["sql"], rewritten_nl=d.get("rewritten_nl"),
                   per_hint={k: HintCell.from_dict(v) for k, v in d.get("per_hint", {}).items()},
                   template=d.get("template"))

    def valid_hints(self, catalog: HintCatalog) -> List[str]:
        return [h for h in catalog.ids if h in self.per_hint and self.per_hint[h].valid]

    def latencies(self) -> Dict[str, float]:
        return {h: c.latency_ms for h, c in self.per_hint.items() if c.valid}


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class WorkloadStore:
    """Ordered collection of records backed by a JSON-lines file."""

    def __init__(self, path: Optional[str | Path] = None, records: Iterable[WorkloadRecord] = ()):
        self.path = Path(path) if path else None
        self.records: Dict[str, WorkloadRecord] = {}
        self._lock = threading.Lock()
        for r in records:
            self.records[r.query_id] = r

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[WorkloadRecord]:
        return iter(self.records.values())

    def __getitem__(self, qid: str) -> WorkloadRecord:
        return self.records[qid]

    def __contains__(self, qid: str) -> bool:
        return qid in self.records

    @classmethod
    def loads(cls, text: str, path: Optional[str | Path] = None) -> "WorkloadStore":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            return cls(path)
        header = json.loads(lines[0])
        if header.get("format") != STORE_FORMAT or header.get("version") != STORE_VERSION:
            raise ValueError(f"not a version-{STORE_VERSION} workload store")
        store = cls(path)
        for ln in lines[1:]:
            rec = WorkloadRecord.from_dict(json.loads(ln))
            prev = store.records.get(rec.query_id)
            if prev is not None:
                prev.per_hint.update(rec.per_hint)
                prev.rewritten_nl = rec.rewritten_nl or prev.rewritten_nl
                prev.template = rec.template or prev.template
            else:
                store.records[rec.query_id] = rec
        return store

    @classmethod
    def load(cls, path: str | Path) -> "WorkloadStore":
        p = Path(path)
        return cls.loads(p.read_text() if p.exists() else "", p)

    def dumps(self) -> str:
        lines = [_dumps({"format": STORE_FORMAT, "version": STORE_VERSION})]
        lines += [_dumps(r.to_dict()) for r in self.records.values()]
        return "\n".join(lines) + "\n"

    def save(self, path: Optional[str | Path] = None) -> None:
        p = Path(path) if path else self.path
        if p is None:
            raise ValueError("no path to save to")
        tmp = p.with_suffix(p.suffix + ".tmp")
        tmp.write_text(self.dumps())
        tmp.replace(p)
        self.path = p

    def upsert(self, rec: WorkloadRecord, hint_id: Optional[str] = None) -> None:
        """Merge ``rec`` and append it (or just one of its cells) to the backing file."""
        with self._lock:
            prev = self.records.get(rec.query_id)
            if prev is None:
                self.records[rec.query_id] = rec
            elif prev is not rec:
                prev.per_hint.update(rec.per_hint)
            if self.path is None:
                return
            if not self.path.exists() or self.path.stat().st_size == 0:
                self.path.write_text(_dumps({"format": STORE_FORMAT, "version": STORE_VERSION}) + "\n")
            row = rec.to_dict()
            if hint_id is not None:
                row["per_hint"] = {hint_id: rec.per_hint[hint_id].to_dict()}
            with self.path.open("a") as fh:
                fh.write(_dumps(row) + "\n")


# ---------------------------------------------------------------------------
# DBMS access

class Connection(Protocol):
    def execute(self, sql: str) -> List[Dict[str, Any]]: ...

    def close(self) -> None: ...


class PostgresConnection:
    """psycopg-backed connection (``pip install hintlm[postgres]``)."""

    def __init__(self, dsn: str):
        try:
            import psycopg
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise ConnectionError("psycopg is not installed") from exc
        self._psycopg = psycopg
        try:
            self.conn = psycopg.connect(dsn, autocommit=True)
        except psycopg.OperationalError as exc:  # pragma: no cover - needs a server
            raise ConnectionError(str(exc)) from exc

    def execute(self, sql: str) -> List[Dict[str, Any]]:  # pragma: no cover - needs a server
        errors = self._psycopg.errors
        try:
            with self.conn.cursor() as cur:
                cur.execute(sql)
                if cur.description is None:
                    return []
                names = [c.name for c in cur.description]
                return [dict(zip(names, row)) for row in cur.fetchall()]
        except errors.QueryCanceled as exc:
            raise StatementTimeout(str(exc)) from exc
        except self._psycopg.OperationalError as exc:
            raise ConnectionError(str(exc)) from exc
        except self._psycopg.Error as exc:
            raise PlannerError(str(exc)) from exc

    def close(self) -> None:  # pragma: no cover - needs a server
        self.conn.close()


def connect(dsn: str) -> Connection:
    """Open a connection; ``sim:<bundle dir>`` selects the simulated DBMS."""
    if dsn.startswith("sim:"):
        from .synthetic import SimulatedDBMS

        return SimulatedDBMS.open(dsn[4:])
    return PostgresConnection(dsn)


def _plan_document(rows: List[Dict[str, Any]]) -> Any:
    if not rows:
        raise PlannerError("EXPLAIN returned no rows")
    value = next(iter(rows[0].values()))
    return json.loads(value) if isinstance(value, (str, bytes)) else value


def _with_hint(conn: Connection, h: HintSet, fn: Callable[[], Any]) -> Any:
    for cmd in render_session_commands(h):
        conn.execute(cmd)
    try:
        return fn()
    finally:
        for cmd in reset_session_commands(h):
            conn.execute(cmd)


def collect_plan(conn: Connection, sql: str, h: HintSet) -> str:
    """``EXPLAIN (FORMAT JSON)`` under ``h``; the session is reset afterwards."""
    doc = _with_hint(conn, h, lambda: _plan_document(conn.execute(f"EXPLAIN (FORMAT JSON) {sql}")))
    return json.dumps(doc, sort_keys=True)


@dataclass
class LatencyResult:
    latency_ms: Optional[float]
    timed_out: bool
    raw_ms: List[float]

    @property
    def value(self):
        return TIMEOUT if self.timed_out else self.latency_ms


def collect_latency(conn: Connection, sql: str, h: HintSet, cfg: GatewayConfig) -> LatencyResult:
    """Median measured execution time over ``cfg.repetitions`` runs after ``cfg.warmups``."""

    def run_once() -> float:
        doc = _plan_document(conn.execute(f"EXPLAIN (ANALYZE, FORMAT JSON) {sql}"))
        top = doc[0] if isinstance(doc, list) else doc
        return float(top["Execution Time"])

    def sweep() -> LatencyResult:
        raw: List[float] = []
        try:
            for _ in range(cfg.warmups):
                run_once()
            for _ in range(cfg.repetitions):
                raw.append(run_once())
        except StatementTimeout:
            return LatencyResult(None, True, raw)
        if any(t > cfg.statement_timeout_ms for t in raw):
            return LatencyResult(None, True, raw)
        return LatencyResult(float(pystats.median(raw)), False, raw)

    conn.execute(f"SET statement_timeout = {int(cfg.statement_timeout_ms)};")
    try:
        return _with_hint(conn, h, sweep)
    finally:
        conn.execute("RESET statement_timeout;")


def collect_workload(queries: Sequence[Tuple[str, str]], catalog: HintCatalog, cfg: GatewayConfig,
                     connect_fn: Callable[[], Connection], store: Optional[WorkloadStore] = None,
                     jobs: int = 1, templates: Optional[Mapping[str, str]] = None) -> List[WorkloadRecord]:
    """Fill every (query, hint) cell not already complete in ``store``.

    Per-cell failures are recorded on the cell and the sweep continues.
    Cells of one query run serially on one connection; distinct queries may
    run on separate workers.
    """
    store = store if store is not None else WorkloadStore()
    templates = templates or {}

    def one_query(item: Tuple[str, str]) -> WorkloadRecord:
        qid, sql = item
        rec = store.records.get(qid) or WorkloadRecord(qid, sql, template=templates.get(qid))
        todo = [h for h in catalog if not (h.hint_id in rec.per_hint and rec.per_hint[h.hint_id].complete)]
        if not todo:
            return rec
        conn = connect_fn()
        try:
            for h in todo:
                cell = HintCell(timeout_ms=float(cfg.statement_timeout_ms))
                try:
                    cell.plan_json = collect_plan(conn, sql, h)
                    lat = collect_latency(conn, sql, h, cfg)
                    cell.latency_ms, cell.timed_out, cell.raw_ms = lat.latency_ms, lat.timed_out, lat.raw_ms
                except (PlannerError, ConnectionError) as exc:
                    cell.error = f"{type(exc).__name__}: {exc}"
                    log.warning("query %s hint %s failed: %s", qid, h.hint_id, exc)
                rec.per_hint[h.hint_id] = cell
                store.upsert(rec, h.hint_id)
        finally:
            conn.close()
        return rec

    items = list(queries)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one_query, items))
    return [one_query(it) for it in items]


def collect_stats(conn: Connection, relations: Sequence[str], buckets: int = 50,
                  sample_size: int = 128, histogram_rows: int = 10_000, seed: int = 42) -> Statistics:
    """Histogram and sample statistics per relation, read through ``conn``."""
    import numpy as np

    rng = np.random.default_rng(seed)
    out = Statistics()
    for rel in relations:
        count = conn.execute(f"SELECT count(*) AS n FROM {rel};")
        n = float(next(iter(count[0].values()))) if count else 0.0
        conn.execute(f"SELECT setseed({(seed % 1000) / 1000.0});")
        rows = conn.execute(f"SELECT * FROM {rel} ORDER BY random() LIMIT {histogram_rows};")
        out.tables[rel] = build_table_stats(rows, n, buckets, sample_size, rng)
    return out
