"""Synthetic schemas, workloads and latency models with known ground truth.

Two latency models are available:

* ``penalty`` (default): each query hides a preferred join family and scan
  family; latency is ``base * (1 + penalty * #plan operators not matching the
  preference)``, optionally with log-normal noise.
* ``planted``: each query belongs to one of four hidden classes, and each
  class ranks the hints. Latency is ``base * level(rank)``, where the levels
  come in tiers of ``group`` hints: inside a tier latencies differ by less
  than 1.5x, and between tiers by more. The optimal hint is therefore a
  function of the class alone. ``signal`` chooses where the class is
  visible. With ``"text"`` the kind of the query's single filter predicate
  (EQ / RANGE / LIKE / IN) is the class. With ``"plan"`` every table carries
  the same predicate text and the class only shows in the scans' row
  estimates (and through them in every join estimate).
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .gateway import HintCell, PlannerError, StatementTimeout, WorkloadRecord, WorkloadStore
from .hints import HintCatalog, HintSet, default_catalog, FAMILIES
from .rewriter import normalize_sql
from .stats import Statistics, build_table_stats

PRED_KINDS = ("EQ", "RANGE", "LIKE", "IN")
WORDS = ("alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel",
         "india", "juliet", "kilo", "lima", "mike", "november", "oscar", "papa")
ALIASES = "abcdefgh"
JOIN_ORDER = ("hashjoin", "mergejoin", "nestloop")
SCAN_ORDER = ("seqscan", "indexscan", "indexonlyscan")
NODE_TYPE = {"hashjoin": "Hash Join", "mergejoin": "Merge Join", "nestloop": "Nested Loop",
             "seqscan": "Seq Scan", "indexscan": "Index Scan", "indexonlyscan": "Index Only Scan"}
JOIN_COND_KEY = {"hashjoin": "Hash Cond", "mergejoin": "Merge Cond", "nestloop": "Join Filter"}
PLAN_CLASS_SELECTIVITY = (0.02, 0.08, 0.25, 0.6)
PLAN_SIGNAL_CONSTANT = 500


class InfeasibleSpec(ValueError):
    pass


@dataclass
class SyntheticWorkloadSpec:
    n_tables: int = 6
    n_queries: int = 200
    join_depth: Tuple[int, int] = (2, 3)
    predicate_kinds: Tuple[str, ...] = PRED_KINDS
    n_templates: int = 40
    latency_model: str = "penalty"
    penalty: float = 0.5
    noise_sigma: float = 0.0
    base_ms: Tuple[float, float] = (5.0, 50.0)
    signal: str = "text"
    group: int = 4
    tier_factor: float = 2.5
    step: float = 0.1
    n_classes: int = 4
    data_rows: int = 2000
    buckets: int = 50
    sample_size: int = 128
    seed: int = 1

    def __post_init__(self):
        self.join_depth = tuple(self.join_depth)
        self.base_ms = tuple(self.base_ms)
        self.predicate_kinds = tuple(self.predicate_kinds)
        lo, hi = self.join_depth
        if lo < 1 or hi < lo:
            raise InfeasibleSpec(f"bad join depth range {self.join_depth}")
        if hi > self.n_tables:
            raise InfeasibleSpec(f"join depth {hi} exceeds table count {self.n_tables}")
        if hi > len(ALIASES):
            raise InfeasibleSpec("join depth exceeds alias supply")
        if self.n_queries < 1 or self.n_templates < 1:
            raise InfeasibleSpec("need at least one query and template")
        if self.base_ms[0] <= 0 or self.base_ms[1] < self.base_ms[0]:
            raise InfeasibleSpec("latency base must be positive")
        if self.latency_model not in ("penalty", "planted"):
            raise InfeasibleSpec(f"unknown latency model {self.latency_model}")
        if self.signal not in ("text", "plan"):
            raise InfeasibleSpec(f"unknown signal {self.signal}")
        if not set(self.predicate_kinds) <= set(PRED_KINDS):
            raise InfeasibleSpec(f"unknown predicate kinds {self.predicate_kinds}")
        if self.latency_model == "planted":
            if self.step * (self.group - 1) >= 0.5:
                raise InfeasibleSpec("tier spread must stay below a 1.5x ratio")
            if self.tier_factor / (1 + self.step * (self.group - 1)) <= 1.5:
                raise InfeasibleSpec("tiers must be separated by more than 1.5x")
            if self.signal == "text" and self.n_classes > len(self.predicate_kinds):
                raise InfeasibleSpec("text signal needs one predicate kind per class")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class SyntheticQuery:
    query_id: str
    sql: str
    template: str
    tables: List[str]
    predicate_kind: str
    hidden_class: int
    preference: Tuple[str, str]
    base_ms: float


@dataclass
class SyntheticBundle:
    spec: SyntheticWorkloadSpec
    ddl: str
    queries: List[SyntheticQuery]
    catalog: HintCatalog
    plans: Dict[Tuple[str, str], str]
    latencies: Dict[Tuple[str, str], float]
    stats: Statistics
    class_rankings: List[List[str]] = field(default_factory=list)

    def to_store(self) -> WorkloadStore:
        recs = []
        for q in self.queries:
            cells = {h.hint_id: HintCell(plan_json=self.plans[q.query_id, h.hint_id],
                                         latency_ms=self.latencies[q.query_id, h.hint_id],
                                         raw_ms=[self.latencies[q.query_id, h.hint_id]])
                     for h in self.catalog}
            recs.append(WorkloadRecord(q.query_id, q.sql, None, cells, q.template))
        return WorkloadStore(records=recs)

    def truth(self) -> Dict[str, Any]:
        return {
            "spec": self.spec.to_dict(),
            "class_rankings": self.class_rankings,
            "queries": {q.query_id: {"class": q.hidden_class, "predicate_kind": q.predicate_kind,
                                     "preference": list(q.preference), "base_ms": q.base_ms,
                                     "tables": q.tables}
                        for q in self.queries},
        }

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "schema.sql").write_text(self.ddl)
        self.to_store().save(d / "workload.jsonl")
        self.stats.save(d / "stats.json")
        self.catalog.save(d / "catalog.json")
        (d / "truth.json").write_text(json.dumps(self.truth(), indent=1, sort_keys=True) + "\n")

    def optimal_hint(self, query_id: str) -> str:
        lat = {h: self.latencies[query_id, h] for h in self.catalog.ids}
        best = min(lat.values())
        return next(h for h in self.catalog.ids if lat[h] == best)


# ---------------------------------------------------------------------------

def _table_rows(rng: np.random.Generator, n: int) -> List[Dict[str, Any]]:
    nums = rng.integers(0, 1000, size=n)
    cats = rng.integers(0, 10, size=n)
    words = rng.integers(0, len(WORDS), size=n)
    suffix = rng.integers(0, 100, size=n)
    refs = rng.integers(0, max(n, 1), size=n)
    return [{"id": i, "ref": int(refs[i]), "num": int(nums[i]), "cat": int(cats[i]),
             "txt": f"{WORDS[words[i]]}{suffix[i]:02d}"} for i in range(n)]


def _schema(spec: SyntheticWorkloadSpec, rng: np.random.Generator):
    names = [f"t{i}" for i in range(spec.n_tables)]
    row_counts = {t: float(int(10 ** rng.uniform(3, 6))) for t in names}
    data = {t: _table_rows(rng, spec.data_rows) for t in names}
    stats = Statistics({t: build_table_stats(data[t], row_counts[t], spec.buckets, spec.sample_size, rng)
                        for t in names})
    ddl = "\n".join(
        f"CREATE TABLE {t} (id integer PRIMARY KEY, ref integer, num integer, cat integer, txt text);"
        for t in names) + "\n"
    return names, row_counts, data, stats, ddl


def _predicate(kind: str, alias: str, rng: np.random.Generator, value: Optional[int] = None):
    """(SQL text, EXPLAIN filter text, row predicate)."""
    if kind == "EQ":
        v = int(rng.integers(0, 10))
        return f"{alias}.cat = {v}", f"(cat = {v})", lambda r: r["cat"] == v
    if kind == "RANGE":
        v = int(rng.integers(50, 950)) if value is None else value
        return f"{alias}.num < {v}", f"(num < {v})", lambda r: r["num"] < v
    if kind == "LIKE":
        w = WORDS[int(rng.integers(0, len(WORDS)))]
        return (f"{alias}.txt LIKE '%{w}%'", f"((txt)::text ~~ '%{w}%'::text)",
                lambda r: w in r["txt"])
    vals = sorted(int(x) for x in rng.choice(10, size=3, replace=False))
    lst = ", ".join(map(str, vals))
    return (f"{alias}.cat IN ({lst})", f"(cat = ANY ('{{{','.join(map(str, vals))}}}'::integer[]))",
            lambda r: r["cat"] in vals)


def _pick(order: Sequence[str], h: HintSet, preferred: Optional[str] = None) -> str:
    if preferred is not None and h.enabled(preferred):
        return preferred
    return next(f for f in order if h.enabled(f))


def _plan_doc(q_tables: List[str], aliases: List[str], leaf_rows: List[float],
              filters: List[Optional[str]], row_counts: Mapping[str, float], h: HintSet) -> Tuple[Dict, List[str]]:
    """Left-deep plan under ``h`` plus the operator families it uses."""
    used: List[str] = []
    scan = _pick(SCAN_ORDER, h)
    join = _pick(JOIN_ORDER, h)

    def leaf(i: int) -> Dict[str, Any]:
        used.append(scan)
        rows = leaf_rows[i]
        if scan == "seqscan":
            cost = row_counts[q_tables[i]] * 0.01
        elif scan == "indexscan":
            cost = 4.0 + rows * 0.05
        else:
            cost = 4.0 + rows * 0.03
        node: Dict[str, Any] = {"Node Type": NODE_TYPE[scan], "Relation Name": q_tables[i],
                                "Alias": aliases[i], "Plan Rows": rows, "Total Cost": round(cost, 2)}
        if filters[i]:
            node["Index Cond" if scan != "seqscan" else "Filter"] = filters[i]
        return node

    cur = leaf(0)
    for i in range(1, len(q_tables)):
        right = leaf(i)
        used.append(join)
        l_rows, r_rows = cur["Plan Rows"], right["Plan Rows"]
        rows = max(1.0, round(l_rows * r_rows / max(row_counts[q_tables[i]], 1.0), 0))
        if join == "hashjoin":
            cost = l_rows + 2 * r_rows
        elif join == "mergejoin":
            cost = (l_rows * math.log2(l_rows + 2) + r_rows * math.log2(r_rows + 2)) * 0.1
        else:
            cost = l_rows * r_rows * 0.001
        cost += cur["Total Cost"] + right["Total Cost"]
        cur = {"Node Type": NODE_TYPE[join], "Join Type": "Inner", "Plan Rows": rows,
               "Total Cost": round(cost, 2), JOIN_COND_KEY[join]: f"({aliases[i - 1]}.id = {aliases[i]}.ref)",
               "Plans": [cur, right]}
    root = {"Node Type": "Aggregate", "Plan Rows": 1.0, "Total Cost": round(cur["Total Cost"] + 1.0, 2),
            "Plans": [cur]}
    return {"Plan": root}, used


def planted_levels(n_hints: int, group: int, tier_factor: float, step: float) -> List[float]:
    return [tier_factor ** (r // group) * (1.0 + step * (r % group)) for r in range(n_hints)]


def expected_label_mix(n_hints: int, group: int) -> List[float]:
    """Label shares over ordered pairs implied by the planted tier layout."""
    tiers = [min(group, n_hints - s) for s in range(0, n_hints, group)]
    close = sum(t * (t - 1) for t in tiers)
    total = n_hints * (n_hints - 1)
    far = total - close
    return [far / 2 / total, close / 2 / total, close / 2 / total, far / 2 / total]


def _class_rankings(catalog: HintCatalog, n_classes: int, rng: np.random.Generator) -> List[List[str]]:
    ids = catalog.ids
    if n_classes > len(ids):
        raise InfeasibleSpec("more classes than hints")
    firsts = rng.choice(len(ids), size=n_classes, replace=False)
    out = []
    for c in range(n_classes):
        rest = [i for i in range(len(ids)) if i != firsts[c]]
        order = [int(firsts[c])] + [rest[k] for k in rng.permutation(len(rest))]
        out.append([ids[i] for i in order])
    return out


def generate(spec: SyntheticWorkloadSpec, catalog: Optional[HintCatalog] = None) -> SyntheticBundle:
    """Build schema, queries, per-hint plans, latencies, and statistics from ``spec``."""
    catalog = catalog or default_catalog()
    rng = np.random.default_rng(spec.seed)
    names, row_counts, data, stats, ddl = _schema(spec, rng)
    rankings = _class_rankings(catalog, spec.n_classes, rng) if spec.latency_model == "planted" else []
    levels = planted_levels(len(catalog), spec.group, spec.tier_factor, spec.step)

    lo, hi = spec.join_depth
    templates = []
    for _ in range(spec.n_templates):
        k = int(rng.integers(lo, hi + 1))
        templates.append([names[i] for i in rng.choice(len(names), size=k, replace=False)])

    queries: List[SyntheticQuery] = []
    plans: Dict[Tuple[str, str], str] = {}
    latencies: Dict[Tuple[str, str], float] = {}
    for qi in range(spec.n_queries):
        tpl = int(rng.integers(0, spec.n_templates))
        tables = templates[tpl]
        aliases = list(ALIASES[:len(tables)])
        cls = int(rng.integers(0, spec.n_classes))
        fixed = None
        if spec.latency_model == "planted" and spec.signal == "text":
            kind = spec.predicate_kinds[cls]
        elif spec.latency_model == "planted":
            # identical predicate text for every query: only the row estimate differs
            kind, fixed = "RANGE", PLAN_SIGNAL_CONSTANT
        else:
            kind = spec.predicate_kinds[int(rng.integers(0, len(spec.predicate_kinds)))]
        target = int(rng.integers(0, len(tables)))
        plan_signal = spec.latency_model == "planted" and spec.signal == "plan"
        # the plan-signal variant filters every table, so the class reaches every scan and join
        filtered = range(len(tables)) if plan_signal else [target]
        preds = {i: _predicate(kind, aliases[i], rng, fixed) for i in filtered}
        sql_pred = " AND ".join(preds[i][0] for i in filtered)
        fn = preds[target][2]
        filters: List[Optional[str]] = [preds[i][1] if i in preds else None for i in range(len(tables))]
        leaf_rows = []
        for i, t in enumerate(tables):
            if plan_signal:
                sel = PLAN_CLASS_SELECTIVITY[cls % len(PLAN_CLASS_SELECTIVITY)] * rng.uniform(0.85, 1.15)
                leaf_rows.append(max(1.0, round(row_counts[t] * sel, 0)))
            elif i == target:
                sel = sum(1 for r in data[t] if fn(r)) / len(data[t])
                leaf_rows.append(max(1.0, round(row_counts[t] * sel, 0)))
            else:
                leaf_rows.append(row_counts[t])
        joins = [f"{aliases[i - 1]}.id = {aliases[i]}.ref" for i in range(1, len(tables))]
        where = " AND ".join(joins + [sql_pred])
        from_ = ", ".join(f"{t} AS {a}" for t, a in zip(tables, aliases))
        sql = f"SELECT COUNT(*) FROM {from_} WHERE {where};"
        pref = (JOIN_ORDER[int(rng.integers(0, 3))], SCAN_ORDER[int(rng.integers(0, 3))])
        base = float(rng.uniform(*spec.base_ms))
        qid = f"q{qi:04d}"
        queries.append(SyntheticQuery(qid, sql, f"tpl{tpl:03d}", list(tables), kind, cls, pref, base))
        for h in catalog:
            doc, used = _plan_doc(tables, aliases, leaf_rows, filters, row_counts, h)
            plans[qid, h.hint_id] = json.dumps([doc], sort_keys=True)
            if spec.latency_model == "planted":
                rank = rankings[cls].index(h.hint_id)
                lat = base * levels[rank]
            else:
                miss = sum(1 for f in used if f in JOIN_ORDER and f != pref[0]) + \
                    sum(1 for f in used if f in SCAN_ORDER and f != pref[1])
                lat = base * (1.0 + spec.penalty * miss)
            if spec.noise_sigma > 0:
                lat *= float(np.exp(rng.normal(0.0, spec.noise_sigma)))
            latencies[qid, h.hint_id] = round(lat, 6)
    return SyntheticBundle(spec, ddl, queries, catalog, plans, latencies, stats, rankings)


def plant_separable(spec: Optional[SyntheticWorkloadSpec] = None, **overrides) -> SyntheticBundle:
    """Planted workload whose optimal hint is a function of one visible feature."""
    base = asdict(spec) if spec is not None else {}
    base.update(overrides)
    base["latency_model"] = "planted"
    return generate(SyntheticWorkloadSpec(**base))


def planted_rule(bundle: SyntheticBundle):
    """Hand-coded rule: visible feature -> optimal hint (what a perfect learner recovers)."""
    spec = bundle.spec
    if spec.signal == "text":
        by_kind = {spec.predicate_kinds[c]: bundle.class_rankings[c][0] for c in range(spec.n_classes)}
        return lambda q: by_kind[q.predicate_kind]
    by_sel = {c: bundle.class_rankings[c][0] for c in range(spec.n_classes)}
    return lambda q: by_sel[q.hidden_class]


def hidden_feature(q: SyntheticQuery, spec: SyntheticWorkloadSpec):
    return q.predicate_kind if spec.signal == "text" else q.hidden_class


# ---------------------------------------------------------------------------

class SimulatedDBMS:
    """In-memory stand-in for a DBMS serving the plans and latencies of a bundle.

    Understands the statements the gateway issues: planner-flag SET/RESET,
    statement_timeout, EXPLAIN and EXPLAIN ANALYZE.
    """

    def __init__(self, store: WorkloadStore, catalog: HintCatalog, executions: Optional[list] = None):
        self.catalog = catalog
        self.by_sql = {normalize_sql(r.sql): r for r in store}
        self.toggles = {f: True for f in FAMILIES}
        self.timeout_ms: Optional[float] = None
        self.executions = executions if executions is not None else []

    @classmethod
    def open(cls, directory: str | Path) -> "SimulatedDBMS":
        d = Path(directory)
        return cls(WorkloadStore.load(d / "workload.jsonl"), HintCatalog.load(d / "catalog.json"))

    def close(self) -> None:
        pass

    def _hint_id(self) -> str:
        for h in self.catalog:
            if h.toggle_map == self.toggles:
                return h.hint_id
        raise PlannerError(f"simulated DBMS has no plan for toggles {self.toggles}")

    def execute(self, sql: str) -> List[Dict[str, Any]]:
        s = sql.strip().rstrip(";").strip()
        m = re.match(r"(?i)^SET\s+enable_(\w+)\s+TO\s+(on|off)$", s)
        if m:
            self.toggles[m.group(1)] = m.group(2).lower() == "on"
            return []
        m = re.match(r"(?i)^RESET\s+enable_(\w+)$", s)
        if m:
            self.toggles[m.group(1)] = True
            return []
        m = re.match(r"(?i)^SET\s+statement_timeout\s*=\s*(\d+)$", s)
        if m:
            self.timeout_ms = float(m.group(1))
            return []
        if re.match(r"(?i)^RESET\s+statement_timeout$", s):
            self.timeout_ms = None
            return []
        m = re.match(r"(?i)^EXPLAIN\s+\(([^)]*)\)\s+(.*)$", s, re.DOTALL)
        if not m:
            raise PlannerError(f"simulated DBMS cannot run: {sql[:60]}")
        opts, query = m.group(1).upper(), m.group(2)
        rec = self.by_sql.get(normalize_sql(query))
        if rec is None:
            raise PlannerError("relation does not exist")
        hid = self._hint_id()
        cell = rec.per_hint[hid]
        doc = json.loads(cell.plan_json)
        if "ANALYZE" in opts:
            self.executions.append((rec.query_id, hid))
            lat = cell.latency_ms
            if self.timeout_ms is not None and (cell.timed_out or lat > self.timeout_ms):
                raise StatementTimeout("canceling statement due to statement timeout")
            doc[0]["Execution Time"] = lat
        return [{"QUERY PLAN": doc}]
