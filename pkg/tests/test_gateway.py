import json

import pytest

from hintlm.gateway import (TIMEOUT, GatewayConfig, HintCell, PlannerError, WorkloadRecord,
                            WorkloadStore, collect_latency, collect_plan, collect_workload, connect)
from hintlm.hints import HintCatalog, default_catalog
from hintlm.plan_ir import OperatorKind, parse_explain
from hintlm.synthetic import SimulatedDBMS, SyntheticWorkloadSpec, generate


@pytest.fixture(scope="module")
def bundle():
    return generate(SyntheticWorkloadSpec(n_queries=3, seed=5, noise_sigma=0.0))


@pytest.fixture
def small_catalog():
    c = default_catalog()
    return HintCatalog((c["default"], c["no_hashjoin"], c["no_hashjoin+no_mergejoin"]))


def test_config_validation():
    with pytest.raises(ValueError):
        GatewayConfig("x", statement_timeout_ms=0)
    with pytest.raises(ValueError):
        GatewayConfig("x", repetitions=0)
    assert GatewayConfig("x").statement_timeout_ms == 1_000_000


def test_collect_plan_applies_and_resets_hint(bundle, small_catalog):
    db = SimulatedDBMS(bundle.to_store(), bundle.catalog)
    q = bundle.queries[0]
    plain = collect_plan(db, q.sql, small_catalog[0])
    nl = collect_plan(db, q.sql, small_catalog[2])
    kinds = parse_explain(nl).operator_kinds()
    assert OperatorKind.HashJoin not in kinds and OperatorKind.MergeJoin not in kinds
    assert OperatorKind.NestLoop in kinds
    assert parse_explain(plain).to_ir_json() != parse_explain(nl).to_ir_json()
    # session reset: a fresh unhinted plan equals the all-enabled plan
    assert collect_plan(db, q.sql, small_catalog[0]) == plain
    assert all(db.toggles.values())
    with pytest.raises(PlannerError):
        collect_plan(db, "SELECT * FROM nowhere", small_catalog[0])


def test_collect_latency_median_and_timeout(bundle, small_catalog):
    db = SimulatedDBMS(bundle.to_store(), bundle.catalog)
    q = bundle.queries[0]
    res = collect_latency(db, q.sql, small_catalog[1], GatewayConfig("sim", repetitions=3, warmups=1))
    assert res.raw_ms == [bundle.latencies[q.query_id, "no_hashjoin"]] * 3
    assert res.latency_ms == res.raw_ms[1] and not res.timed_out
    assert len(db.executions) == 4
    res = collect_latency(db, q.sql, small_catalog[1], GatewayConfig("sim", statement_timeout_ms=1))
    assert res.timed_out and res.value == TIMEOUT
    assert db.timeout_ms is None


def test_collect_workload_resume(bundle, small_catalog, tmp_path):
    queries = [(q.query_id, q.sql) for q in bundle.queries[:2]]
    store_path = tmp_path / "w.jsonl"
    executions = []
    src = bundle.to_store()
    make = lambda: SimulatedDBMS(src, bundle.catalog, executions)
    cfg = GatewayConfig("sim", repetitions=1, warmups=0)
    store = WorkloadStore(store_path)
    recs = collect_workload(queries, small_catalog, cfg, make, store)
    assert sum(len(r.per_hint) for r in recs) == 6 and len(executions) == 6
    # drop two cells as if the sweep had been interrupted, then resume
    reloaded = WorkloadStore.load(store_path)
    del reloaded[queries[1][0]].per_hint["no_hashjoin"]
    del reloaded[queries[1][0]].per_hint["no_hashjoin+no_mergejoin"]
    executions.clear()
    collect_workload(queries, small_catalog, cfg, make, reloaded)
    assert len(executions) == 2
    assert WorkloadStore.load(store_path).dumps() == reloaded.dumps()


def test_failures_are_recorded(bundle, small_catalog):
    class Broken(SimulatedDBMS):
        def execute(self, sql):
            if sql.startswith("EXPLAIN (ANALYZE"):
                raise PlannerError("boom")
            return super().execute(sql)

    q = bundle.queries[0]
    recs = collect_workload([(q.query_id, q.sql)], small_catalog, GatewayConfig("sim"),
                            lambda: Broken(bundle.to_store(), bundle.catalog))
    cells = recs[0].per_hint.values()
    assert all(c.error and "boom" in c.error and not c.valid for c in cells)


def test_timeout_cells_round_trip_and_are_invalid():
    cell = HintCell(plan_json="[]", timed_out=True, timeout_ms=100.0)
    d = cell.to_dict()
    assert d["latency_ms"] == TIMEOUT
    again = HintCell.from_dict(d)
    assert again.timed_out and not again.valid and again.effective_latency() == 100.0
    with pytest.raises(ValueError):
        HintCell.from_dict({"plan_json": "[]", "latency_ms": -3})


def test_store_round_trip_byte_identical(bundle, tmp_path):
    store = bundle.to_store()
    store.save(tmp_path / "a.jsonl")
    loaded = WorkloadStore.load(tmp_path / "a.jsonl")
    assert loaded.dumps() == (tmp_path / "a.jsonl").read_text()
    assert [r.to_dict() for r in loaded] == [r.to_dict() for r in store]
    with pytest.raises(ValueError):
        WorkloadStore.loads('{"format": "other"}\n')


def test_connect_sim(bundle, tmp_path):
    bundle.save(tmp_path)
    db = connect(f"sim:{tmp_path}")
    q = bundle.queries[1]
    assert json.loads(collect_plan(db, q.sql, bundle.catalog[0])) == json.loads(
        bundle.plans[q.query_id, "default"])
