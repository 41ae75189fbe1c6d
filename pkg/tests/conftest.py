import json
import random

import numpy as np
import pytest
import torch

from hintlm.plan_ir import OperatorKind, PlanNode, PlanTree

torch.set_num_threads(1)

# A hand-written EXPLAIN (FORMAT JSON) document with a bitmap scan and a filter.
PG_PLAN = [{
    "Plan": {
        "Node Type": "Aggregate", "Startup Cost": 10.0, "Total Cost": 250.5, "Plan Rows": 1,
        "Plans": [{
            "Node Type": "Hash Join", "Total Cost": 240.0, "Plan Rows": 120,
            "Hash Cond": "(a.id = b.ref)",
            "Plans": [
                {"Node Type": "Seq Scan", "Relation Name": "title", "Alias": "a",
                 "Total Cost": 100.0, "Plan Rows": 1000, "Filter": "(a.year > 2000)"},
                {"Node Type": "Hash", "Total Cost": 50.0, "Plan Rows": 40,
                 "Plans": [{
                     "Node Type": "Bitmap Heap Scan", "Relation Name": "cast_info", "Alias": "b",
                     "Total Cost": 45.0, "Plan Rows": 40, "Recheck Cond": "(b.role = 3)",
                     "Plans": [{"Node Type": "Bitmap Index Scan", "Index Name": "ix_role",
                                "Total Cost": 4.0, "Plan Rows": 40, "Index Cond": "(b.role = 3)"}],
                 }]},
            ],
        }],
    },
    "Execution Time": 12.5,
}]


@pytest.fixture
def pg_plan():
    return json.loads(json.dumps(PG_PLAN))


def random_tree(rng: random.Random, n_internal: int | None = None, max_leaves: int = 8) -> PlanTree:
    """Random binary/unary plan tree with scan leaves."""
    n_leaves = rng.randint(1, max_leaves)
    nodes = {}
    next_id = [0]

    def new(kind, alias=None, children=()):
        nid = next_id[0]
        next_id[0] += 1
        nodes[nid] = PlanNode(nid, kind, est_rows=rng.uniform(1, 1e5), est_cost=rng.uniform(1, 1e5),
                              table_alias=alias, relation=f"t{nid % 3}" if alias else None,
                              children=list(children))
        return nid

    frontier = [new(OperatorKind.SeqScan, alias=f"x{i}") for i in range(n_leaves)]
    while len(frontier) > 1 or rng.random() < 0.2:
        if len(frontier) > 1 and rng.random() < 0.8:
            i = rng.randrange(len(frontier) - 1)
            a, b = frontier[i], frontier[i + 1]
            frontier[i:i + 2] = [new(rng.choice([OperatorKind.HashJoin, OperatorKind.NestLoop,
                                                   OperatorKind.MergeJoin]), children=[a, b])]
        else:
            i = rng.randrange(len(frontier))
            frontier[i] = new(rng.choice([OperatorKind.Sort, OperatorKind.Aggregate]), children=[frontier[i]])
    return PlanTree(frontier[0], nodes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report lines, filled by tests/test_acceptance.py
CRITERIA: dict = {}


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
