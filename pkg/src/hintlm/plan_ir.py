"""Typed execution-plan trees parsed from PostgreSQL ``EXPLAIN (FORMAT JSON)``."""
from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Any, Dict, List, Mapping, Optional

SUPER = -1  # linearize() marker for the super-node slot


class MalformedPlan(ValueError):
    pass


class UnsupportedShape(ValueError):
    pass


class OperatorKind(str, enum.Enum):
    SeqScan = "SeqScan"
    IndexScan = "IndexScan"
    IndexOnlyScan = "IndexOnlyScan"
    NestLoop = "NestLoop"
    HashJoin = "HashJoin"
    MergeJoin = "MergeJoin"
    Sort = "Sort"
    Aggregate = "Aggregate"
    Materialize = "Materialize"
    Other = "Other"


OPERATOR_KINDS: List[OperatorKind] = list(OperatorKind)

# Canonical DBMS node names used when serializing nodes that carry no raw name.
CANONICAL_NODE_TYPE = {
    OperatorKind.SeqScan: "Seq Scan",
    OperatorKind.IndexScan: "Index Scan",
    OperatorKind.IndexOnlyScan: "Index Only Scan",
    OperatorKind.NestLoop: "Nested Loop",
    OperatorKind.HashJoin: "Hash Join",
    OperatorKind.MergeJoin: "Merge Join",
    OperatorKind.Sort: "Sort",
    OperatorKind.Aggregate: "Aggregate",
    OperatorKind.Materialize: "Materialize",
    OperatorKind.Other: "Other",
}


class PredOp(str, enum.Enum):
    EQ = "EQ"
    NEQ = "NEQ"
    LT = "LT"
    LE = "LE"
    GT = "GT"
    GE = "GE"
    LIKE = "LIKE"
    IN = "IN"
    OTHER = "OTHER"


class OperandKind(str, enum.Enum):
    CONSTANT = "CONSTANT"
    COLUMN = "COLUMN"
    STRING_PATTERN = "STRING_PATTERN"
    VALUE_LIST = "VALUE_LIST"
    OTHER = "OTHER"


@lru_cache(maxsize=None)
def operator_table() -> Dict[str, OperatorKind]:
    """DBMS node-type name -> operator enum, loaded from the shipped data file."""
    raw = json.loads(resources.files("hintlm.data").joinpath("operators.json").read_text())
    return {name: OperatorKind(kind) for name, kind in raw["operators"].items()}


def normalize_operator(node_type: str) -> OperatorKind:
    return operator_table().get(node_type, OperatorKind.Other)


@dataclass(frozen=True)
class PredicateExpr:
    column: str
    op: PredOp
    operand_kind: OperandKind
    operand_text: str
    est_selectivity: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.est_selectivity <= 1.0:
            raise ValueError(f"est_selectivity out of [0,1]: {self.est_selectivity}")
        if self.operand_kind is not OperandKind.OTHER and not self.operand_text:
            raise ValueError("operand_text must be non-empty")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "column": self.column,
            "op": self.op.value,
            "operand_kind": self.operand_kind.value,
            "operand_text": self.operand_text,
            "est_selectivity": self.est_selectivity,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PredicateExpr":
        return cls(d["column"], PredOp(d["op"]), OperandKind(d["operand_kind"]),
                   d["operand_text"], float(d["est_selectivity"]))


@dataclass
class PlanNode:
    node_id: int
    operator_kind: OperatorKind
    est_rows: float
    est_cost: float
    table_alias: Optional[str] = None
    relation: Optional[str] = None
    actual_ms: Optional[float] = None
    predicates: List[PredicateExpr] = field(default_factory=list)
    children: List[int] = field(default_factory=list)
    node_type: str = ""

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def to_dict(self) -> Dict[str, Any]:
        return {
            "node_id": self.node_id,
            "operator_kind": self.operator_kind.value,
            "node_type": self.node_type,
            "table_alias": self.table_alias,
            "relation": self.relation,
            "est_rows": self.est_rows,
            "est_cost": self.est_cost,
            "actual_ms": self.actual_ms,
            "predicates": [p.to_dict() for p in self.predicates],
            "children": list(self.children),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PlanNode":
        return cls(
            node_id=int(d["node_id"]),
            operator_kind=OperatorKind(d["operator_kind"]),
            node_type=d.get("node_type", ""),
            table_alias=d.get("table_alias"),
            relation=d.get("relation"),
            est_rows=float(d["est_rows"]),
            est_cost=float(d["est_cost"]),
            actual_ms=d.get("actual_ms"),
            predicates=[PredicateExpr.from_dict(p) for p in d.get("predicates", [])],
            children=[int(c) for c in d.get("children", [])],
        )


@dataclass
class PlanTree:
    root_id: int
    nodes: Dict[int, PlanNode]
    query_id: str = ""
    hint_id: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.root_id not in self.nodes:
            raise MalformedPlan("root id not among nodes")
        parents: Dict[int, int] = {}
        for nid, node in self.nodes.items():
            if node.est_rows < 0 or node.est_cost < 0:
                raise MalformedPlan(f"node {nid}: negative estimate")
            if node.is_leaf and not node.table_alias:
                raise MalformedPlan(f"leaf node {nid} has no table alias")
            for c in node.children:
                if c not in self.nodes:
                    raise MalformedPlan(f"node {nid}: unknown child {c}")
                if c in parents:
                    raise MalformedPlan(f"node {c} has two parents")
                parents[c] = nid
        if self.root_id in parents:
            raise MalformedPlan("root has a parent")
        if len(parents) != len(self.nodes) - 1:
            raise MalformedPlan("plan graph is not a single tree")
        # reachability rules out cycles disconnected from the root
        seen = set()
        stack = [self.root_id]
        while stack:
            n = stack.pop()
            if n in seen:
                raise MalformedPlan("cycle in plan graph")
            seen.add(n)
            stack.extend(self.nodes[n].children)
        if len(seen) != len(self.nodes):
            raise MalformedPlan("unreachable nodes in plan graph")

    @property
    def root(self) -> PlanNode:
        return self.nodes[self.root_id]

    def leaves(self) -> List[PlanNode]:
        """Leaves in left-to-right depth-first order."""
        out: List[PlanNode] = []

        def visit(nid: int) -> None:
            node = self.nodes[nid]
            if node.is_leaf:
                out.append(node)
            for c in node.children:
                visit(c)

        visit(self.root_id)
        return out

    def parent_map(self) -> Dict[int, int]:
        return {c: nid for nid, n in self.nodes.items() for c in n.children}

    def descendants(self, nid: int) -> set:
        out = set()
        stack = list(self.nodes[nid].children)
        while stack:
            c = stack.pop()
            out.add(c)
            stack.extend(self.nodes[c].children)
        return out

    def heights(self) -> Dict[int, int]:
        """Distance from each node to its deepest descendant leaf."""
        h: Dict[int, int] = {}

        def visit(nid: int) -> int:
            kids = self.nodes[nid].children
            h[nid] = 0 if not kids else 1 + max(visit(c) for c in kids)
            return h[nid]

        visit(self.root_id)
        return h

    def operator_kinds(self) -> set:
        return {n.operator_kind for n in self.nodes.values()}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "query_id": self.query_id,
            "hint_id": self.hint_id,
            "root_id": self.root_id,
            "nodes": [self.nodes[k].to_dict() for k in sorted(self.nodes)],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PlanTree":
        nodes = {int(n["node_id"]): PlanNode.from_dict(n) for n in d["nodes"]}
        return cls(root_id=int(d["root_id"]), nodes=nodes,
                   query_id=d.get("query_id", ""), hint_id=d.get("hint_id", ""))

    def to_ir_json(self) -> str:
        """Canonical plan-IR JSON (sorted keys, compact)."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_ir_json(cls, text: str) -> "PlanTree":
        return cls.from_dict(json.loads(text))


def linearize(tree: PlanTree) -> List[int]:
    """Soft-prompt order: super slot, leaves (left-to-right DFS), internals (post-order)."""
    internals: List[int] = []

    def post(nid: int) -> None:
        node = tree.nodes[nid]
        for c in node.children:
            post(c)
        if not node.is_leaf:
            internals.append(nid)

    post(tree.root_id)
    return [SUPER] + [leaf.node_id for leaf in tree.leaves()] + internals


# ---------------------------------------------------------------------------
# predicate parsing

_CMP_OPS = [
    ("!~~*", PredOp.OTHER), ("!~~", PredOp.OTHER), ("~~*", PredOp.LIKE), ("~~", PredOp.LIKE),
    ("<>", PredOp.NEQ), ("!=", PredOp.NEQ), ("<=", PredOp.LE), (">=", PredOp.GE),
    ("=", PredOp.EQ), ("<", PredOp.LT), (">", PredOp.GT),
]
_CAST = re.compile(r"::[\w ]+(\[\])?")
_NUMBER = re.compile(r"^-?\d+(\.\d+)?([eE][-+]?\d+)?$")
_IDENT = re.compile(r"^[A-Za-z_][\w$]*(\.[A-Za-z_][\w$]*)?$")
_OP_SYMBOL = {PredOp.EQ: "=", PredOp.NEQ: "<>", PredOp.LT: "<", PredOp.LE: "<=",
              PredOp.GT: ">", PredOp.GE: ">=", PredOp.LIKE: "~~"}


def _strip_parens(s: str) -> str:
    s = s.strip()
    while s.startswith("(") and s.endswith(")") and _balanced(s[1:-1]):
        s = s[1:-1].strip()
    return s


def _balanced(s: str) -> bool:
    depth = 0
    quote = False
    for ch in s:
        if ch == "'":
            quote = not quote
        elif not quote:
            if ch == "(":
                depth += 1
            elif ch == ")":
                depth -= 1
                if depth < 0:
                    return False
    return depth == 0


def _split_top(s: str, word: str) -> List[str]:
    parts, depth, quote, start, i = [], 0, False, 0, 0
    token = f" {word} "
    while i < len(s):
        ch = s[i]
        if ch == "'":
            quote = not quote
        elif not quote:
            if ch == "(":
                depth += 1
            elif ch == ")":
                depth -= 1
            elif depth == 0 and s.startswith(token, i):
                parts.append(s[start:i])
                i += len(token)
                start = i
                continue
        i += 1
    parts.append(s[start:])
    return parts


def _clean_column(s: str) -> str:
    s = _CAST.sub("", s)
    s = s.replace("(", "").replace(")", "").replace('"', "").strip()
    return s


def _find_op(atom: str):
    depth, quote = 0, False
    for i, ch in enumerate(atom):
        if ch == "'":
            quote = not quote
        elif not quote:
            if ch == "(":
                depth += 1
            elif ch == ")":
                depth -= 1
            elif depth <= 1:
                for sym, op in _CMP_OPS:
                    if atom.startswith(sym, i):
                        return i, sym, op
    return None


def parse_condition(cond: str, selectivity: float = 1.0) -> List[PredicateExpr]:
    """Split a DBMS condition string into conjunctive predicates."""
    cond = _strip_parens(cond)
    if not cond:
        return []
    conjuncts = _split_top(cond, "AND")
    if len(conjuncts) > 1:
        out: List[PredicateExpr] = []
        for c in conjuncts:
            out.extend(parse_condition(c, selectivity))
        return out
    atom = cond
    if len(_split_top(atom, "OR")) > 1:
        return [PredicateExpr("", PredOp.OTHER, OperandKind.OTHER, atom, selectivity)]
    found = _find_op(atom)
    if found is None:
        return [PredicateExpr("", PredOp.OTHER, OperandKind.OTHER, atom, selectivity)]
    i, sym, op = found
    column = _clean_column(atom[:i])
    rhs = _strip_parens(atom[i + len(sym):].strip())
    if rhs.upper().startswith("ANY"):
        values = re.search(r"\{(.*)\}", rhs)
        text = values.group(1) if values else rhs
        kind = OperandKind.VALUE_LIST
        op = PredOp.IN if op is PredOp.EQ else PredOp.OTHER
    else:
        literal = re.match(r"^'((?:[^']|'')*)'", rhs)
        bare = _clean_column(rhs)
        if literal:
            text = literal.group(1).replace("''", "'")
            kind = OperandKind.STRING_PATTERN if op is PredOp.LIKE else OperandKind.CONSTANT
        elif _NUMBER.match(bare):
            text, kind = bare, OperandKind.CONSTANT
        elif _IDENT.match(bare):
            text, kind = bare, OperandKind.COLUMN
        else:
            text, kind = rhs, OperandKind.OTHER
    if op is PredOp.OTHER or kind is OperandKind.OTHER or not text or not column:
        return [PredicateExpr("", PredOp.OTHER, OperandKind.OTHER, atom, selectivity)]
    return [PredicateExpr(column, op, kind, text, selectivity)]


def render_predicates(preds: List[PredicateExpr]) -> str:
    """Inverse of parse_condition for the forms it produces."""
    parts = []
    for p in preds:
        if p.op is PredOp.OTHER:
            parts.append(f"({p.operand_text})")
        elif p.op is PredOp.IN:
            parts.append(f"({p.column} = ANY ('{{{p.operand_text}}}'))")
        elif p.operand_kind is OperandKind.COLUMN or (
                p.operand_kind is OperandKind.CONSTANT and _NUMBER.match(p.operand_text)):
            parts.append(f"({p.column} {_OP_SYMBOL[p.op]} {p.operand_text})")
        else:
            quoted = p.operand_text.replace("'", "''")
            parts.append(f"({p.column} {_OP_SYMBOL[p.op]} '{quoted}')")
    if len(parts) == 1:
        return parts[0]
    return "(" + " AND ".join(parts) + ")"


# ---------------------------------------------------------------------------
# EXPLAIN parsing

_CONDITION_KEYS = ("Filter", "Index Cond", "Recheck Cond", "Hash Cond", "Merge Cond", "Join Filter")
_BITMAP_CHILDREN = {"Bitmap Index Scan", "BitmapAnd", "BitmapOr"}


def _unwrap(doc: Any) -> Mapping[str, Any]:
    if isinstance(doc, list):
        if not doc:
            raise MalformedPlan("empty plan document")
        doc = doc[0]
    if not isinstance(doc, dict):
        raise MalformedPlan("plan document is not an object")
    if "Plan" in doc:
        doc = doc["Plan"]
    if not isinstance(doc, dict) or "Node Type" not in doc:
        raise MalformedPlan("missing root plan node")
    return doc


def parse_explain(explain_json: str | Mapping | list, *, strict: bool = False,
                  query_id: str = "", hint_id: str = "",
                  relation_rows: Optional[Mapping[str, float]] = None) -> PlanTree:
    """Parse a PostgreSQL JSON plan document.

    Nodes with more than two children are folded into a right-leaning chain of
    binary ``Other`` nodes unless ``strict`` is set, in which case
    :class:`UnsupportedShape` is raised. ``relation_rows`` (relation name ->
    row count) lets scan predicates get a selectivity estimate; without it they
    default to 1.0.
    """
    if isinstance(explain_json, (str, bytes)):
        try:
            doc = json.loads(explain_json)
        except json.JSONDecodeError as exc:
            raise MalformedPlan(f"invalid JSON: {exc}") from exc
    else:
        doc = explain_json
    root = _unwrap(doc)
    nodes: Dict[int, PlanNode] = {}
    counter = [0]

    def new_id() -> int:
        counter[0] += 1
        return counter[0] - 1

    def build(raw: Mapping[str, Any]) -> int:
        if not isinstance(raw, dict) or "Node Type" not in raw:
            raise MalformedPlan("plan node without 'Node Type'")
        nid = new_id()
        node_type = raw["Node Type"]
        kids_raw = list(raw.get("Plans", []))
        conds = [raw[k] for k in _CONDITION_KEYS if raw.get(k)]
        if node_type == "Bitmap Heap Scan":
            absorbed = [k for k in kids_raw if k.get("Node Type") in _BITMAP_CHILDREN]
            kids_raw = [k for k in kids_raw if k.get("Node Type") not in _BITMAP_CHILDREN]
            stack = list(absorbed)
            while stack:
                b = stack.pop(0)
                if b.get("Index Cond"):
                    conds.append(b["Index Cond"])
                stack.extend(b.get("Plans", []))
        try:
            est_rows = float(raw.get("Plan Rows", 0.0))
            est_cost = float(raw.get("Total Cost", 0.0))
        except (TypeError, ValueError) as exc:
            raise MalformedPlan(f"non-numeric estimate in {node_type}") from exc
        actual = raw.get("Actual Total Time")
        if actual is not None:
            loops = raw.get("Actual Loops", 1) or 1
            actual = float(actual) * float(loops) if loops != 1 else float(actual)
        alias = raw.get("Alias") or raw.get("Relation Name")
        node = PlanNode(
            node_id=nid,
            operator_kind=normalize_operator(node_type),
            node_type=node_type,
            table_alias=alias,
            relation=raw.get("Relation Name"),
            est_rows=est_rows,
            est_cost=est_cost,
            actual_ms=actual,
        )
        nodes[nid] = node
        if len(kids_raw) > 2 and strict:
            raise UnsupportedShape(f"{node_type} has {len(kids_raw)} children")
        if len(kids_raw) > 2:
            node.children = [build(kids_raw[0]), _chain(kids_raw[1:])]
        else:
            node.children = [build(k) for k in kids_raw]
        if not node.children and not node.table_alias:
            node.table_alias = f"_{node_type.lower().replace(' ', '_')}{nid}"
        node.predicates = []
        sel = _selectivity(node, raw, relation_rows)
        for c in conds:
            node.predicates.extend(parse_condition(c, sel))
        return nid

    def _chain(rest: List[Mapping[str, Any]]) -> int:
        nid = new_id()
        node = PlanNode(node_id=nid, operator_kind=OperatorKind.Other, node_type="Other",
                        est_rows=0.0, est_cost=0.0)
        nodes[nid] = node
        if len(rest) == 2:
            node.children = [build(rest[0]), build(rest[1])]
        else:
            node.children = [build(rest[0]), _chain(rest[1:])]
        node.est_rows = sum(nodes[c].est_rows for c in node.children)
        node.est_cost = sum(nodes[c].est_cost for c in node.children)
        return nid

    def _selectivity(node: PlanNode, raw: Mapping[str, Any],
                     rel_rows: Optional[Mapping[str, float]]) -> float:
        base = None
        if node.children:
            base = max(nodes[c].est_rows for c in node.children)
        elif rel_rows and node.relation in rel_rows:
            base = rel_rows[node.relation]
        if not base:
            return 1.0
        return min(1.0, max(0.0, node.est_rows / base))

    root_id = build(root)
    return PlanTree(root_id=root_id, nodes=nodes, query_id=query_id, hint_id=hint_id)


def to_explain(tree: PlanTree) -> List[Dict[str, Any]]:
    """Serialize a tree back into an EXPLAIN-style document.

    Only the fields parse_explain reads are emitted; parse_explain(to_explain(t))
    reproduces ``t`` on those fields.
    """

    def emit(nid: int) -> Dict[str, Any]:
        n = tree.nodes[nid]
        out: Dict[str, Any] = {
            "Node Type": n.node_type or CANONICAL_NODE_TYPE[n.operator_kind],
            "Plan Rows": n.est_rows,
            "Total Cost": n.est_cost,
        }
        if n.relation:
            out["Relation Name"] = n.relation
        if n.table_alias and not n.table_alias.startswith("_"):
            out["Alias"] = n.table_alias
        if n.actual_ms is not None:
            out["Actual Total Time"] = n.actual_ms
        if n.predicates:
            key = "Filter" if n.is_leaf else "Join Filter"
            out[key] = render_predicates(n.predicates)
        if n.children:
            out["Plans"] = [emit(c) for c in n.children]
        return out

    return [{"Plan": emit(tree.root_id)}]
