"""Mixed text / soft-embedding prompt assembly."""
from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

from .plan_ir import PlanTree, linearize
from .tokenizer import Tokenizer, token_count

log = logging.getLogger(__name__)

DEFAULT_BUDGET = 1024


class BudgetExceeded(ValueError):
    pass


class UnknownAlias(KeyError):
    pass


class MatchingMode(str, enum.Enum):
    NONE = "NONE"
    REL = "REL"
    ABS = "ABS"


class SegmentKind(str, enum.Enum):
    TEXT = "TEXT"
    SOFT = "SOFT"


@dataclass(frozen=True)
class PromptSegment:
    kind: SegmentKind
    text: Optional[str] = None
    soft_indices: Optional[tuple] = None

    def __post_init__(self):
        if self.kind is SegmentKind.TEXT and (self.text is None or self.soft_indices is not None):
            raise ValueError("TEXT segment needs text and no soft indices")
        if self.kind is SegmentKind.SOFT and (self.soft_indices is None or self.text is not None):
            raise ValueError("SOFT segment needs soft indices and no text")

    @classmethod
    def of_text(cls, text: str) -> "PromptSegment":
        return cls(SegmentKind.TEXT, text=text)

    @classmethod
    def of_soft(cls, indices: Sequence[int]) -> "PromptSegment":
        return cls(SegmentKind.SOFT, soft_indices=tuple(int(i) for i in indices))


@dataclass
class ComposedPrompt:
    segments: List[PromptSegment]
    token_budget: int
    table_positions: Dict[str, int] = field(default_factory=dict)
    # realized layout, one entry per sequence position:
    # token_ids[k] >= 0 for text tokens (soft_rows[k] == -1) and vice versa
    token_ids: List[int] = field(default_factory=list)
    soft_rows: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.token_ids)

    def realize(self, tokenizer: Tokenizer) -> None:
        ids: List[int] = []
        rows: List[int] = []
        for seg in self.segments:
            if seg.kind is SegmentKind.TEXT:
                toks = tokenizer.encode(seg.text)
                ids.extend(toks)
                rows.extend([-1] * len(toks))
            else:
                ids.extend([-1] * len(seg.soft_indices))
                rows.extend(seg.soft_indices)
        self.token_ids, self.soft_rows = ids, rows

    def dump(self) -> str:
        """Human-readable rendering; soft slots appear as ⟨SOFT:k⟩."""
        parts = []
        for seg in self.segments:
            if seg.kind is SegmentKind.TEXT:
                parts.append(seg.text)
            else:
                parts.append(" ".join(f"⟨SOFT:{k}⟩" for k in seg.soft_indices))
        return "\n".join(parts)


def compute_position(length: int, idx: int) -> int:
    """Absolute index of a table's soft slot: text length before the plan plus its plan index."""
    if length < 0 or idx < 0:
        raise ValueError("length and idx must be non-negative")
    return length + idx


def build_matching_rel(alias: str, p: int) -> PromptSegment:
    return PromptSegment.of_text(f"Table {alias}'s embedding is at the position {p}.")


def build_matching_abs(alias: str, emb_index: int) -> List[PromptSegment]:
    if emb_index < 0:
        raise UnknownAlias(alias)
    return [PromptSegment.of_text(f"Table {alias}'s embedding is"),
            PromptSegment.of_soft([emb_index])]


def table_indices(tree: PlanTree) -> Dict[str, int]:
    """Leaf alias -> row index in the linearized plan (first occurrence wins)."""
    order = linearize(tree)
    out: Dict[str, int] = {}
    for idx, nid in enumerate(order):
        if nid < 0:
            continue
        node = tree.nodes[nid]
        if node.is_leaf and node.table_alias and not node.table_alias.startswith("_"):
            out.setdefault(node.table_alias, idx)
    return out


_SENTENCE = re.compile(r"(?<=[.!?;])\s+")


def truncate_sentences(text: str, max_tokens: int) -> str:
    """Drop trailing sentences until ``text`` fits in ``max_tokens``."""
    if token_count(text) <= max_tokens:
        return text
    sentences = _SENTENCE.split(text.strip())
    while sentences and token_count(" ".join(sentences)) > max_tokens:
        sentences.pop()
    return " ".join(sentences)


def compose(role: str, sql_or_nl: str, hint_text: str, plan_soft, tree: PlanTree,
            mode: MatchingMode = MatchingMode.ABS, *, tokenizer: Optional[Tokenizer] = None,
            budget: int = DEFAULT_BUDGET, include_sql: bool = True, include_hint: bool = True,
            include_soft: bool = True) -> ComposedPrompt:
    """Assemble [role][sql][hint][plan soft rows][matching...].

    ``plan_soft`` is the projected plan matrix (or just its row count). The
    ``include_*`` switches drop a part for ablations; dropping the soft
    prompt also drops the matching segments, which only refer to it.
    """
    mode = MatchingMode(mode)
    plan_rows = plan_soft if isinstance(plan_soft, int) else len(plan_soft)
    m = len(linearize(tree))
    if plan_rows != m:
        raise ValueError(f"plan soft prompt has {plan_rows} rows, tree linearizes to {m}")
    tables = table_indices(tree)

    def matching_cost(prefix_len: int) -> int:
        if not include_soft or mode is MatchingMode.NONE:
            return 0
        if mode is MatchingMode.ABS:
            return sum(token_count(f"Table {a}'s embedding is") + 1 for a in tables)
        return sum(token_count(build_matching_rel(a, compute_position(prefix_len, i)).text)
                   for a, i in tables.items())

    fixed = token_count(role) + (token_count(hint_text) if include_hint else 0)
    soft = m if include_soft else 0
    sql = sql_or_nl if include_sql else None
    if sql is not None:
        # position digits in REL text depend on the prefix length; iterate to a fixed point
        room = budget - fixed - soft - matching_cost(fixed + token_count(sql))
        if token_count(sql) > room:
            log.warning("prompt over budget; truncating SQL text to %d tokens", max(room, 0))
            sql = truncate_sentences(sql, max(room, 0))
            for _ in range(3):
                room = budget - fixed - soft - matching_cost(fixed + token_count(sql))
                sql = truncate_sentences(sql, max(room, 0))
    segments = [PromptSegment.of_text(role)]
    if sql is not None:
        segments.append(PromptSegment.of_text(sql))
    if include_hint:
        segments.append(PromptSegment.of_text(hint_text))
    prefix_len = sum(token_count(s.text) for s in segments)
    positions: Dict[str, int] = {}
    if include_soft:
        segments.append(PromptSegment.of_soft(range(m)))
        if mode is MatchingMode.REL:
            for alias, idx in tables.items():
                positions[alias] = compute_position(prefix_len, idx)
                segments.append(build_matching_rel(alias, positions[alias]))
        elif mode is MatchingMode.ABS:
            for alias, idx in tables.items():
                positions[alias] = compute_position(prefix_len, idx)
                segments.extend(build_matching_abs(alias, idx))
    prompt = ComposedPrompt(segments, budget, positions)
    total = sum(token_count(s.text) if s.kind is SegmentKind.TEXT else len(s.soft_indices)
                for s in segments)
    if total > budget:
        raise BudgetExceeded(f"prompt needs {total} positions, budget {budget}")
    if tokenizer is not None:
        prompt.realize(tokenizer)
    return prompt
