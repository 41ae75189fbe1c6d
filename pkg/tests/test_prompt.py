import random

import pytest
from hypothesis import given, settings, strategies as st

from hintlm.plan_ir import linearize, parse_explain
from hintlm.prompt import (BudgetExceeded, MatchingMode, PromptSegment, SegmentKind, UnknownAlias,
                           build_matching_abs, build_matching_rel, compose, compute_position,
                           table_indices, truncate_sentences)
from hintlm.rewriter import ROLE_TEXT
from hintlm.tokenizer import Tokenizer, split, token_count

from conftest import random_tree

SQL = "SELECT COUNT(*) FROM title AS a, cast_info AS b WHERE a.id = b.ref AND b.role = 3;"
HINT = "All join and scan operators are enabled."


def test_tokenizer_basics():
    assert split("Table a's embedding is at 12.") == ["table", "a", "'", "s", "embedding", "is", "at",
                                                        "1", "2", "."]
    tok = Tokenizer.train(["hello world", "hello"])
    assert tok.vocab.index("hello") < tok.vocab.index("world")
    assert tok.encode("hello unknown") == [tok.index["hello"], tok.unk_id]
    assert Tokenizer.from_state(tok.state_dict()).vocab == tok.vocab
    with pytest.raises(ValueError):
        Tokenizer(["a", "b"])


@given(st.text(max_size=60), st.text(max_size=60))
def test_token_count_subadditive(a, b):
    assert token_count(a + b) <= token_count(a) + token_count(b)
    assert token_count(a + " " + b) == token_count(a) + token_count(b)


def test_compute_position_examples():
    assert compute_position(10, 3) == 13
    assert compute_position(0, 0) == 0
    with pytest.raises(ValueError):
        compute_position(-1, 0)


def test_matching_segments():
    seg = build_matching_rel("a", 42)
    assert seg.text == "Table a's embedding is at the position 42."
    text, soft = build_matching_abs("b", 2)
    assert text.text == "Table b's embedding is" and soft.soft_indices == (2,)
    with pytest.raises(UnknownAlias):
        build_matching_abs("c", -1)
    with pytest.raises(ValueError):
        PromptSegment(SegmentKind.TEXT, text=None)


def test_compose_abs_layout(pg_plan):
    tree = parse_explain(pg_plan)
    m = len(linearize(tree))
    tok = Tokenizer.train([ROLE_TEXT, SQL, HINT, "Table a's b's embedding is"])
    p = compose(ROLE_TEXT, SQL, HINT, m, tree, MatchingMode.ABS, tokenizer=tok)
    kinds = [s.kind for s in p.segments]
    assert kinds == [SegmentKind.TEXT] * 3 + [SegmentKind.SOFT] + [SegmentKind.TEXT, SegmentKind.SOFT] * 2
    assert p.segments[3].soft_indices == tuple(range(m))
    # table a is the first leaf (row 1), table b the second (row 2)
    assert p.segments[5].soft_indices == (1,) and p.segments[7].soft_indices == (2,)
    assert len(p.token_ids) == len(p.soft_rows)
    assert "⟨SOFT:0⟩" in p.dump()


def test_compose_ablation_switches(pg_plan):
    tree = parse_explain(pg_plan)
    m = len(linearize(tree))
    p = compose(ROLE_TEXT, SQL, HINT, m, tree, include_hint=False)
    assert all(s.text != HINT for s in p.segments)
    p = compose(ROLE_TEXT, SQL, HINT, m, tree, include_soft=False)
    assert all(s.kind is SegmentKind.TEXT for s in p.segments) and len(p.segments) == 3
    p = compose(ROLE_TEXT, SQL, HINT, m, tree, MatchingMode.NONE)
    assert len(p.segments) == 4
    with pytest.raises(ValueError):
        compose(ROLE_TEXT, SQL, HINT, m + 1, tree)


def test_budget_truncation_and_overflow(pg_plan):
    tree = parse_explain(pg_plan)
    m = len(linearize(tree))
    long_text = " ".join(f"Sentence number {i} talks about table a." for i in range(200))
    p = compose(ROLE_TEXT, long_text, HINT, m, tree, MatchingMode.REL, budget=200)
    total = sum(token_count(s.text) if s.kind is SegmentKind.TEXT else len(s.soft_indices)
                for s in p.segments)
    assert total <= 200
    assert p.segments[1].text.startswith("Sentence number 0")
    with pytest.raises(BudgetExceeded):
        compose(ROLE_TEXT, SQL, HINT, m, tree, budget=10)


def test_truncate_sentences():
    assert truncate_sentences("One two. Three four.", 3) == "One two."
    assert truncate_sentences("short", 10) == "short"


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_rel_positions_match_realized_slots(seed):
    r = random.Random(seed)
    tree = random_tree(r)
    sql = " ".join(r.choice(["select", "a.x", "=", "3", "and", "(", ")", "join", "x0"])
                   for _ in range(r.randint(1, 40)))
    tok = Tokenizer.train([ROLE_TEXT, HINT])
    p = compose(ROLE_TEXT, sql, HINT, len(linearize(tree)), tree, MatchingMode.REL, tokenizer=tok)
    start = p.soft_rows.index(0)
    for alias, idx in table_indices(tree).items():
        assert p.table_positions[alias] == start + idx
        assert p.soft_rows[p.table_positions[alias]] == idx
