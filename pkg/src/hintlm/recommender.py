"""Round-robin hint recommendation and workload-level metrics."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .comparator import ground_truth_label
from .gateway import WorkloadRecord
from .hints import HintCatalog
from .model import HintModel, ModelError, PreparedPlan
from .stats import Statistics

log = logging.getLogger(__name__)

PairLabeler = Callable[[Sequence[Tuple[str, str]]], Sequence[int]]


@dataclass
class ScoreBoard:
    scores: Dict[str, int] = field(default_factory=dict)
    pairs_evaluated: int = 0

    def add(self, h0: str, h1: str, s: int) -> None:
        if not 0 <= s <= 3:
            raise ValueError(f"label out of range: {s}")
        self.scores[h0] = self.scores.get(h0, 0) + s
        self.scores[h1] = self.scores.get(h1, 0) + 4 - s
        self.pairs_evaluated += 1

    @property
    def total(self) -> int:
        return sum(self.scores.values())

    def winner(self, order: Sequence[str]) -> str:
        """Highest score; ties go to the earliest id in ``order``."""
        best, best_s = None, -1
        for h in order:
            s = self.scores.get(h, -1)
            if s > best_s:
                best, best_s = h, s
        if best is None:
            raise ValueError("empty scoreboard")
        return best


def tournament(hint_ids: Sequence[str], labeler: PairLabeler) -> ScoreBoard:
    """Score every ordered pair of distinct hints with ``labeler`` and accumulate."""
    board = ScoreBoard({h: 0 for h in hint_ids})
    pairs = [(a, b) for a in hint_ids for b in hint_ids if a != b]
    if pairs:
        for (a, b), s in zip(pairs, labeler(pairs)):
            board.add(a, b, int(s))
    return board


def latency_labeler(latencies: Mapping[str, float]) -> PairLabeler:
    """Labels computed from measured latencies (the ground-truth comparator)."""
    return lambda pairs: [ground_truth_label(latencies[a], latencies[b]) for a, b in pairs]


def model_labeler(model: HintModel, plans: Mapping[str, PreparedPlan]) -> PairLabeler:
    """Labels from the trained model; each plan is embedded once per query."""

    def label(pairs: Sequence[Tuple[str, str]]) -> List[int]:
        ids = list(plans)
        pos = {h: i for i, h in enumerate(ids)}
        was_training = model.training
        model.eval()
        with torch.no_grad():
            emb = model.embed([plans[h] for h in ids])
            i0 = torch.tensor([pos[a] for a, _ in pairs])
            i1 = torch.tensor([pos[b] for _, b in pairs])
            out = model.comparator.logits(emb[i0], emb[i1], hard=True).argmax(-1).tolist()
        model.train(was_training)
        return out

    return label


def prepare_plans(model: HintModel, rec: WorkloadRecord, catalog: HintCatalog,
                  stats: Statistics) -> Dict[str, PreparedPlan]:
    """Prepared plans in catalog order; hints whose plan is missing or unusable are dropped."""
    out: Dict[str, PreparedPlan] = {}
    for h in catalog:
        try:
            out[h.hint_id] = model.prepare(rec, h, stats)
        except (ModelError, ValueError) as exc:
            log.warning("dropping hint %s for %s: %s", h.hint_id, rec.query_id, exc)
    return out


def recommend(rec: WorkloadRecord, catalog: HintCatalog, model: Optional[HintModel] = None,
              stats: Optional[Statistics] = None, labeler: Optional[PairLabeler] = None,
              return_board: bool = False):
    """Recommend a hint for one query by round-robin pairwise comparison.

    ``labeler`` overrides the model (e.g. with ``latency_labeler``).
    """
    if labeler is None:
        if model is None or stats is None:
            raise ValueError("need either a labeler or a model with statistics")
        plans = prepare_plans(model, rec, catalog, stats)
        ids = list(plans)
        labeler = model_labeler(model, plans)
    else:
        ids = [h for h in catalog.ids if h in rec.per_hint and rec.per_hint[h].plan_json is not None] \
            if rec.per_hint else list(catalog.ids)
    if not ids:
        raise ModelError(f"no usable plans for {rec.query_id}")
    board = tournament(ids, labeler)
    best = board.winner(ids)
    return (best, board) if return_board else best


def recommend_from_latencies(latencies: Mapping[str, float], catalog: HintCatalog) -> str:
    ids = [h for h in catalog.ids if h in latencies]
    return tournament(ids, latency_labeler(latencies)).winner(ids)


# ---------------------------------------------------------------------------
# metrics


def speedup(default_ms: Sequence[float], selected_ms: Sequence[float]) -> float:
    d, s = np.asarray(default_ms, dtype=float), np.asarray(selected_ms, dtype=float)
    if d.shape != s.shape or d.size == 0:
        raise ValueError("need equal-length non-empty latency lists")
    if (d <= 0).any() or (s <= 0).any():
        raise ValueError("latencies must be positive")
    return float(d.sum() / s.sum())


def gmrl(default_ms: Sequence[float], selected_ms: Sequence[float]) -> float:
    d, s = np.asarray(default_ms, dtype=float), np.asarray(selected_ms, dtype=float)
    if d.shape != s.shape or d.size == 0:
        raise ValueError("need equal-length non-empty latency lists")
    if (d <= 0).any() or (s <= 0).any():
        raise ValueError("latencies must be positive")
    return float(np.exp(np.mean(np.log(s) - np.log(d))))


def effective_latencies(rec: WorkloadRecord) -> Dict[str, float]:
    """Per-hint latency for evaluation; timeouts count as the timeout value."""
    out = {}
    for h, c in rec.per_hint.items():
        v = c.effective_latency()
        if v is not None:
            out[h] = float(v)
    return out


def oracle_hint(rec: WorkloadRecord | Mapping[str, float], catalog: HintCatalog) -> str:
    lat = effective_latencies(rec) if isinstance(rec, WorkloadRecord) else dict(rec)
    ids = [h for h in catalog.ids if h in lat]
    if not ids:
        raise ValueError("no measured hints")
    return min(ids, key=lambda h: (lat[h], catalog.index(h)))


@dataclass
class EvaluationRow:
    query_id: str
    selected: str
    latency_ms: float
    default_ms: float
    oracle: str
    oracle_ms: float

    @property
    def ratio(self) -> float:
        return self.latency_ms / self.default_ms


def evaluate_selection(records: Sequence[WorkloadRecord], selections: Mapping[str, str],
                       catalog: HintCatalog, default_hint: Optional[str] = None) -> Dict[str, Any]:
    """Replay evaluation of selected hints against stored latencies."""
    default_hint = default_hint or catalog.ids[0]
    rows: List[EvaluationRow] = []
    for rec in records:
        lat = effective_latencies(rec)
        if default_hint not in lat or selections.get(rec.query_id) not in lat:
            raise ValueError(f"missing latency for {rec.query_id}")
        o = oracle_hint(lat, catalog)
        sel = selections[rec.query_id]
        rows.append(EvaluationRow(rec.query_id, sel, lat[sel], lat[default_hint], o, lat[o]))
    if not rows:
        raise ValueError("empty evaluation set")
    d = [r.default_ms for r in rows]
    s = [r.latency_ms for r in rows]
    o = [r.oracle_ms for r in rows]
    return {
        "queries": [{"query_id": r.query_id, "selected": r.selected, "latency_ms": r.latency_ms,
                     "default_ms": r.default_ms, "ratio": r.ratio, "oracle": r.oracle,
                     "oracle_ms": r.oracle_ms} for r in rows],
        "default_hint": default_hint,
        "su": speedup(d, s),
        "gmrl": gmrl(d, s),
        "oracle_su": speedup(d, o),
        "oracle_gmrl": gmrl(d, o),
        "total_selected_ms": float(sum(s)),
        "total_oracle_ms": float(sum(o)),
        "total_default_ms": float(sum(d)),
    }


def format_report(report: Mapping[str, Any]) -> str:
    """Plain-text twin of the evaluation report."""
    lines = [f"{'query':<12} {'selected':<28} {'latency_ms':>12} {'ratio':>8}"]
    for q in report["queries"]:
        lines.append(f"{q['query_id']:<12} {q['selected']:<28} {q['latency_ms']:>12.3f} {q['ratio']:>8.3f}")
    lines.append("")
    lines.append(f"{'optimizer':<12} {'SU':>8} {'GMRL':>8}")
    lines.append(f"{'default':<12} {1.0:>8.2f} {1.0:>8.2f}")
    lines.append(f"{'model':<12} {report['su']:>8.2f} {report['gmrl']:>8.2f}")
    lines.append(f"{'oracle':<12} {report['oracle_su']:>8.2f} {report['oracle_gmrl']:>8.2f}")
    return "\n".join(lines) + "\n"


def dump_embeddings(model: HintModel, records: Sequence[WorkloadRecord], catalog: HintCatalog,
                    stats: Statistics, path: Optional[str | Path] = None) -> Tuple[np.ndarray, List[Dict[str, str]]]:
    """Plan embeddings with (query, hint, better/worse) annotations.

    A plan is "better" when it is not much slower than the query's best plan.
    """
    rows: List[np.ndarray] = []
    notes: List[Dict[str, str]] = []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for rec in records:
            plans = prepare_plans(model, rec, catalog, stats)
            if not plans:
                continue
            lat = effective_latencies(rec)
            best = lat[oracle_hint(lat, catalog)] if lat else None
            emb = model.embed(list(plans.values())).cpu().numpy()
            for h, e in zip(plans, emb):
                tag = "better" if best is not None and h in lat and ground_truth_label(lat[h], best) != 0 else "worse"
                rows.append(e)
                notes.append({"query_id": rec.query_id, "hint_id": h, "label": tag})
    model.train(was_training)
    mat = np.stack(rows) if rows else np.zeros((0, model.bb_cfg.d_llm))
    if path is not None:
        p = Path(path)
        with p.open("w") as fh:
            for e, n in zip(mat, notes):
                fh.write(json.dumps({**n, "embedding": [float(x) for x in e]}) + "\n")
    return mat, notes
