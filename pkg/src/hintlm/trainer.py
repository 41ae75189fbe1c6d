"""Pairwise training over workload records."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from collections import OrderedDict, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .comparator import ground_truth_label, weighted_loss
from .gateway import WorkloadRecord, WorkloadStore
from .hints import HintCatalog
from .model import HintModel, PreparedPlan
from .stats import Statistics

log = logging.getLogger(__name__)

SPLIT_FORMAT = "hintlm-split"


class DivergenceDetected(RuntimeError):
    def __init__(self, message: str, checkpoint: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainInstance:
    query_id: str
    h0: str
    h1: str
    label: int
    t0: float
    t1: float

    def __post_init__(self):
        if self.h0 == self.h1:
            raise ValueError("a training pair needs two distinct hints")


def build_pairs(records: Sequence[WorkloadRecord] | WorkloadStore, catalog: HintCatalog) -> List[TrainInstance]:
    """All ordered pairs of distinct hints with valid (non-timeout) latencies, per query."""
    out: List[TrainInstance] = []
    for rec in records:
        hints = rec.valid_hints(catalog)
        lat = {h: rec.per_hint[h].latency_ms for h in hints}
        for h0 in hints:
            for h1 in hints:
                if h0 != h1:
                    out.append(TrainInstance(rec.query_id, h0, h1,
                                             ground_truth_label(lat[h0], lat[h1]), lat[h0], lat[h1]))
    return out


# ---------------------------------------------------------------------------
# split manifests

def make_split(records: Sequence[WorkloadRecord] | WorkloadStore, kind: str = "query",
               test_fraction: float = 0.2, seed: int = 0) -> Dict[str, Any]:
    """Query-level ("query", -Q) or template-level ("template", -T) train/test split."""
    recs = list(records)
    rng = np.random.default_rng(seed)
    if kind == "query":
        units = sorted(r.query_id for r in recs)
        key = {r.query_id: r.query_id for r in recs}
    elif kind == "template":
        units = sorted({r.template or r.query_id for r in recs})
        key = {r.query_id: r.template or r.query_id for r in recs}
    else:
        raise ValueError(f"unknown split kind {kind}")
    order = [units[i] for i in rng.permutation(len(units))]
    n_test = int(round(len(units) * test_fraction))
    test_units = set(order[:n_test])
    assignments = {r.query_id: ("test" if key[r.query_id] in test_units else "train")
                   for r in sorted(recs, key=lambda r: r.query_id)}
    return {"format": SPLIT_FORMAT, "version": 1, "kind": kind, "assignments": assignments}


def save_split(split: Mapping[str, Any], path: str | Path) -> None:
    Path(path).write_text(json.dumps(split, indent=1, sort_keys=True) + "\n")


def load_split(path: str | Path) -> Dict[str, Any]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != SPLIT_FORMAT:
        raise ValueError("not a split manifest")
    return doc


def split_records(records: Sequence[WorkloadRecord] | WorkloadStore, split: Mapping[str, Any],
                  part: str) -> List[WorkloadRecord]:
    a = split["assignments"]
    return [r for r in records if a.get(r.query_id) == part]


# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    max_epochs: int = 50
    tolerance: float = 0.01
    patience: int = 5
    batch_queries: int = 4
    lr: float = 1e-3
    lr_backbone: float = 1e-3
    lr_adapter: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 42
    val_fraction: float = 0.1
    threads: int = 1
    restore_best: bool = True
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.max_epochs <= 0 or self.patience <= 0 or self.batch_queries <= 0:
            raise ValueError("epochs, patience and batch size must be positive")
        if self.tolerance <= 0 or self.lr <= 0:
            raise ValueError("tolerance and learning rate must be positive")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class EarlyStopping:
    """Stop once the best loss has improved by less than ``tolerance`` for ``patience`` epochs in a row."""

    def __init__(self, tolerance: float, patience: int):
        self.tolerance = tolerance
        self.patience = patience
        self.best = math.inf
        self.stale = 0

    def step(self, loss: float) -> bool:
        if self.best - loss < self.tolerance:
            self.stale += 1
        else:
            self.stale = 0
        self.best = min(self.best, loss)
        return self.stale >= self.patience

    def state(self) -> Dict[str, Any]:
        return {"best": self.best, "stale": self.stale}

    def load(self, state: Mapping[str, Any]) -> None:
        self.best, self.stale = float(state["best"]), int(state["stale"])


@dataclass
class TrainResult:
    history: List[Dict[str, float]] = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = -1
    epochs_run: int = 0
    seconds: float = 0.0

    def report(self, cfg: TrainConfig, model: HintModel) -> Dict[str, Any]:
        return {"train_config": cfg.to_dict(), "model_config": model.config_dict(),
                "loss_history": self.history, "stop_reason": self.stop_reason,
                "best_epoch": self.best_epoch, "epochs_run": self.epochs_run}


class PlanCache:
    """Prepared (featurized + prompt-composed) plans keyed by (query_id, hint_id)."""

    def __init__(self, model: HintModel, records: Sequence[WorkloadRecord], catalog: HintCatalog,
                 stats: Statistics):
        self.model = model
        self.records = {r.query_id: r for r in records}
        self.catalog = catalog
        self.stats = stats
        self._cache: Dict[Tuple[str, str], PreparedPlan] = {}

    def get(self, qid: str, hid: str) -> PreparedPlan:
        key = (qid, hid)
        if key not in self._cache:
            self._cache[key] = self.model.prepare(self.records[qid], self.catalog[hid], self.stats)
        return self._cache[key]


def _group(instances: Sequence[TrainInstance]) -> "OrderedDict[str, List[TrainInstance]]":
    g: "OrderedDict[str, List[TrainInstance]]" = OrderedDict()
    for inst in instances:
        g.setdefault(inst.query_id, []).append(inst)
    return g


def batch_logits(model: HintModel, cache: PlanCache, batch: Sequence[TrainInstance],
                 hard: Optional[bool] = None) -> torch.Tensor:
    """Comparator logits for a batch; each plan is embedded once."""
    keys: List[Tuple[str, str]] = []
    index: Dict[Tuple[str, str], int] = {}
    for inst in batch:
        for k in ((inst.query_id, inst.h0), (inst.query_id, inst.h1)):
            if k not in index:
                index[k] = len(keys)
                keys.append(k)
    emb = model.embed([cache.get(*k) for k in keys])
    i0 = torch.tensor([index[(i.query_id, i.h0)] for i in batch])
    i1 = torch.tensor([index[(i.query_id, i.h1)] for i in batch])
    return model.comparator.logits(emb[i0], emb[i1], hard=hard)


def evaluate_loss(model: HintModel, cache: PlanCache, instances: Sequence[TrainInstance],
                  batch_queries: int = 8) -> float:
    """Mean weighted loss (training-form soft routing) without gradients."""
    groups = list(_group(instances).values())
    total, n = 0.0, 0
    w = model.comparator.class_weights
    with torch.no_grad():
        for s in range(0, len(groups), batch_queries):
            batch = [i for g in groups[s:s + batch_queries] for i in g]
            logits = batch_logits(model, cache, batch, hard=False)
            labels = torch.tensor([i.label for i in batch])
            total += float(weighted_loss(logits, labels, w)) * len(batch)
            n += len(batch)
    return total / max(n, 1)


def predict_labels(model: HintModel, cache: PlanCache, instances: Sequence[TrainInstance],
                   batch_queries: int = 8) -> np.ndarray:
    """Argmax labels with inference-time (hard) routing."""
    groups = list(_group(instances).values())
    out: List[int] = []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for s in range(0, len(groups), batch_queries):
            batch = [i for g in groups[s:s + batch_queries] for i in g]
            out.extend(batch_logits(model, cache, batch, hard=True).argmax(-1).tolist())
    model.train(was_training)
    by_key = {}
    flat = [i for g in groups for i in g]
    for inst, y in zip(flat, out):
        by_key[(inst.query_id, inst.h0, inst.h1)] = y
    return np.array([by_key[(i.query_id, i.h0, i.h1)] for i in instances])


def pair_accuracy(model: HintModel, cache: PlanCache, instances: Sequence[TrainInstance]) -> float:
    if not instances:
        return float("nan")
    pred = predict_labels(model, cache, instances)
    return float(np.mean(pred == np.array([i.label for i in instances])))


def validation_split(instances: Sequence[TrainInstance], fraction: float, seed: int):
    qids = sorted({i.query_id for i in instances})
    if fraction <= 0 or len(qids) < 2:
        return list(instances), []
    rng = np.random.default_rng(seed)
    n_val = max(1, int(round(len(qids) * fraction)))
    val = {qids[k] for k in rng.permutation(len(qids))[:n_val]}
    return [i for i in instances if i.query_id not in val], [i for i in instances if i.query_id in val]


class Trainer:
    """Single-writer training loop with deterministic batch order."""

    def __init__(self, model: HintModel, cache: PlanCache, cfg: TrainConfig):
        self.model = model
        self.cache = cache
        self.cfg = cfg
        self.opt = torch.optim.AdamW(model.trainable_groups(cfg.lr, cfg.lr_backbone, cfg.lr_adapter),
                                     weight_decay=cfg.weight_decay)
        self.stopper = EarlyStopping(cfg.tolerance, cfg.patience)
        self.result = TrainResult()
        self.epoch = 0
        self.best_state: Optional[Dict[str, torch.Tensor]] = None
        self.best_loss = math.inf
        self.last_good: Optional[Dict[str, Any]] = None

    def _batches(self, instances: Sequence[TrainInstance], epoch: int) -> List[List[TrainInstance]]:
        groups = list(_group(instances).values())
        rng = np.random.default_rng([self.cfg.seed, epoch])
        order = rng.permutation(len(groups))
        bq = self.cfg.batch_queries
        return [[i for k in order[s:s + bq] for i in groups[k]] for s in range(0, len(order), bq)]

    def train_step(self, batch: Sequence[TrainInstance]) -> float:
        self.model.train()
        self.opt.zero_grad(set_to_none=True)
        logits = batch_logits(self.model, self.cache, batch, hard=False)
        labels = torch.tensor([i.label for i in batch])
        loss = weighted_loss(logits, labels, self.model.comparator.class_weights)
        if not torch.isfinite(loss):
            raise DivergenceDetected(f"non-finite loss at epoch {self.epoch}", self.snapshot())
        loss.backward()
        if self.cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.opt.step()
        return loss.item()

    def fit(self, train: Sequence[TrainInstance], val: Sequence[TrainInstance] = (),
            checkpoint_path: Optional[str | Path] = None, max_epochs: Optional[int] = None) -> TrainResult:
        if not train:
            raise ValueError("no training instances")
        prev_threads = torch.get_num_threads()
        torch.set_num_threads(self.cfg.threads)
        start = time.perf_counter()
        last_good = self.snapshot()
        limit = self.cfg.max_epochs if max_epochs is None else min(self.cfg.max_epochs, max_epochs)
        try:
            while self.epoch < limit and not self.result.stop_reason:
                total, n = 0.0, 0
                try:
                    for batch in self._batches(train, self.epoch):
                        total += self.train_step(batch) * len(batch)
                        n += len(batch)
                except DivergenceDetected as exc:
                    exc.checkpoint = last_good
                    if checkpoint_path:
                        torch.save(last_good, str(checkpoint_path))
                    self.result.stop_reason = "diverged"
                    raise
                train_loss = total / n
                monitor = evaluate_loss(self.model, self.cache, val) if val else train_loss
                if not math.isfinite(monitor):
                    self.result.stop_reason = "diverged"
                    raise DivergenceDetected(f"non-finite validation loss at epoch {self.epoch}", last_good)
                self.result.history.append({"epoch": self.epoch, "train_loss": train_loss,
                                            "val_loss": monitor if val else None})
                log.info("epoch %d train %.4f monitor %.4f", self.epoch, train_loss, monitor)
                if monitor < self.best_loss:
                    self.best_loss = monitor
                    self.result.best_epoch = self.epoch
                    self.best_state = {k: v.detach().clone() for k, v in self.model.state_dict().items()}
                self.epoch += 1
                if self.stopper.step(monitor):
                    self.result.stop_reason = "early_stop"
                last_good = self.snapshot()
                if checkpoint_path:
                    torch.save(last_good, str(checkpoint_path))
            if not self.result.stop_reason and self.epoch >= self.cfg.max_epochs:
                self.result.stop_reason = "max_epochs"
            self.last_good = self.snapshot()
        finally:
            torch.set_num_threads(prev_threads)
        self.result.epochs_run = self.epoch
        self.result.seconds += time.perf_counter() - start
        return self.result

    def finalize(self) -> None:
        """Load the best monitored parameters (if enabled)."""
        if self.cfg.restore_best and self.best_state is not None:
            self.model.load_state_dict(self.best_state)

    # -- resumable state ------------------------------------------------------

    def snapshot(self) -> Dict[str, Any]:
        return self.model.checkpoint(extra={
            "trainer": {
                "epoch": self.epoch,
                "optimizer": copy.deepcopy(self.opt.state_dict()),
                "stopper": self.stopper.state(),
                "history": [dict(h) for h in self.result.history],
                "best_epoch": self.result.best_epoch,
                "best_loss": self.best_loss,
                "stop_reason": self.result.stop_reason,
                "best_state": self.best_state,
                "train_config": self.cfg.to_dict(),
            }})

    @classmethod
    def resume(cls, ckpt: Mapping[str, Any], cache_factory) -> "Trainer":
        model = HintModel.from_checkpoint(ckpt)
        t = ckpt["extra"]["trainer"]
        tr = cls(model, cache_factory(model), TrainConfig(**t["train_config"]))
        tr.opt.load_state_dict(t["optimizer"])
        tr.stopper.load(t["stopper"])
        tr.epoch = int(t["epoch"])
        tr.result.history = [dict(h) for h in t["history"]]
        tr.result.best_epoch = int(t["best_epoch"])
        tr.best_loss = float(t["best_loss"])
        tr.result.stop_reason = t["stop_reason"]
        tr.best_state = t["best_state"]
        return tr


def train(instances: Sequence[TrainInstance], model: HintModel, cache: PlanCache, cfg: TrainConfig,
          checkpoint_path: Optional[str | Path] = None) -> Tuple[TrainResult, Trainer]:
    """Split off a query-level validation set, fit with early stopping, restore the best epoch."""
    if not instances:
        raise ValueError("no training instances")
    torch.manual_seed(cfg.seed)
    tr_set, val_set = validation_split(instances, cfg.val_fraction, cfg.seed)
    trainer = Trainer(model, cache, cfg)
    result = trainer.fit(tr_set, val_set, checkpoint_path)
    trainer.finalize()
    return result, trainer
