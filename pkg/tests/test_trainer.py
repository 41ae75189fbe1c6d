import math

import pytest
import torch

from hintlm.backbone import checksum
from hintlm.gateway import HintCell, WorkloadRecord
from hintlm.hints import default_catalog
from hintlm.model import HintModel
from hintlm.trainer import (DivergenceDetected, EarlyStopping, PlanCache, TrainConfig, Trainer,
                            build_pairs, load_split, make_split, save_split, split_records, train,
                            validation_split)

from helpers import tiny_bundle, tiny_model


def record(lat):
    cells = {h: (HintCell(plan_json="[]", timed_out=True, timeout_ms=1e6) if t is None
                 else HintCell(plan_json="[]", latency_ms=t)) for h, t in lat.items()}
    return WorkloadRecord("q", "select 1", per_hint=cells)


def test_build_pairs_examples():
    cat = default_catalog()
    rec = record({"default": 100.0, "no_hashjoin": 400.0, "no_seqscan": 120.0, "no_nestloop": None})
    pairs = build_pairs([rec], cat)
    assert len(pairs) == 6
    assert all("no_nestloop" not in (p.h0, p.h1) for p in pairs)
    lab = {(p.h0, p.h1): p.label for p in pairs}
    assert lab["default", "no_hashjoin"] == 3 and lab["no_hashjoin", "default"] == 0
    assert lab["default", "no_seqscan"] + lab["no_seqscan", "default"] == 3
    assert build_pairs([], cat) == []


def test_early_stopping_rule():
    stop = EarlyStopping(0.01, 3)
    seq = [1.0, 0.5, 0.495, 0.494, 0.6]
    flags = [stop.step(x) for x in seq]
    assert flags == [False, False, False, False, True]
    stop = EarlyStopping(0.01, 2)
    assert [stop.step(x) for x in [1.0, 0.999, 0.5, 0.499, 0.498]] == [False, False, False, False, True]
    with pytest.raises(ValueError):
        TrainConfig(tolerance=0)


def test_split_manifests(tmp_path):
    b = tiny_bundle(n_queries=40)
    store = b.to_store()
    q = make_split(store, "query", 0.25, seed=1)
    assert sum(v == "test" for v in q["assignments"].values()) == 10
    t = make_split(store, "template", 0.25, seed=1)
    tpl = {r.query_id: r.template for r in store}
    test_tpls = {tpl[k] for k, v in t["assignments"].items() if v == "test"}
    train_tpls = {tpl[k] for k, v in t["assignments"].items() if v == "train"}
    assert test_tpls and not test_tpls & train_tpls
    save_split(q, tmp_path / "s.json")
    assert load_split(tmp_path / "s.json") == q
    train_recs = split_records(store, q, "train")
    test_ids = {r.query_id for r in split_records(store, q, "test")}
    assert not {p.query_id for p in build_pairs(train_recs, b.catalog)} & test_ids


def test_validation_split_is_query_level():
    b = tiny_bundle(n_queries=10)
    pairs = build_pairs(list(b.to_store()), b.catalog)
    tr, va = validation_split(pairs, 0.1, 0)
    assert {p.query_id for p in va} and not {p.query_id for p in tr} & {p.query_id for p in va}
    assert len(tr) + len(va) == len(pairs)


def _setup(mode="TOY"):
    b = tiny_bundle()
    recs = list(b.to_store())
    model = tiny_model(b, recs, mode)
    return b, recs, model, PlanCache(model, recs, b.catalog, b.stats), build_pairs(recs, b.catalog)


def test_training_is_deterministic():
    cfg = TrainConfig(max_epochs=3, batch_queries=2)
    _, _, m1, c1, pairs = _setup()
    r1, _ = train(pairs, m1, c1, cfg)
    _, _, m2, c2, _ = _setup()
    r2, _ = train(pairs, m2, c2, cfg)
    assert r1.history == r2.history and len(r1.history) == 3
    for (k, v), (_, w) in zip(m1.state_dict().items(), m2.state_dict().items()):
        assert torch.equal(v, w), k


def test_resume_matches_uninterrupted(tmp_path):
    cfg = TrainConfig(max_epochs=4, batch_queries=2, restore_best=False)
    b, recs, m1, c1, pairs = _setup()
    tr, va = validation_split(pairs, cfg.val_fraction, cfg.seed)
    full = Trainer(m1, c1, cfg)
    full.fit(tr, va)

    _, _, m2, c2, _ = _setup()
    part = Trainer(m2, c2, cfg)
    part.fit(tr, va, max_epochs=2)
    path = tmp_path / "ckpt.pt"
    torch.save(part.snapshot(), path)
    ckpt = torch.load(path, weights_only=True)
    resumed = Trainer.resume(ckpt, lambda m: PlanCache(m, recs, b.catalog, b.stats))
    resumed.fit(tr, va)
    assert resumed.result.history == full.result.history
    for (k, v), (_, w) in zip(full.model.state_dict().items(), resumed.model.state_dict().items()):
        assert torch.equal(v, w), k


def test_frozen_backbone_unchanged():
    _, _, model, cache, pairs = _setup("FROZEN_PRETRAINED")
    before = checksum(model.backbone.parameters())
    enc_before = checksum(model.encoder.parameters())
    train(pairs, model, cache, TrainConfig(max_epochs=1, batch_queries=3))
    assert checksum(model.backbone.parameters()) == before
    assert checksum(model.encoder.parameters()) != enc_before


def test_lowrank_trains_adapters_only():
    _, _, model, cache, pairs = _setup("LOWRANK")
    base = checksum(model.backbone.base_parameters())
    adapters = checksum(model.backbone.adapter_parameters())
    train(pairs, model, cache, TrainConfig(max_epochs=1, batch_queries=3))
    assert checksum(model.backbone.base_parameters()) == base
    assert checksum(model.backbone.adapter_parameters()) != adapters


def test_divergence_returns_last_good_checkpoint(tmp_path, monkeypatch):
    _, _, model, cache, pairs = _setup()
    trainer = Trainer(model, cache, TrainConfig(max_epochs=3, batch_queries=3))
    real_step = Trainer.train_step

    def poisoned(self, batch):
        if self.epoch == 1:
            with torch.no_grad():
                self.model.comparator.head0.weight.fill_(float("nan"))
                self.model.comparator.head1.weight.fill_(float("nan"))
        return real_step(self, batch)

    monkeypatch.setattr(Trainer, "train_step", poisoned)
    with pytest.raises(DivergenceDetected) as exc:
        trainer.fit(pairs, checkpoint_path=tmp_path / "last.pt")
    good = HintModel.from_checkpoint(exc.value.checkpoint)
    assert not torch.isnan(good.comparator.head0.weight).any()
    assert exc.value.checkpoint["extra"]["trainer"]["epoch"] == 1
    assert (tmp_path / "last.pt").exists()
    assert trainer.result.stop_reason == "diverged"


def test_report_contents():
    _, _, model, cache, pairs = _setup()
    cfg = TrainConfig(max_epochs=2, batch_queries=3)
    res, trainer = train(pairs, model, cache, cfg)
    rep = res.report(cfg, model)
    assert rep["stop_reason"] == "max_epochs" and len(rep["loss_history"]) == 2
    assert all(math.isfinite(h["train_loss"]) for h in rep["loss_history"])
    assert rep["model_config"]["backbone"]["mode"] == "TOY"
