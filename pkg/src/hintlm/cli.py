"""Command-line interface for the offline hint-recommendation workflow."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_REWRITER = 3
EXIT_DATA = 4
EXIT_MODEL = 5

log = logging.getLogger("hintlm")


class DataError(RuntimeError):
    pass


def _catalog(path: Optional[str]):
    from .hints import HintCatalog, default_catalog

    return HintCatalog.load(path) if path else default_catalog()


def _load_store(path: str):
    from .gateway import WorkloadStore

    if not Path(path).exists():
        raise DataError(f"workload store not found: {path}")
    return WorkloadStore.load(path)


def _load_stats(path: str):
    from .stats import Statistics

    if not Path(path).exists():
        raise DataError(f"statistics file not found: {path}")
    return Statistics.load(path)


def _write_json(path: Optional[str], doc: Any) -> None:
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _read_queries(path: str) -> List[Tuple[str, str]]:
    """Queries from a JSONL file (``query_id``, ``sql``) or a directory of ``.sql`` files."""
    p = Path(path)
    if p.is_dir():
        return [(f.stem, f.read_text().strip()) for f in sorted(p.glob("*.sql"))]
    if not p.exists():
        raise DataError(f"query file not found: {path}")
    out = []
    for line in p.read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            out.append((d["query_id"], d["sql"]))
    return out


def _records_for(args, store) -> list:
    recs = list(store)
    if getattr(args, "split", None):
        from .trainer import load_split, split_records

        recs = split_records(recs, load_split(args.split), args.part)
    return recs


# ---------------------------------------------------------------------------
# commands


def cmd_collect(args) -> int:
    from .gateway import GatewayConfig, WorkloadStore, collect_workload, connect

    cfg = GatewayConfig(args.dsn, args.timeout_ms, args.reps, args.warmups)
    queries = _read_queries(args.queries)
    catalog = _catalog(args.catalog)
    store_path = Path(args.store)
    if store_path.exists() and not args.resume:
        store_path.unlink()
    store = WorkloadStore.load(store_path) if store_path.exists() else WorkloadStore(store_path)
    collect_workload(queries, catalog, cfg, lambda: connect(args.dsn), store, jobs=args.jobs)
    store.save(store_path)
    if args.stats_out:
        _collect_stats(args.dsn, args.relations, args.stats_out, args.buckets, args.sample_size)
    return EXIT_OK


def _collect_stats(dsn: str, relations: Sequence[str], out: str, buckets: int, sample: int) -> None:
    from .gateway import collect_stats, connect

    conn = connect(dsn)
    try:
        collect_stats(conn, relations, buckets, sample).save(out)
    finally:
        conn.close()


def cmd_stats(args) -> int:
    _collect_stats(args.dsn, args.relations, args.out, args.buckets, args.sample_size)
    return EXIT_OK


def cmd_rewrite(args) -> int:
    from .rewriter import HTTPChatClient, RewriteCache, rewrite_sql

    store = _load_store(args.workload)
    cache = RewriteCache(args.cache)
    client = None
    if not args.offline:
        endpoint = args.endpoint or os.environ.get("HINTLM_REWRITER_ENDPOINT")
        if endpoint:
            client = HTTPChatClient(endpoint, args.model)
    for rec in store:
        rec.rewritten_nl = rewrite_sql(rec.sql, client, cache, offline=args.offline or client is None)
    if args.update_store:
        store.save(args.workload)
    return EXIT_OK


def _model_configs(args):
    from .backbone import BackboneConfig
    from .comparator import ComparatorConfig
    from .encoder import EncoderConfig
    from .model import PromptOptions

    bb = BackboneConfig(d_llm=args.d_llm, layers=args.llm_layers, mode=args.mode, rank=args.rank,
                        seed=args.seed, pretrained_path=args.pretrained)
    enc = EncoderConfig(d_llm=args.d_llm, seed=args.seed)
    cmp = ComparatorConfig(d_llm=args.d_llm)
    opts = PromptOptions(matching=args.matching, include_sql=not args.no_sql,
                         include_hint=not args.no_hint, include_soft=not args.no_soft)
    return enc, bb, cmp, opts


def cmd_train(args) -> int:
    import torch

    from .model import HintModel
    from .trainer import PlanCache, TrainConfig, Trainer, build_pairs, train

    store = _load_store(args.workload)
    stats = _load_stats(args.stats)
    catalog = _catalog(args.catalog)
    recs = _records_for(args, store)
    pairs = build_pairs(recs, catalog)
    if not pairs:
        raise DataError("training split is empty")
    cfg = TrainConfig(max_epochs=args.epochs, seed=args.seed, batch_queries=args.batch_queries,
                      threads=args.jobs)
    if args.dtype == "float32":
        torch.set_default_dtype(torch.float32)
    if args.resume and Path(args.checkpoint).exists():
        from .trainer import validation_split

        ckpt = torch.load(args.checkpoint, map_location="cpu", weights_only=True)
        # final checkpoints carry the pre-restore training state; per-epoch ones are that state
        ckpt = ckpt["extra"].get("resume", ckpt)
        trainer = Trainer.resume(ckpt, lambda m: PlanCache(m, recs, catalog, stats))
        trainer.cfg.max_epochs = args.epochs
        if trainer.result.stop_reason == "max_epochs":
            trainer.result.stop_reason = None
        tr_set, val_set = validation_split(pairs, trainer.cfg.val_fraction, trainer.cfg.seed)
        result = trainer.fit(tr_set, val_set, args.checkpoint if args.keep_partial else None)
        trainer.finalize()
        model = trainer.model
    else:
        enc, bb, cmp, opts = _model_configs(args)
        model = HintModel.create(recs, catalog, stats, enc, bb, cmp, opts, dtype=args.dtype)
        result, trainer = train(pairs, model, PlanCache(model, recs, catalog, stats), cfg,
                                checkpoint_path=args.checkpoint if args.keep_partial else None)
    model.save(args.checkpoint, extra={"resume": trainer.last_good})
    report = result.report(trainer.cfg, model)
    _write_json(args.report, report)
    return EXIT_OK


def _load_model(path: str):
    from .model import HintModel

    return HintModel.load(path)


def cmd_recommend(args) -> int:
    from .gateway import WorkloadRecord
    from .recommender import prepare_plans, recommend

    model = _load_model(args.checkpoint)
    store = _load_store(args.workload)
    stats = _load_stats(args.stats)
    catalog = _catalog(args.catalog)
    if args.queries:
        wanted = [q for q, _ in _read_queries(args.queries)]
        missing = [q for q in wanted if q not in store]
        if missing:
            raise DataError(f"no collected plans for {missing[:3]}")
        recs: List[WorkloadRecord] = [store[q] for q in wanted]
    else:
        recs = _records_for(args, store)
    lines = []
    for rec in recs:
        best, board = recommend(rec, catalog, model, stats, return_board=True)
        lines.append(json.dumps({"query_id": rec.query_id, "hint_id": best, "scores": board.scores},
                                sort_keys=True))
        if args.explain:
            for hid, plan in prepare_plans(model, rec, catalog, stats).items():
                sys.stderr.write(f"--- {rec.query_id} / {hid}\n{plan.prompt.dump()}\n")
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .recommender import evaluate_selection, format_report, recommend

    store = _load_store(args.workload)
    catalog = _catalog(args.catalog)
    recs = _records_for(args, store)
    if args.selections:
        sel = {}
        for line in Path(args.selections).read_text().splitlines():
            if line.strip():
                d = json.loads(line)
                sel[d["query_id"]] = d["hint_id"]
        recs = [r for r in recs if r.query_id in sel]
    elif args.checkpoint:
        model = _load_model(args.checkpoint)
        stats = _load_stats(args.stats)
        sel = {r.query_id: recommend(r, catalog, model, stats) for r in recs}
    else:
        raise DataError("evaluate needs --selections or --checkpoint")
    if not args.replay:
        raise DataError("live execution is not wired into evaluate; collect latencies first and use --replay")
    report = evaluate_selection(recs, sel, catalog)
    _write_json(args.report, report)
    text = format_report(report)
    if args.table:
        Path(args.table).write_text(text)
    else:
        sys.stderr.write(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import SyntheticWorkloadSpec, generate

    spec = SyntheticWorkloadSpec(n_queries=args.n_queries, seed=args.seed, latency_model=args.latency_model,
                                 signal=args.signal, noise_sigma=args.noise)
    generate(spec).save(args.out)
    return EXIT_OK


def cmd_split(args) -> int:
    from .trainer import make_split, save_split

    save_split(make_split(_load_store(args.workload), args.kind, args.test_fraction, args.seed), args.out)
    return EXIT_OK


def cmd_dump_embeddings(args) -> int:
    from .recommender import dump_embeddings

    model = _load_model(args.checkpoint)
    store = _load_store(args.workload)
    recs = _records_for(args, store)
    if args.limit:
        recs = recs[:args.limit]
    dump_embeddings(model, recs, _catalog(args.catalog), _load_stats(args.stats), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hintlm", description=__doc__)
    p.add_argument("--config", help="JSON file of option defaults, keyed by command name")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, store=True, stats=False, split=False):
        if store:
            sp.add_argument("--workload", required=True, help="workload store (JSONL)")
        if stats:
            sp.add_argument("--stats", required=True, help="statistics file")
        sp.add_argument("--catalog", help="hint catalog JSON (default: built-in 16 hints)")
        sp.add_argument("--jobs", type=int, default=1)
        if split:
            sp.add_argument("--split", help="split manifest")
            sp.add_argument("--part", default="train", choices=["train", "test"])

    sp = sub.add_parser("collect", help="collect per-hint plans and latencies")
    sp.add_argument("--dsn", default=os.environ.get("HINTLM_DSN"))
    sp.add_argument("--queries", required=True, help="JSONL of query_id/sql or a directory of .sql files")
    sp.add_argument("--store", required=True)
    sp.add_argument("--timeout-ms", type=float, default=1_000_000)
    sp.add_argument("--reps", type=int, default=3)
    sp.add_argument("--warmups", type=int, default=1)
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--stats-out")
    sp.add_argument("--relations", nargs="*", default=[])
    sp.add_argument("--buckets", type=int, default=50)
    sp.add_argument("--sample-size", type=int, default=128)
    common(sp, store=False)
    sp.set_defaults(func=cmd_collect, needs_dsn=True)

    sp = sub.add_parser("stats", help="collect histogram and sample statistics")
    sp.add_argument("--dsn", default=os.environ.get("HINTLM_DSN"))
    sp.add_argument("--relations", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--buckets", type=int, default=50)
    sp.add_argument("--sample-size", type=int, default=128)
    sp.set_defaults(func=cmd_stats, needs_dsn=True)

    sp = sub.add_parser("rewrite", help="pre-populate the SQL rewrite cache")
    common(sp)
    sp.add_argument("--model", default="gpt-4")
    sp.add_argument("--cache", required=True)
    sp.add_argument("--endpoint")
    sp.add_argument("--offline", action="store_true")
    sp.add_argument("--update-store", action="store_true", help="write rewritten text into the store")
    sp.set_defaults(func=cmd_rewrite)

    sp = sub.add_parser("train", help="train the comparator model")
    common(sp, stats=True, split=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--report")
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--epochs", type=int, default=50)
    sp.add_argument("--batch-queries", type=int, default=4)
    sp.add_argument("--matching", default="ABS", choices=["NONE", "REL", "ABS"])
    sp.add_argument("--mode", default="TOY", choices=["TOY", "FROZEN_PRETRAINED", "LOWRANK"])
    sp.add_argument("--rank", type=int, default=8)
    sp.add_argument("--d-llm", type=int, default=128)
    sp.add_argument("--llm-layers", type=int, default=2)
    sp.add_argument("--pretrained", default=None)
    sp.add_argument("--dtype", default="float64", choices=["float64", "float32"])
    sp.add_argument("--no-sql", action="store_true")
    sp.add_argument("--no-hint", action="store_true")
    sp.add_argument("--no-soft", action="store_true")
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--keep-partial", action="store_true", help="checkpoint after every epoch")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("recommend", help="recommend a hint per query")
    common(sp, stats=True, split=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--queries", help="restrict to these queries (JSONL or .sql directory)")
    sp.add_argument("--out")
    sp.add_argument("--explain", action="store_true", help="dump composed prompts to stderr")
    sp.set_defaults(func=cmd_recommend, part="test")

    sp = sub.add_parser("evaluate", help="SU/GMRL report for selected hints")
    common(sp, split=True)
    sp.add_argument("--selections", help="output of the recommend command")
    sp.add_argument("--checkpoint")
    sp.add_argument("--stats")
    sp.add_argument("--replay", action="store_true", default=True)
    sp.add_argument("--report")
    sp.add_argument("--table", help="plain-text report path (default: stderr)")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("synth", help="generate a synthetic workload bundle")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-queries", type=int, default=200)
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--latency-model", default="planted", choices=["planted", "penalty"])
    sp.add_argument("--signal", default="text", choices=["text", "plan"])
    sp.add_argument("--noise", type=float, default=0.0)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("split", help="write a train/test split manifest")
    sp.add_argument("--workload", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--kind", default="query", choices=["query", "template"])
    sp.add_argument("--test-fraction", type=float, default=0.2)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("dump-embeddings", help="export plan embeddings with better/worse labels")
    common(sp, stats=True, split=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--limit", type=int, default=0)
    sp.set_defaults(func=cmd_dump_embeddings)
    return p


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    doc = json.loads(Path(known.config).read_text())
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, defaults in doc.items():
        if name in sub.choices:
            sub.choices[name].set_defaults(**{k.replace("-", "_"): v for k, v in defaults.items()})


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .gateway import ConnectionError as GatewayConnectionError, PlannerError
    from .model import ModelError
    from .rewriter import RewriterUnavailable, UpstreamError

    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (OSError, ValueError) as exc:
        sys.stderr.write(f"hintlm: bad config: {exc}\n")
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "needs_dsn", False) and not args.dsn:
        parser.print_usage(sys.stderr)
        sys.stderr.write("hintlm: error: --dsn is required (or set HINTLM_DSN)\n")
        return EXIT_USAGE
    try:
        return args.func(args)
    except (RewriterUnavailable, UpstreamError) as exc:
        sys.stderr.write(f"hintlm: rewriter: {exc}\n")
        return EXIT_REWRITER
    except ModelError as exc:
        sys.stderr.write(f"hintlm: model: {exc}\n")
        return EXIT_MODEL
    except (DataError, GatewayConnectionError, PlannerError, KeyError, ValueError) as exc:
        sys.stderr.write(f"hintlm: data: {exc}\n")
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - stable exit-code contract
        log.exception("internal error")
        sys.stderr.write(f"hintlm: internal error: {exc}\n")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
