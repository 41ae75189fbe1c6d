"""The full hint-recommendation model and its checkpoint format."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

import torch
from torch import nn

from .backbone import Backbone, BackboneConfig, BackboneMode, build_backbone
from .comparator import Comparator, ComparatorConfig
from .encoder import EncoderConfig, PlanBatch, PlanEncoder, Projection, build_mask, featurize
from .gateway import WorkloadRecord
from .hints import FAMILY_NAMES, HintCatalog, HintSet, render_hint_text
from .plan_ir import PlanTree, linearize, parse_explain
from .prompt import ComposedPrompt, MatchingMode, compose
from .rewriter import role_text
from .stats import Statistics
from .tokenizer import Tokenizer

CHECKPOINT_FORMAT = "hintlm-checkpoint"
CHECKPOINT_VERSION = 1

_DTYPES = {"float64": torch.float64, "float32": torch.float32}


class ModelError(RuntimeError):
    pass


@dataclass
class PromptOptions:
    matching: MatchingMode = MatchingMode.ABS
    include_sql: bool = True
    include_hint: bool = True
    include_soft: bool = True
    use_rewritten: bool = True
    budget: int = 1024

    def __post_init__(self):
        self.matching = MatchingMode(self.matching)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["matching"] = self.matching.value
        return d


@dataclass
class PreparedPlan:
    query_id: str
    hint_id: str
    tree: PlanTree
    features: list
    mask: Any
    prompt: ComposedPrompt


def corpus_texts(records: Iterable[WorkloadRecord], catalog: HintCatalog) -> List[str]:
    """Every text the prompts can contain, for tokenizer training."""
    texts = [role_text(), "Table embedding is at the position .", "'s"]
    texts += [render_hint_text(h) for h in catalog]
    texts += list(FAMILY_NAMES.values())
    for r in records:
        texts.append(r.sql)
        if r.rewritten_nl:
            texts.append(r.rewritten_nl)
        for cell in r.per_hint.values():
            if cell.plan_json:
                try:
                    tree = parse_explain(cell.plan_json)
                except ValueError:
                    continue
                texts += [f"Table {leaf.table_alias}'s" for leaf in tree.leaves()]
                break
    return texts


def _training_features(records: Iterable[WorkloadRecord], stats: Statistics, cfg: EncoderConfig,
                       vocab: Mapping[str, int]):
    for r in records:
        for cell in r.per_hint.values():
            if not cell.plan_json:
                continue
            try:
                yield featurize(parse_explain(cell.plan_json, relation_rows=stats.relation_rows()),
                                stats, cfg, vocab)
            except (ValueError, KeyError):
                continue


class HintModel(nn.Module):
    def __init__(self, tokenizer: Tokenizer, table_vocab: Mapping[str, int], enc_cfg: EncoderConfig,
                 bb_cfg: BackboneConfig, cmp_cfg: ComparatorConfig,
                 prompt: Optional[PromptOptions] = None, dtype: str = "float64"):
        super().__init__()
        if enc_cfg.d_llm != bb_cfg.d_llm or cmp_cfg.d_llm != bb_cfg.d_llm:
            raise ValueError("encoder projection, backbone and comparator widths must agree")
        self.tokenizer = tokenizer
        self.table_vocab = dict(table_vocab)
        self.enc_cfg, self.bb_cfg, self.cmp_cfg = enc_cfg, bb_cfg, cmp_cfg
        self.prompt = prompt or PromptOptions()
        self.dtype_name = dtype
        tdtype = _DTYPES[dtype]
        torch.manual_seed(enc_cfg.seed)
        self.encoder = PlanEncoder(enc_cfg, n_tables=len(self.table_vocab)).to(tdtype)
        self.projection = Projection(enc_cfg.d_p, enc_cfg.d_llm, enc_cfg.proj_hidden).to(tdtype)
        self.comparator = Comparator(cmp_cfg).to(tdtype)
        self.backbone: Backbone = build_backbone(bb_cfg, tdtype)

    @classmethod
    def create(cls, records: Sequence[WorkloadRecord], catalog: HintCatalog, stats: Statistics,
               enc_cfg: Optional[EncoderConfig] = None, bb_cfg: Optional[BackboneConfig] = None,
               cmp_cfg: Optional[ComparatorConfig] = None, prompt: Optional[PromptOptions] = None,
               dtype: str = "float64") -> "HintModel":
        tok = Tokenizer.train(corpus_texts(records, catalog))
        bb_cfg = bb_cfg or BackboneConfig()
        bb_cfg.vocab_size = len(tok)
        enc_cfg = enc_cfg or EncoderConfig(d_llm=bb_cfg.d_llm)
        cmp_cfg = cmp_cfg or ComparatorConfig(d_llm=bb_cfg.d_llm)
        vocab = {t: i + 1 for i, t in enumerate(sorted(stats.tables))}
        model = cls(tok, vocab, enc_cfg, bb_cfg, cmp_cfg, prompt, dtype)
        model.encoder.fit_normalization(list(_training_features(records, stats, enc_cfg, vocab)))
        return model

    @property
    def tdtype(self) -> torch.dtype:
        return _DTYPES[self.dtype_name]

    # -- data preparation -------------------------------------------------

    def prepare(self, rec: WorkloadRecord, hint: HintSet, stats: Statistics) -> PreparedPlan:
        cell = rec.per_hint.get(hint.hint_id)
        if cell is None or cell.plan_json is None:
            raise ModelError(f"no plan for {rec.query_id}/{hint.hint_id}")
        tree = parse_explain(cell.plan_json, query_id=rec.query_id, hint_id=hint.hint_id,
                             relation_rows=stats.relation_rows())
        feats = featurize(tree, stats, self.enc_cfg, self.table_vocab)
        mask = build_mask(tree)
        opts = self.prompt
        text = rec.rewritten_nl if (opts.use_rewritten and rec.rewritten_nl) else rec.sql
        prompt = compose(role_text(), text, render_hint_text(hint), len(linearize(tree)), tree,
                         opts.matching, tokenizer=self.tokenizer, budget=min(opts.budget, self.bb_cfg.context_limit),
                         include_sql=opts.include_sql, include_hint=opts.include_hint,
                         include_soft=opts.include_soft)
        return PreparedPlan(rec.query_id, hint.hint_id, tree, feats, mask, prompt)

    # -- forward ------------------------------------------------------------

    def plan_soft(self, plans: Sequence[PreparedPlan]) -> List[torch.Tensor]:
        """Projected soft-prompt rows per plan, each (m_i, d_llm)."""
        batch = PlanBatch.collate([p.features for p in plans], [p.mask for p in plans],
                                  self.enc_cfg, dtype=self.tdtype)
        proj = self.projection(self.encoder(batch))
        return [proj[i, :n] for i, n in enumerate(batch.lengths)]

    def embed(self, plans: Sequence[PreparedPlan]) -> torch.Tensor:
        """Plan embeddings (N, d_llm) from the backbone's top layer."""
        if not plans:
            return torch.zeros(0, self.bb_cfg.d_llm, dtype=self.tdtype)
        softs = self.plan_soft(plans)
        return self.backbone([p.prompt for p in plans], softs)

    def trainable_groups(self, lr: float, lr_backbone: float, lr_adapter: float) -> List[Dict[str, Any]]:
        groups = [{"params": list(self.encoder.parameters()) + list(self.projection.parameters())
                   + list(self.comparator.parameters()), "lr": lr}]
        mode = self.bb_cfg.mode
        if mode is BackboneMode.TOY:
            groups.append({"params": list(self.backbone.parameters()), "lr": lr_backbone})
        elif mode is BackboneMode.LOWRANK:
            groups.append({"params": self.backbone.adapter_parameters(), "lr": lr_adapter})
        return groups

    # -- persistence ------------------------------------------------------

    def config_dict(self) -> Dict[str, Any]:
        return {"encoder": self.enc_cfg.to_dict(), "backbone": self.bb_cfg.to_dict(),
                "comparator": self.cmp_cfg.to_dict(), "prompt": self.prompt.to_dict(),
                "dtype": self.dtype_name}

    def checkpoint(self, extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config_dict(),
            "tokenizer": self.tokenizer.state_dict(),
            "table_vocab": dict(self.table_vocab),
            "state_dict": {k: v.detach().clone() for k, v in self.state_dict().items()},
            "extra": extra or {},
        }

    def save(self, path: str | Path, extra: Optional[Dict[str, Any]] = None) -> None:
        torch.save(self.checkpoint(extra), str(path))

    @classmethod
    def from_checkpoint(cls, ckpt: Mapping[str, Any]) -> "HintModel":
        if ckpt.get("format") != CHECKPOINT_FORMAT:
            raise ModelError("not a hintlm checkpoint")
        if ckpt.get("version") != CHECKPOINT_VERSION:
            raise ModelError(f"unsupported checkpoint version {ckpt.get('version')}")
        c = ckpt["config"]
        bb = dict(c["backbone"])
        bb["pretrained_path"] = None  # weights come from the checkpoint itself
        model = cls(Tokenizer.from_state(ckpt["tokenizer"]), ckpt["table_vocab"],
                    EncoderConfig(**c["encoder"]), BackboneConfig(**bb), ComparatorConfig(**c["comparator"]),
                    PromptOptions(**c["prompt"]), c["dtype"])
        model.load_state_dict(ckpt["state_dict"])
        return model

    @classmethod
    def load(cls, path: str | Path) -> "HintModel":
        p = Path(path)
        if not p.exists():
            raise ModelError(f"checkpoint not found: {p}")
        try:
            ckpt = torch.load(str(p), map_location="cpu", weights_only=True)
        except Exception as exc:
            raise ModelError(f"unreadable checkpoint {p}: {exc}") from exc
        return cls.from_checkpoint(ckpt)
