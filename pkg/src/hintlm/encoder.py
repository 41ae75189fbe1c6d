"""Tree-structured plan encoder and the projection into the backbone width."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .plan_ir import OPERATOR_KINDS, SUPER, PlanTree, linearize
from .stats import MissingStatistics, Statistics, bucket_fractions, column_name, eval_predicate


class ShapeMismatch(ValueError):
    pass


@dataclass
class EncoderConfig:
    d_p: int = 64
    layers: int = 3
    heads: int = 4
    buckets: int = 50
    sample_size: int = 128
    d_llm: int = 128
    seed: int = 42
    max_height: int = 16
    proj_hidden: int = 128
    positional: bool = True

    def __post_init__(self):
        for name in ("d_p", "layers", "heads", "buckets", "sample_size", "d_llm", "max_height"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_p % self.heads:
            raise ValueError("d_p must be divisible by heads")

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class NodeFeatureVector:
    operator_onehot: np.ndarray
    log_rows: float
    log_cost: float
    table_id: int
    histogram_sel: np.ndarray
    sample_bitmap: np.ndarray
    pred_sel: float
    height: int = 0

    def dense(self) -> np.ndarray:
        return np.concatenate([self.operator_onehot, [self.log_rows / 10.0, self.log_cost / 10.0,
                                                      self.pred_sel],
                               self.histogram_sel, self.sample_bitmap])


def feature_width(cfg: EncoderConfig) -> int:
    return len(OPERATOR_KINDS) + 3 + cfg.buckets + cfg.sample_size


def _pad(vec: np.ndarray, n: int, fill: float) -> np.ndarray:
    if vec.size >= n:
        return vec[:n]
    return np.concatenate([vec, np.full(n - vec.size, fill)])


def featurize(tree: PlanTree, stats: Statistics, cfg: EncoderConfig,
              table_vocab: Optional[Dict[str, int]] = None) -> List[NodeFeatureVector]:
    """One feature vector per real node, in linearize order (super slot excluded).

    Raises MissingStatistics when a scanned relation has no entry in ``stats``.
    """
    table_vocab = table_vocab or {}
    heights = tree.heights()
    out: List[NodeFeatureVector] = []
    for nid in linearize(tree)[1:]:
        node = tree.nodes[nid]
        onehot = np.zeros(len(OPERATOR_KINDS))
        onehot[OPERATOR_KINDS.index(node.operator_kind)] = 1.0
        hist = np.ones(cfg.buckets)
        bitmap = np.ones(cfg.sample_size)
        pred_sel = 1.0
        table_id = 0
        if node.relation is not None:
            if node.relation not in stats:
                raise MissingStatistics(node.relation)
            tstats = stats[node.relation]
            table_id = table_vocab.get(node.relation, 0)
            filters = [p for p in node.predicates]
            if filters:
                for p in filters:
                    col = tstats.columns.get(column_name(p.column))
                    frac = bucket_fractions(p, col) if col is not None else None
                    if frac is not None:
                        hist = np.minimum(hist, _pad(frac, cfg.buckets, 0.0))
                rows = tstats.sample[:cfg.sample_size]
                bits = [all(eval_predicate(p, r) for p in filters) for r in rows]
                bitmap = _pad(np.asarray(bits, dtype=float), cfg.sample_size, 0.0)
                if tstats.row_count > 0:
                    pred_sel = min(1.0, max(0.0, node.est_rows / tstats.row_count))
        elif node.predicates:
            pred_sel = min(p.est_selectivity for p in node.predicates)
        out.append(NodeFeatureVector(
            operator_onehot=onehot,
            log_rows=math.log1p(node.est_rows),
            log_cost=math.log1p(node.est_cost),
            table_id=table_id,
            histogram_sel=hist,
            sample_bitmap=bitmap,
            pred_sel=pred_sel,
            height=heights[nid],
        ))
    return out


def build_mask(tree: PlanTree) -> np.ndarray:
    """Boolean m×m attention mask: super row sees all; node rows see self and descendants."""
    order = linearize(tree)
    pos = {nid: i for i, nid in enumerate(order)}
    m = len(order)
    allow = np.zeros((m, m), dtype=bool)
    allow[0, :] = True
    for i, nid in enumerate(order):
        if nid == SUPER:
            continue
        allow[i, i] = True
        for d in tree.descendants(nid):
            allow[i, pos[d]] = True
    return allow


@dataclass
class PlanBatch:
    """Padded batch of featurized plans."""
    x: torch.Tensor          # (N, M, F); row 0 of every plan is the super slot (zeros)
    table_ids: torch.Tensor  # (N, M)
    heights: torch.Tensor    # (N, M)
    allow: torch.Tensor      # (N, M, M) bool
    lengths: List[int]

    @classmethod
    def collate(cls, feats: Sequence[List[NodeFeatureVector]], masks: Sequence[np.ndarray],
                cfg: EncoderConfig, dtype=torch.float64) -> "PlanBatch":
        n = len(feats)
        lengths = [len(f) + 1 for f in feats]
        for f, mk, ln in zip(feats, masks, lengths):
            if mk.shape != (ln, ln):
                raise ShapeMismatch(f"mask {mk.shape} does not match {ln} positions")
        M, W = max(lengths), feature_width(cfg)
        x = np.zeros((n, M, W))
        tid = np.zeros((n, M), dtype=np.int64)
        hgt = np.zeros((n, M), dtype=np.int64)
        allow = np.zeros((n, M, M), dtype=bool)
        for b, (f, mk, ln) in enumerate(zip(feats, masks, lengths)):
            for k, v in enumerate(f, start=1):
                x[b, k] = v.dense()
                tid[b, k] = v.table_id
                hgt[b, k] = min(v.height, cfg.max_height - 1)
            allow[b, :ln, :ln] = mk
            for k in range(ln, M):
                allow[b, k, k] = True
        return cls(torch.as_tensor(x, dtype=dtype), torch.as_tensor(tid), torch.as_tensor(hgt),
                   torch.as_tensor(allow), lengths)


class MaskedSelfAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor, allow: torch.Tensor, return_weights: bool = False):
        N, M, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).view(N, M, 3, h, d // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        scores = scores.masked_fill(~allow[:, None], float("-inf"))
        w = torch.softmax(scores, dim=-1)
        y = (w @ v).transpose(1, 2).reshape(N, M, d)
        y = self.out(y)
        return (y, w) if return_weights else y


class NodeInput(nn.Module):
    """Embeds a dense node vector block by block and sums the parts.

    Separate maps keep the wide histogram and sample blocks from drowning the
    few scalar features. Each standardized scalar is additionally expanded
    into a piecewise-linear code over ``n_bins`` quantile bins, so every value
    range gets its own learned direction.
    """

    def __init__(self, cfg: EncoderConfig, d: int, n_bins: int = 8):
        super().__init__()
        n_ops = len(OPERATOR_KINDS)
        self.bounds = [0, n_ops, n_ops + 3, n_ops + 3 + cfg.buckets, feature_width(cfg)]
        self.in_features = feature_width(cfg)
        self.n_bins = n_bins
        widths = [b - a for a, b in zip(self.bounds, self.bounds[1:])]
        widths[1] += 3 * n_bins
        self.parts = nn.ModuleList(nn.Linear(w, d) for w in widths)
        # per-scalar bin edges; evenly spaced over +-3 std until fitted
        self.register_buffer("edges", torch.linspace(-3.0, 3.0, n_bins + 1).repeat(3, 1))

    def set_edges(self, scalars: np.ndarray) -> None:
        """Quantile bin edges from standardized scalar rows (n, 3), made strictly increasing."""
        q = np.quantile(scalars, np.linspace(0.0, 1.0, self.n_bins + 1), axis=0).T
        for j in range(1, q.shape[1]):
            q[:, j] = np.maximum(q[:, j], q[:, j - 1] + 1e-3)
        self.edges.copy_(torch.as_tensor(q, dtype=self.edges.dtype))

    def piecewise(self, s: torch.Tensor) -> torch.Tensor:
        lo, hi = self.edges[:, :-1], self.edges[:, 1:]
        code = ((s[..., None] - lo) / (hi - lo)).clamp(0.0, 1.0)
        return code.flatten(-2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        blocks = [x[..., a:b] for a, b in zip(self.bounds, self.bounds[1:])]
        blocks[1] = torch.cat([blocks[1], self.piecewise(blocks[1])], dim=-1)
        return sum(lin(blk) for lin, blk in zip(self.parts, blocks))


class TreeLayer(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = MaskedSelfAttention(d, heads)
        self.ln2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, d))

    def forward(self, x, allow):
        x = x + self.attn(self.ln1(x), allow)
        return x + self.ff(self.ln2(x))


class PlanEncoder(nn.Module):
    """Tree-masked transformer; returns every last-layer position, super slot first."""

    def __init__(self, cfg: EncoderConfig, n_tables: int = 0):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_p
        self.inp = NodeInput(cfg, d)
        self.super_node = nn.Parameter(torch.zeros(d))
        self.table_emb = nn.Embedding(n_tables + 1, d)
        self.height_emb = nn.Embedding(cfg.max_height, d)
        self.layers = nn.ModuleList(TreeLayer(d, cfg.heads) for _ in range(cfg.layers))
        self.ln = nn.LayerNorm(d)
        # per-feature standardization; identity until fit_normalization is called
        self.register_buffer("feat_mean", torch.zeros(feature_width(cfg)))
        self.register_buffer("feat_scale", torch.ones(feature_width(cfg)))
        nn.init.normal_(self.super_node, std=0.02)
        nn.init.normal_(self.table_emb.weight, std=0.02)
        nn.init.normal_(self.height_emb.weight, std=0.02)

    @torch.no_grad()
    def fit_normalization(self, plans: Sequence[Sequence[NodeFeatureVector]]) -> None:
        """Set the input standardization from the node features of ``plans``."""
        rows = [f.dense() for fs in plans for f in fs]
        if not rows:
            return
        # only the unbounded scalars (log rows, log cost, selectivity); the
        # one-hot and [0, 1] vector blocks keep their natural scale
        cols = slice(len(OPERATOR_KINDS), len(OPERATOR_KINDS) + 3)
        x = np.stack(rows)[:, cols]
        sd = x.std(axis=0)
        self.feat_mean.zero_()
        self.feat_scale.fill_(1.0)
        self.feat_mean[cols] = torch.as_tensor(x.mean(axis=0))
        self.feat_scale[cols] = torch.as_tensor(np.where(sd > 1e-6, sd, 1.0))
        self.inp.set_edges((x - self.feat_mean[cols].numpy()) / self.feat_scale[cols].numpy())

    def embed(self, batch: PlanBatch) -> torch.Tensor:
        x = (batch.x - self.feat_mean) / self.feat_scale
        h = self.inp(x) + self.table_emb(batch.table_ids)
        if self.cfg.positional:
            h = h + self.height_emb(batch.heights)
        h = h.clone()
        h[:, 0] = self.super_node
        return h

    def forward(self, batch: PlanBatch, n_layers: Optional[int] = None) -> torch.Tensor:
        if batch.x.shape[-1] != self.inp.in_features:
            raise ShapeMismatch(f"feature width {batch.x.shape[-1]} != {self.inp.in_features}")
        h = self.embed(batch)
        layers = self.layers if n_layers is None else self.layers[:n_layers]
        for layer in layers:
            h = layer(h, batch.allow)
        return h if n_layers is not None else self.ln(h)


class Projection(nn.Module):
    """MLP from the encoder width into the backbone embedding width.

    ``init="identity"`` (square only) makes the map exactly the identity at start.
    """

    def __init__(self, d_in: int, d_out: int, hidden: int = 128, init: str = "default"):
        super().__init__()
        self.fc1 = nn.Linear(d_in, hidden)
        self.fc2 = nn.Linear(hidden, d_out)
        self.skip = nn.Linear(d_in, d_out, bias=False)
        if init == "identity":
            if d_in != d_out:
                raise ShapeMismatch("identity init requires d_in == d_out")
            with torch.no_grad():
                self.skip.weight.copy_(torch.eye(d_in))
                self.fc2.weight.zero_()
                self.fc2.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.fc1.in_features:
            raise ShapeMismatch(f"expected width {self.fc1.in_features}, got {x.shape[-1]}")
        return self.skip(x) + self.fc2(F.gelu(self.fc1(x)))


def encode(tree: PlanTree, features: List[NodeFeatureVector], mask: np.ndarray,
           encoder: PlanEncoder) -> torch.Tensor:
    """Single-plan convenience wrapper: (m, d_p) last-layer embeddings."""
    if len(features) + 1 != mask.shape[0] or len(linearize(tree)) != mask.shape[0]:
        raise ShapeMismatch("features, mask and tree disagree on m")
    dtype = next(encoder.parameters()).dtype
    batch = PlanBatch.collate([features], [mask], encoder.cfg, dtype=dtype)
    return encoder(batch)[0]
