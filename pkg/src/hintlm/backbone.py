"""Small causal language model that turns a mixed text/soft prompt into a plan embedding."""
from __future__ import annotations

import enum
import hashlib
import math
import os
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import torch
from torch import nn
import torch.nn.functional as F

from .prompt import ComposedPrompt

PRETRAINED_ENV = "HINTLM_PRETRAINED_WEIGHTS"


class ContextOverflow(ValueError):
    pass


class BackboneMode(str, enum.Enum):
    TOY = "TOY"
    FROZEN_PRETRAINED = "FROZEN_PRETRAINED"
    LOWRANK = "LOWRANK"


@dataclass
class BackboneConfig:
    d_llm: int = 128
    layers: int = 2
    heads: int = 4
    context_limit: int = 1024
    mode: BackboneMode = BackboneMode.TOY
    rank: int = 8
    seed: int = 42
    vocab_size: int = 0
    pretrained_path: Optional[str] = None

    def __post_init__(self):
        self.mode = BackboneMode(self.mode)
        if self.mode is BackboneMode.LOWRANK and self.rank < 1:
            raise ValueError("LOWRANK mode needs rank >= 1")
        if self.d_llm % self.heads:
            raise ValueError("d_llm must be divisible by heads")

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


class LowRankLinear(nn.Module):
    """``W + A·B`` with ``A: d_out×r``, ``B: r×d_in``; ``B`` starts at zero."""

    def __init__(self, base: nn.Linear, r: int):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        dtype = base.weight.dtype
        self.A = nn.Parameter(torch.empty(base.out_features, r, dtype=dtype))
        self.B = nn.Parameter(torch.zeros(r, base.in_features, dtype=dtype))
        nn.init.kaiming_uniform_(self.A, a=math.sqrt(5))

    @property
    def weight(self) -> torch.Tensor:
        return self.base.weight + self.A @ self.B

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + (x @ self.B.T) @ self.A.T


class CausalSelfAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        N, L, d = t.shape
        return t.view(N, L, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        N, L, d = x.shape
        y = F.scaled_dot_product_attention(self._split(self.q(x)), self._split(self.k(x)),
                                           self._split(self.v(x)), is_causal=True)
        return self.o(y.transpose(1, 2).reshape(N, L, d))

    def forward_last(self, x: torch.Tensor, last: torch.Tensor) -> torch.Tensor:
        """Attention output for one query position per row (``last``), keys ``<= last``."""
        N, L, d = x.shape
        xq = x[torch.arange(N), last][:, None]
        keep = torch.arange(L)[None, :] <= last[:, None]
        y = F.scaled_dot_product_attention(self._split(self.q(xq)), self._split(self.k(x)),
                                           self._split(self.v(x)), attn_mask=keep[:, None, None])
        return self.o(y.transpose(1, 2).reshape(N, 1, d))[:, 0]


class Block(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = CausalSelfAttention(d, heads)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))

    def forward_last(self, x, last):
        h = x[torch.arange(x.shape[0]), last] + self.attn.forward_last(self.ln1(x), last)
        return h + self.mlp(self.ln2(h))


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        if cfg.vocab_size <= 0:
            raise ValueError("vocab_size must be set from the tokenizer")
        self.cfg = cfg
        d = cfg.d_llm
        self.tok_emb = nn.Embedding(cfg.vocab_size, d)
        self.pos_emb = nn.Embedding(cfg.context_limit, d)
        self.blocks = nn.ModuleList(Block(d, cfg.heads) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(d)
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        nn.init.normal_(self.pos_emb.weight, std=0.02)

    def inputs(self, prompts: Sequence[ComposedPrompt], plan_soft: Sequence[torch.Tensor]):
        """Embedded, right-padded input sequences and the index of each last position."""
        lengths = [len(p) for p in prompts]
        if not all(lengths):
            raise ValueError("prompt has not been realized with a tokenizer")
        L = max(lengths)
        if L > self.cfg.context_limit:
            raise ContextOverflow(f"prompt length {L} > context limit {self.cfg.context_limit}")
        N, d = len(prompts), self.cfg.d_llm
        ids = torch.zeros(N, L, dtype=torch.long)
        rows = torch.full((N, L), -1, dtype=torch.long)
        for b, p in enumerate(prompts):
            ids[b, :lengths[b]] = torch.as_tensor(p.token_ids).clamp(min=0)
            rows[b, :lengths[b]] = torch.as_tensor(p.soft_rows)
        x = self.tok_emb(ids)
        is_soft = rows >= 0
        if is_soft.any():
            M = max(s.shape[0] for s in plan_soft)
            for s in plan_soft:
                if s.shape[-1] != d:
                    raise ValueError(f"soft rows have width {s.shape[-1]}, expected {d}")
            soft = torch.stack([F.pad(s, (0, 0, 0, M - s.shape[0])) for s in plan_soft])
            if int(rows.max()) >= M:
                raise ValueError("prompt references a soft row the plan does not have")
            gathered = soft[torch.arange(N)[:, None], rows.clamp(min=0)]
            x = torch.where(is_soft[..., None], gathered, x)
        x = x + self.pos_emb(torch.arange(L))[None]
        return x, torch.as_tensor(lengths) - 1

    def forward(self, prompts: Sequence[ComposedPrompt],
                plan_soft: Sequence[torch.Tensor]) -> torch.Tensor:
        """Top-layer hidden state at each prompt's final position, shape (N, d_llm)."""
        x, last = self.inputs(prompts, plan_soft)
        for blk in self.blocks[:-1]:
            x = blk(x)
        h = self.blocks[-1].forward_last(x, last)
        return self.ln_f(h)

    def forward_full(self, prompts, plan_soft) -> torch.Tensor:
        """All top-layer positions; used to cross-check the last-position shortcut."""
        x, last = self.inputs(prompts, plan_soft)
        for blk in self.blocks:
            x = blk(x)
        return self.ln_f(x)

    def base_parameters(self) -> List[nn.Parameter]:
        return [p for n, p in self.named_parameters() if not n.endswith((".A", ".B"))]

    def adapter_parameters(self) -> List[nn.Parameter]:
        return [p for n, p in self.named_parameters() if n.endswith((".A", ".B"))]


def apply_low_rank(model: Backbone, r: int) -> List[nn.Parameter]:
    """Wrap every attention projection with a rank-``r`` adapter and freeze the base.

    Returns the new trainable adapter parameters.
    """
    if r < 1:
        raise ValueError("rank must be >= 1")
    for blk in model.blocks:
        for name in ("q", "k", "v", "o"):
            lin = getattr(blk.attn, name)
            if not isinstance(lin, LowRankLinear):
                setattr(blk.attn, name, LowRankLinear(lin, r))
    for p in model.base_parameters():
        p.requires_grad_(False)
    return model.adapter_parameters()


def freeze(model: Backbone) -> None:
    for p in model.parameters():
        p.requires_grad_(False)


def checksum(params: Sequence[torch.Tensor]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def load_pretrained(model: Backbone, path: str) -> None:
    """Load base weights saved with ``torch.save(model.state_dict())`` for the same shape."""
    state = torch.load(path, map_location="cpu", weights_only=True)
    own = {k: v for k, v in model.state_dict().items() if not k.endswith((".A", ".B"))}
    missing = set(own) - set(state)
    if missing:
        raise ValueError(f"pretrained weights missing {sorted(missing)[:3]}...")
    with torch.no_grad():
        for k, v in own.items():
            if state[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {tuple(state[k].shape)} vs {tuple(v.shape)}")
            v.copy_(state[k].to(v.dtype))


def build_backbone(cfg: BackboneConfig, dtype=torch.float64) -> Backbone:
    """Construct a backbone and configure it for ``cfg.mode``."""
    torch.manual_seed(cfg.seed)
    model = Backbone(cfg).to(dtype)
    path = cfg.pretrained_path or os.environ.get(PRETRAINED_ENV)
    if path and cfg.mode is not BackboneMode.TOY:
        load_pretrained(model, path)
    if cfg.mode is BackboneMode.FROZEN_PRETRAINED:
        freeze(model)
    elif cfg.mode is BackboneMode.LOWRANK:
        apply_low_rank(model, cfg.rank)
    return model
