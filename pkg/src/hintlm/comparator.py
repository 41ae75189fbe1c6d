"""Four-class pairwise plan comparator.

A label ``y`` is the number of tournament points the *first* plan of an ordered
pair earns: 0 = first plan much slower, 1 = slightly slower, 2 = slightly
faster, 3 = much faster.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

N_CLASSES = 4
RATIO_HI = 3 / 2
RATIO_LO = 2 / 3
DIFF_MS = 1000.0


class NonPositiveLatency(ValueError):
    pass


class EmptyBatch(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


def ground_truth_label(t0: float, t1: float) -> int:
    """Label for the ordered pair (t0, t1) of latencies in ms.

    The branches overlap (two are disjunctions, two conjunctions), so they are
    tried in the order 0, 3, 1, 2.
    """
    if not (t0 > 0 and t1 > 0) or not (math.isfinite(t0) and math.isfinite(t1)):
        raise NonPositiveLatency(f"latencies must be positive and finite: {t0}, {t1}")
    r0 = t0 / t1
    r1 = t0 - t1
    if r0 >= RATIO_HI or r1 >= DIFF_MS:
        return 0
    if r0 < RATIO_LO or r1 < -DIFF_MS:
        return 3
    if 1 <= r0 < RATIO_HI and 0 <= r1 < DIFF_MS:
        return 1
    if RATIO_LO <= r0 < 1 and -DIFF_MS <= r1 < 0:
        return 2
    raise AssertionError(f"unlabelled pair {t0}, {t1}")  # unreachable for positive inputs


def ground_truth_labels(t0: np.ndarray, t1: np.ndarray) -> np.ndarray:
    """Vectorized :func:`ground_truth_label` with the same branch order."""
    t0 = np.asarray(t0, dtype=float)
    t1 = np.asarray(t1, dtype=float)
    if np.any(~(t0 > 0)) or np.any(~(t1 > 0)) or not np.all(np.isfinite(t0 / t1)):
        raise NonPositiveLatency("latencies must be positive and finite")
    r0 = t0 / t1
    r1 = t0 - t1
    return np.select(
        [(r0 >= RATIO_HI) | (r1 >= DIFF_MS),
         (r0 < RATIO_LO) | (r1 < -DIFF_MS),
         (r0 >= 1) & (r0 < RATIO_HI) & (r1 >= 0) & (r1 < DIFF_MS),
         (r0 >= RATIO_LO) & (r0 < 1) & (r1 >= -DIFF_MS) & (r1 < 0)],
        [0, 3, 1, 2], default=-1)


@dataclass
class ComparatorConfig:
    d_llm: int = 128
    class_weights: List[float] = field(default_factory=lambda: [2.0, 1.0, 1.0, 2.0])

    def __post_init__(self):
        if len(self.class_weights) != N_CLASSES or min(self.class_weights) <= 0:
            raise ValueError("class_weights must be 4 positive numbers")

    def to_dict(self) -> Dict:
        return asdict(self)


class Comparator(nn.Module):
    """Router plus two linear heads over the concatenated pair embedding.

    In training mode the heads are mixed by the router's gate; in eval mode
    the gate is rounded and a single head is used.
    """

    def __init__(self, cfg: ComparatorConfig):
        super().__init__()
        self.cfg = cfg
        d2 = 2 * cfg.d_llm
        self.router = nn.Linear(d2, 1)
        self.head0 = nn.Linear(d2, N_CLASSES)
        self.head1 = nn.Linear(d2, N_CLASSES)
        self.register_buffer("class_weights", torch.tensor(cfg.class_weights, dtype=torch.float64))

    def gate(self, e_cat: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.router(e_cat))[..., 0]

    def logits(self, e0: torch.Tensor, e1: torch.Tensor, hard: bool | None = None) -> torch.Tensor:
        d = self.cfg.d_llm
        if e0.shape[-1] != d or e1.shape[-1] != d or e0.shape != e1.shape:
            raise ShapeMismatch(f"embeddings must both have width {d}: {tuple(e0.shape)}, {tuple(e1.shape)}")
        e_cat = torch.cat([e0, e1], dim=-1)
        g = self.gate(e_cat)[..., None]
        hard = (not self.training) if hard is None else hard
        if hard:
            return torch.where(g >= 0.5, self.head1(e_cat), self.head0(e_cat))
        return (1 - g) * self.head0(e_cat) + g * self.head1(e_cat)

    def forward(self, e0: torch.Tensor, e1: torch.Tensor, hard: bool | None = None) -> torch.Tensor:
        """Class probabilities, shape (..., 4)."""
        return torch.softmax(self.logits(e0, e1, hard), dim=-1)


def weighted_loss(logits: torch.Tensor, labels: torch.Tensor, w: torch.Tensor | Sequence[float]) -> torch.Tensor:
    """Mean over samples of ``w[y] * -log softmax(logits)[y]`` (pre-softmax scores in)."""
    if logits.shape[0] == 0:
        raise EmptyBatch("empty batch")
    w = torch.as_tensor(w, dtype=logits.dtype)
    labels = torch.as_tensor(labels, dtype=torch.long)
    nll = -F.log_softmax(logits, dim=-1).gather(-1, labels[:, None])[:, 0]
    return (w[labels] * nll).mean()
