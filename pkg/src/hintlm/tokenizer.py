"""Word-level tokenizer trained on the workload corpus.

Text is lower-cased and split into identifiers, single digits, and single
punctuation characters; identifiers outside the vocabulary map to ``[UNK]``.
Because splitting is maximal-munch, concatenating two strings can only merge
boundary tokens: ``count(a + b) <= count(a) + count(b)``.
"""
from __future__ import annotations

import re
import string
from collections import Counter
from typing import Dict, Iterable, List, Mapping, Any

PAD, UNK = "[PAD]", "[UNK]"
_TOKEN = re.compile(r"[a-z_][a-z0-9_\-]*|\d|[^\sa-z0-9_]")

_BASE = [PAD, UNK] + list(string.digits) + list(string.punctuation)


def split(text: str) -> List[str]:
    return _TOKEN.findall(text.lower())


def token_count(text: str) -> int:
    return len(split(text))


class Tokenizer:
    def __init__(self, vocab: List[str]):
        if vocab[:2] != [PAD, UNK]:
            raise ValueError("vocabulary must start with [PAD], [UNK]")
        self.vocab = list(vocab)
        self.index: Dict[str, int] = {t: i for i, t in enumerate(self.vocab)}

    @classmethod
    def train(cls, texts: Iterable[str], min_freq: int = 1) -> "Tokenizer":
        counts = Counter(tok for t in texts for tok in split(t))
        words = sorted((w for w, c in counts.items() if c >= min_freq and w not in _BASE),
                       key=lambda w: (-counts[w], w))
        return cls(_BASE + words)

    def __len__(self) -> int:
        return len(self.vocab)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def encode(self, text: str) -> List[int]:
        return [self.index.get(t, 1) for t in split(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.vocab[i] for i in ids)

    def count(self, text: str) -> int:
        return token_count(text)

    def state_dict(self) -> Dict[str, Any]:
        return {"kind": "word", "vocab": list(self.vocab)}

    @classmethod
    def from_state(cls, state: Mapping[str, Any]) -> "Tokenizer":
        return cls(list(state["vocab"]))
