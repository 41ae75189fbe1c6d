"""Hint sets: boolean planner toggles over join and scan operator families."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Sequence, Tuple

JOIN_FAMILIES: Tuple[str, ...] = ("hashjoin", "mergejoin", "nestloop")
SCAN_FAMILIES: Tuple[str, ...] = ("seqscan", "indexscan", "indexonlyscan")
FAMILIES: Tuple[str, ...] = JOIN_FAMILIES + SCAN_FAMILIES

CATALOG_FORMAT = "hintlm-hint-catalog"
CATALOG_VERSION = 1

FAMILY_NAMES = {
    "hashjoin": "hash join",
    "mergejoin": "merge join",
    "nestloop": "nested loop join",
    "seqscan": "sequential scan",
    "indexscan": "index scan",
    "indexonlyscan": "index-only scan",
}

# PostgreSQL planner GUCs
FAMILY_GUC = {f: f"enable_{f}" for f in FAMILIES}


class InvalidHint(ValueError):
    pass


@dataclass(frozen=True)
class HintSet:
    hint_id: str
    toggles: Tuple[Tuple[str, bool], ...]

    def __post_init__(self):
        fams = [f for f, _ in self.toggles]
        if sorted(fams) != sorted(FAMILIES):
            raise InvalidHint(f"{self.hint_id}: toggles must cover exactly {FAMILIES}")
        t = dict(self.toggles)
        if not any(t[f] for f in JOIN_FAMILIES):
            raise InvalidHint(f"{self.hint_id}: every join family disabled")
        if not any(t[f] for f in SCAN_FAMILIES):
            raise InvalidHint(f"{self.hint_id}: every scan family disabled")

    @classmethod
    def make(cls, hint_id: str, toggles: Mapping[str, bool]) -> "HintSet":
        return cls(hint_id, tuple((f, bool(toggles[f])) for f in FAMILIES))

    @property
    def toggle_map(self) -> Dict[str, bool]:
        return dict(self.toggles)

    def enabled(self, family: str) -> bool:
        return self.toggle_map[family]

    @property
    def disabled_families(self) -> List[str]:
        t = self.toggle_map
        return [f for f in FAMILIES if not t[f]]

    def to_dict(self) -> Dict:
        return {"hint_id": self.hint_id, "toggles": self.toggle_map}


@dataclass(frozen=True)
class HintCatalog:
    hints: Tuple[HintSet, ...]
    source: str = "builtin"

    def __post_init__(self):
        ids = [h.hint_id for h in self.hints]
        if len(set(ids)) != len(ids):
            raise InvalidHint("duplicate hint ids in catalog")
        if not ids:
            raise InvalidHint("empty catalog")

    def __len__(self) -> int:
        return len(self.hints)

    def __iter__(self) -> Iterator[HintSet]:
        return iter(self.hints)

    def __getitem__(self, key):
        if isinstance(key, str):
            for h in self.hints:
                if h.hint_id == key:
                    return h
            raise KeyError(key)
        return self.hints[key]

    @property
    def ids(self) -> List[str]:
        return [h.hint_id for h in self.hints]

    def index(self, hint_id: str) -> int:
        return self.ids.index(hint_id)

    def dumps(self) -> str:
        """Canonical JSON form; load(dumps(c)) then dumps() is byte-identical."""
        doc = {
            "format": CATALOG_FORMAT,
            "version": CATALOG_VERSION,
            "hints": [h.to_dict() for h in self.hints],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str, source: str = "config") -> "HintCatalog":
        doc = json.loads(text)
        if isinstance(doc, dict):
            if doc.get("version", CATALOG_VERSION) != CATALOG_VERSION:
                raise InvalidHint(f"unsupported catalog version {doc.get('version')}")
            entries = doc["hints"]
        else:
            entries = doc
        return cls(tuple(HintSet.make(e["hint_id"], e["toggles"]) for e in entries), source)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "HintCatalog":
        return cls.loads(Path(path).read_text(), source=str(path))


def _hint_id(disabled: Sequence[str]) -> str:
    return "default" if not disabled else "no_" + "+no_".join(disabled)


def default_catalog() -> HintCatalog:
    """The 16 builtin hint sets.

    Index 0 enables everything (the unhinted optimizer). The rest are the
    single-family disables followed by double-family disables, enumerating
    families alphabetically, truncated at 16.
    """
    fams = sorted(FAMILIES)
    combos: List[Tuple[str, ...]] = [()]
    combos += [(f,) for f in fams]
    combos += list(itertools.combinations(fams, 2))
    hints: List[HintSet] = []
    for disabled in combos:
        toggles = {f: f not in disabled for f in FAMILIES}
        try:
            h = HintSet.make(_hint_id(disabled), toggles)
        except InvalidHint:
            continue
        hints.append(h)
        if len(hints) == 16:
            break
    return HintCatalog(tuple(hints), "builtin")


def render_session_commands(h: HintSet) -> List[str]:
    """One ``SET`` statement per disabled family, in family declaration order."""
    return [f"SET {FAMILY_GUC[f]} TO off;" for f in h.disabled_families]


def reset_session_commands(h: HintSet) -> List[str]:
    return [f"RESET {FAMILY_GUC[f]};" for f in h.disabled_families]


def _join_words(words: List[str]) -> str:
    if len(words) == 1:
        return words[0]
    return ", ".join(words[:-1]) + " and " + words[-1]


def render_hint_text(h: HintSet) -> str:
    disabled = h.disabled_families
    if not disabled:
        return "All join and scan operators are enabled."
    names = [FAMILY_NAMES[f] for f in disabled]
    verb = "is" if len(names) == 1 else "are"
    return (f"The {_join_words(names)} {verb} disabled; "
            f"all other join and scan operators are enabled.")
