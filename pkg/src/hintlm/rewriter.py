"""SQL-to-natural-language rewriting through an external chat model, with a mandatory cache."""
from __future__ import annotations

import datetime as _dt
import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, Mapping, Optional, Protocol

log = logging.getLogger(__name__)

API_KEY_ENV = "HINTLM_REWRITER_API_KEY"

ROLE_TEXT = ("You are a helpful assistant specializing in query optimization. "
             "You need to capture the key feature of the SQL execution plan.")

REWRITE_TEMPLATE = (
    "You are an SQL explanation assistant. I will provide an SQL query, and you should "
    "convert it into a brief natural language description, summarizing its purpose and "
    "steps. Highlight the goal of the query, the involved tables, any filtering conditions, "
    "and any aggregation, sorting, or other operations used. SQL: {sql}."
)


class RewriterUnavailable(RuntimeError):
    pass


class UpstreamError(RuntimeError):
    def __init__(self, message: str, retries: int):
        super().__init__(f"{message} (after {retries} retries)")
        self.retries = retries


def role_text() -> str:
    return ROLE_TEXT


_KEYWORDS = {
    "select", "from", "where", "and", "or", "not", "as", "join", "inner", "left", "right",
    "outer", "on", "group", "by", "order", "having", "limit", "in", "like", "between", "is",
    "null", "count", "sum", "min", "max", "avg", "distinct", "asc", "desc", "exists", "union",
    "all", "case", "when", "then", "else", "end",
}
_LITERAL_OR_WORD = re.compile(r"'(?:[^']|'')*'|\"[^\"]*\"|[A-Za-z_]\w*|\S")


def normalize_sql(sql: str) -> str:
    """Collapse whitespace and lower-case keywords; literals and identifiers keep their case."""
    out = []
    for tok in _LITERAL_OR_WORD.findall(sql.strip().rstrip(";").strip()):
        out.append(tok.lower() if tok.lower() in _KEYWORDS else tok)
    return " ".join(out)


def fingerprint(sql: str) -> str:
    return hashlib.sha256(normalize_sql(sql).encode()).hexdigest()


@dataclass(frozen=True)
class RewriteCacheEntry:
    sql_fingerprint: str
    rewritten_nl: str
    model_name: str
    created_at: str

    def __post_init__(self):
        if not self.rewritten_nl:
            raise ValueError("rewritten text must be non-empty")


class RewriteCache:
    """JSON map fingerprint -> entry. Reads are lock-free; writes are serialized."""

    def __init__(self, path: Optional[str | Path] = None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self.entries: Dict[str, RewriteCacheEntry] = {}
        if self.path and self.path.exists():
            raw = json.loads(self.path.read_text())
            self.entries = {k: RewriteCacheEntry(**v) for k, v in raw.items()}

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, sql: str) -> Optional[RewriteCacheEntry]:
        return self.entries.get(fingerprint(sql))

    def put(self, sql: str, text: str, model_name: str) -> RewriteCacheEntry:
        entry = RewriteCacheEntry(fingerprint(sql), text, model_name,
                                  _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"))
        with self._lock:
            self.entries[entry.sql_fingerprint] = entry
            self.save()
        return entry

    def save(self) -> None:
        if self.path is None:
            return
        doc = {k: asdict(v) for k, v in sorted(self.entries.items())}
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        tmp.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        tmp.replace(self.path)


class RewriteClient(Protocol):
    model_name: str

    def complete(self, prompt: str) -> str: ...


class ReplayClient:
    """Answers from a fixed mapping (or function) of SQL -> text; counts calls."""

    def __init__(self, answers: Mapping[str, str] | Callable[[str], str], model_name: str = "replay"):
        self.answers = answers
        self.model_name = model_name
        self.calls = 0

    def complete(self, prompt: str) -> str:
        self.calls += 1
        sql = prompt[len(REWRITE_TEMPLATE.split("{sql}")[0]):-1]
        if callable(self.answers):
            return self.answers(sql)
        return self.answers[sql]


class HTTPChatClient:
    """OpenAI-style chat-completions endpoint; the API key comes from the environment."""

    def __init__(self, endpoint: str, model_name: str, api_key: Optional[str] = None,
                 timeout_s: float = 60.0, retries: int = 3, min_interval_s: float = 0.0):
        self.endpoint = endpoint
        self.model_name = model_name
        self.api_key = api_key or os.environ.get(API_KEY_ENV)
        self.timeout_s = timeout_s
        self.retries = retries
        self.min_interval_s = min_interval_s
        self._last = 0.0
        self._lock = threading.Lock()

    def complete(self, prompt: str) -> str:
        import httpx

        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        body = {"model": self.model_name, "messages": [{"role": "user", "content": prompt}]}
        last_exc: Optional[Exception] = None
        for attempt in range(self.retries + 1):
            with self._lock:
                wait = self._last + self.min_interval_s - time.monotonic()
                if wait > 0:
                    time.sleep(wait)
                self._last = time.monotonic()
            try:
                resp = httpx.post(self.endpoint, json=body, headers=headers, timeout=self.timeout_s)
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"].strip()
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                last_exc = exc
                log.warning("rewrite attempt %d failed: %s", attempt + 1, exc)
                time.sleep(min(2 ** attempt, 10))
        raise UpstreamError(str(last_exc), self.retries)


def rewrite_sql(sql: str, client: Optional[RewriteClient], cache: RewriteCache,
                offline: bool = False) -> str:
    """Cached rewrite; the client is only contacted on a cache miss."""
    hit = cache.get(sql)
    if hit is not None:
        return hit.rewritten_nl
    if offline or client is None:
        raise RewriterUnavailable(f"no cached rewrite for query {fingerprint(sql)[:12]}")
    try:
        text = client.complete(REWRITE_TEMPLATE.format(sql=sql))
    except UpstreamError:
        raise
    except Exception as exc:  # client implementations raise arbitrary errors
        raise UpstreamError(str(exc), 0) from exc
    return cache.put(sql, text, client.model_name).rewritten_nl
