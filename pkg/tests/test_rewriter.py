import json

import httpx
import pytest

from hintlm.rewriter import (REWRITE_TEMPLATE, HTTPChatClient, ReplayClient, RewriteCache,
                             RewriterUnavailable, UpstreamError, fingerprint, normalize_sql,
                             rewrite_sql, role_text)

SQL = "SELECT a.x FROM t AS a WHERE a.name = 'Bob'"


def test_role_text():
    assert role_text().startswith("You are a helpful assistant")
    assert "SQL execution plan" in role_text()
    assert role_text() == role_text()


def test_normalization_and_fingerprint():
    assert normalize_sql("select  a.x\nFROM t as a where a.name = 'Bob';") == normalize_sql(SQL)
    assert fingerprint("SELECT 1") == fingerprint("select   1 ;")
    assert fingerprint(SQL) != fingerprint(SQL.replace("Bob", "bob"))  # literals keep case


def test_cache_hit_avoids_client(tmp_path):
    cache = RewriteCache(tmp_path / "cache.json")
    client = ReplayClient(lambda sql: f"Describes {sql[:10]}")
    first = rewrite_sql(SQL, client, cache)
    second = rewrite_sql("select a.x from t as a where a.name = 'Bob'", client, cache)
    assert first == second and client.calls == 1
    reloaded = RewriteCache(tmp_path / "cache.json")
    assert len(reloaded) == 1
    assert rewrite_sql(SQL, None, reloaded, offline=True) == first


def test_template_sent_verbatim():
    seen = []

    class Spy:
        model_name = "spy"

        def complete(self, prompt):
            seen.append(prompt)
            return "text"

    rewrite_sql(SQL, Spy(), RewriteCache())
    assert seen == [REWRITE_TEMPLATE.format(sql=SQL)]
    assert seen[0].startswith("You are an SQL explanation assistant.")


def test_offline_miss_and_upstream_errors():
    with pytest.raises(RewriterUnavailable):
        rewrite_sql(SQL, ReplayClient({}), RewriteCache(), offline=True)
    with pytest.raises(RewriterUnavailable):
        rewrite_sql(SQL, None, RewriteCache())
    with pytest.raises(UpstreamError):
        rewrite_sql(SQL, ReplayClient({}), RewriteCache())  # KeyError inside the client


def test_http_client_retries(monkeypatch):
    calls = []

    def fake_post(url, json=None, headers=None, timeout=None):
        calls.append(headers)
        req = httpx.Request("POST", url)
        if len(calls) < 2:
            return httpx.Response(503, request=req)
        return httpx.Response(200, request=req, json={"choices": [{"message": {"content": " ok "}}]})

    monkeypatch.setattr(httpx, "post", fake_post)
    monkeypatch.setattr("time.sleep", lambda s: None)
    monkeypatch.setenv("HINTLM_REWRITER_API_KEY", "k")
    client = HTTPChatClient("http://x", "m", retries=2)
    assert client.complete("p") == "ok"
    assert calls[0] == {"Authorization": "Bearer k"}
    monkeypatch.setattr(httpx, "post", lambda *a, **k: httpx.Response(500, request=httpx.Request("POST", "http://x")))
    with pytest.raises(UpstreamError) as exc:
        HTTPChatClient("http://x", "m", retries=1).complete("p")
    assert exc.value.retries == 1
