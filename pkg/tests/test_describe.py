import datetime as dt
import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest
import requests
from hypothesis import given, settings, strategies as st

from free_env.core import STREAM_SCHEMA, Sample
from free_env.describe import (API_KEY_ENV, Describer, DescribeError, Description, DescriptionCache, PromptConfig,
                               ProtocolError, RemoteConfig, TransportError, build_prompt, cache_key,
                               describe_remote, render_template)
from free_env.linearize import AuxObservation, linearize, linearize_with_auxiliary

from conftest import WINTER_FEATURES

D = dt.date(2006, 12, 4)
WINTER_DAY = Sample("s1", D, WINTER_FEATURES)
TEMPLATE = PromptConfig()


def test_winter_sample_phrases():
    text = render_template(TEMPLATE, linearize(WINTER_DAY)).text
    assert text.startswith("The date was December 4, 2006.")
    assert "no recorded rainfall" in text
    assert "-3.36 degrees Celsius" in text
    assert "freezing-thawing" in text
    assert "108.26 watts per square meter" in text


def test_warm_air_has_no_freezing_clause():
    text = render_template(TEMPLATE, linearize(Sample("s1", D, {"air_temperature": 3.0}))).text
    assert "freezing" not in text and "3 degrees Celsius" in text


def test_date_only_record():
    assert render_template(TEMPLATE, linearize(Sample("s1", D))).text == "The date was December 4, 2006."


def test_aux_sentence():
    rec = linearize_with_auxiliary(Sample("s1", D), [AuxObservation("s1", D - dt.timedelta(days=1), 4.21)])
    text = render_template(TEMPLATE, rec).text
    assert text == ("On December 3, 2006, the observed water temperature at site s1 was 4.21 degrees Celsius. "
                    "The date was December 4, 2006.")


def test_unknown_unit_warns_and_renders_unitless():
    s = Sample("s1", D, {"turbidity": 3.5})
    with pytest.warns(UserWarning, match="no unit phrase"):
        text = render_template(TEMPLATE, linearize(s, units={"turbidity": "NTU"})).text
    assert text.endswith("The turbidity was 3.50.")


def test_render_determinism_and_key_shape():
    a = render_template(TEMPLATE, linearize(WINTER_DAY))
    b = render_template(TEMPLATE, linearize(WINTER_DAY))
    assert a.text == b.text and a.cache_key == b.cache_key and a == b
    assert len(a.cache_key) == 64 and int(a.cache_key, 16) >= 0


def test_cache_key_inputs_matter():
    pairs = [("date", "2006-12-04")]
    base = cache_key("v1", "p", pairs, "s")
    assert base != cache_key("v2", "p", pairs, "s")
    assert base != cache_key("v1", "q", pairs, "s")
    assert base != cache_key("v1", "p", pairs, "t")
    assert base != cache_key("v1", "p", [("date", "2006-12-05")], "s")


def test_cache_keys_distinct_over_large_corpus():
    keys = {cache_key("v", "p", [("date", "2006-12-04"), ("x", str(i))], "s") for i in range(100_000)}
    assert len(keys) == 100_000


def test_pipeline_composition():
    assert (render_template(TEMPLATE, linearize_with_auxiliary(WINTER_DAY, [])).text
            == render_template(TEMPLATE, linearize(WINTER_DAY)).text)


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(st.sampled_from(STREAM_SCHEMA), st.floats(-50, 500, allow_nan=False), max_size=7),
       st.dictionaries(st.sampled_from(STREAM_SCHEMA), st.floats(-50, 500, allow_nan=False), max_size=7))
def test_template_total_and_injective(f1, f2):
    r1, r2 = linearize(Sample("s1", D, f1)), linearize(Sample("s1", D, f2))
    t1, t2 = render_template(TEMPLATE, r1).text, render_template(TEMPLATE, r2).text
    assert t1 and t2
    if r1.pairs != r2.pairs:
        assert t1 != t2


def test_prompt_assembly():
    prompt = build_prompt(TEMPLATE, linearize(WINTER_DAY))
    lines = prompt.split("\n")
    assert lines[0] == TEMPLATE.prefix and lines[-1] == TEMPLATE.suffix
    assert lines[1:-1] == ["[date: 2006-12-04]", "[rainfall: 0]", "[air temperature: -3.36]",
                           "[solar radiation: 108.26]"]


def test_prompt_config_invariants():
    with pytest.raises(ValueError):
        PromptConfig(prefix="")
    with pytest.raises(ValueError):
        PromptConfig(source="oracle")


# --- cache -----------------------------------------------------------------

def test_cache_round_trip_and_idempotence(tmp_path):
    cache = DescriptionCache(tmp_path)
    desc = render_template(TEMPLATE, linearize(WINTER_DAY))
    assert cache.get(desc.cache_key) is None
    cache.put(desc)
    cache.put(desc)
    assert cache.get(desc.cache_key) == desc
    lines = (tmp_path / "descriptions.jsonl").read_text().splitlines()
    assert len(lines) == 1
    assert set(json.loads(lines[0])) == {"key", "text", "source", "version", "created"}
    assert DescriptionCache(tmp_path).get(desc.cache_key) == desc


def test_cache_latest_wins_and_corrupt_lines(tmp_path):
    path = tmp_path / "c.jsonl"
    cache = DescriptionCache(path)
    cache.put(Description("first", "k" * 64, "template", "v"))
    cache.put(Description("second", "k" * 64, "template", "v"))
    with path.open("a") as fh:
        fh.write("{not json\n")
    with pytest.warns(UserWarning, match="corrupt"):
        again = DescriptionCache(path)
    assert again.get("k" * 64).text == "second"


# --- remote client -----------------------------------------------------------

class FakeSession:
    def __init__(self, responses):
        self.responses = list(responses)
        self.calls = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls.append((url, json, headers))
        r = self.responses.pop(0)
        if isinstance(r, Exception):
            raise r
        return r


class Resp:
    def __init__(self, status, body):
        self.status_code = status
        self._body = body
        self.text = str(body)

    def json(self):
        if isinstance(self._body, str):
            raise ValueError("not json")
        return self._body


def ok(text):
    return Resp(200, {"choices": [{"message": {"content": text}}]})


REMOTE = PromptConfig(source="remote_llm", remote=RemoteConfig(base_url="http://x/v1", model_id="m1",
                                                                max_retries=2, backoff_s=0.5))


@pytest.fixture
def api_key(monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, "secret")


def test_remote_pass_through(api_key):
    session = FakeSession([ok("A cold dry day.")])
    desc = describe_remote(REMOTE, linearize(WINTER_DAY), session=session, sleep=lambda s: None)
    assert desc.text == "A cold dry day." and desc.version == "m1" and desc.source == "remote_llm"
    url, body, headers = session.calls[0]
    assert url == "http://x/v1/chat/completions"
    assert body["model"] == "m1" and body["messages"][0]["role"] == "user"
    assert body["messages"][0]["content"] == build_prompt(REMOTE, linearize(WINTER_DAY))
    assert headers["Authorization"] == "Bearer secret"


def test_remote_retries_then_transport_error(api_key):
    sleeps = []
    session = FakeSession([requests.ConnectionError("down")] * 3)
    with pytest.raises(TransportError, match="after 3 attempts"):
        describe_remote(REMOTE, linearize(WINTER_DAY), session=session, sleep=sleeps.append)
    assert len(session.calls) == 3 and sleeps == [0.5, 1.0]


def test_remote_retries_on_5xx_and_429(api_key):
    session = FakeSession([Resp(503, "busy"), Resp(429, "slow"), ok("fine")])
    assert describe_remote(REMOTE, linearize(WINTER_DAY), session=session, sleep=lambda s: None).text == "fine"


@pytest.mark.parametrize("resp", [ok(""), ok("   "), Resp(200, "garbage"), Resp(200, {"choices": []}),
                                  Resp(400, "bad request")])
def test_remote_protocol_errors(api_key, resp):
    with pytest.raises(ProtocolError):
        describe_remote(REMOTE, linearize(WINTER_DAY), session=FakeSession([resp]), sleep=lambda s: None)


def test_remote_requires_credentials(monkeypatch):
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    with pytest.raises(DescribeError, match="credentials"):
        describe_remote(REMOTE, linearize(WINTER_DAY), session=FakeSession([]))


class _Handler(BaseHTTPRequestHandler):
    hits = 0

    def do_POST(self):
        type(self).hits += 1
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        n_lines = body["messages"][0]["content"].count("\n")
        out = json.dumps({"choices": [{"message": {"content": f"described {n_lines}"}}]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    _Handler.hits = 0
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    yield f"http://127.0.0.1:{srv.server_port}/v1"
    srv.shutdown()


def test_describer_cache_replay_over_http(server, tmp_path, api_key):
    cfg = PromptConfig(source="remote_llm", remote=RemoteConfig(base_url=server, model_id="local", max_retries=0))
    recs = [linearize(Sample("s1", D + dt.timedelta(days=i), {"rainfall": float(i)})) for i in range(6)]
    first = Describer(cfg, DescriptionCache(tmp_path))
    texts = [d.text for d in first.describe_many(recs)]
    assert first.remote_calls == 6 and _Handler.hits == 6
    assert texts == ["described 3"] * 6
    replay = Describer(cfg, DescriptionCache(tmp_path))
    assert [d.text for d in replay.describe_many(recs)] == texts
    assert replay.remote_calls == 0 and replay.cache_hits == 6 and _Handler.hits == 6


def test_describer_fallback_to_template(api_key):
    def failing(cfg, rec):
        raise TransportError("down")

    rec = linearize(WINTER_DAY)
    with pytest.raises(TransportError):
        Describer(REMOTE, remote_fn=failing)(rec)
    desc = Describer(REMOTE, remote_fn=failing, fallback=True)(rec)
    assert desc.text == render_template(TEMPLATE, rec).text
