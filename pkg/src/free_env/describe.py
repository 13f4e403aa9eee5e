"""Natural-language descriptions of linearized records.

The default source is a deterministic template engine. A chat-completion
endpoint can be used instead; either way results go through a JSON-lines,
content-addressed cache.
"""
from __future__ import annotations

import datetime as dt
import hashlib
import json
import logging
import os
import threading
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import requests

from .linearize import DATE_KEY, LinearizedRecord

log = logging.getLogger(__name__)

TEMPLATE_VERSION = "template-v1"
DEFAULT_PREFIX = (
    "You are given daily weather drivers for a river basin, recorded for one stream segment on one day."
)
DEFAULT_SUFFIX = "Summarize the record in 2-4 fluent sentences, preserving all numeric values exactly."
API_KEY_ENV = "FREE_LLM_API_KEY"
BASE_URL_ENV = "FREE_LLM_BASE_URL"
DEBUG_ENV = "FREE_LLM_DEBUG"

UNIT_PHRASES = {
    "degC": "degrees Celsius",
    "mm": "millimeters",
    "W/m2": "watts per square meter",
    "fraction": "",
}

MONTHS = (
    "January", "February", "March", "April", "May", "June", "July",
    "August", "September", "October", "November", "December",
)


class DescribeError(RuntimeError):
    """Base class; callers may fall back to :func:`render_template`."""


class TransportError(DescribeError):
    pass


class ProtocolError(DescribeError):
    pass


@dataclass(frozen=True)
class RemoteConfig:
    base_url: Optional[str] = None
    model_id: str = "gpt-4o-mini"
    timeout_s: float = 30.0
    max_retries: int = 3
    backoff_s: float = 1.0


@dataclass(frozen=True)
class PromptConfig:
    prefix: str = DEFAULT_PREFIX
    suffix: str = DEFAULT_SUFFIX
    template_version: str = TEMPLATE_VERSION
    source: str = "template"
    remote: Optional[RemoteConfig] = None
    target: str = "water temperature"
    parallelism: int = 4

    def __post_init__(self):
        if not self.prefix or not self.suffix:
            raise ValueError("prompt prefix and suffix must be nonempty")
        if self.source not in ("template", "remote_llm"):
            raise ValueError(f"unknown description source {self.source!r}")

    @property
    def version(self) -> str:
        if self.source == "remote_llm":
            return (self.remote or RemoteConfig()).model_id
        return self.template_version


@dataclass(frozen=True)
class Description:
    text: str
    cache_key: str
    source: str
    version: str
    created: str = field(default="", compare=False)

    def __post_init__(self):
        if not self.text:
            raise ValueError("description text must be nonempty")

    def to_record(self) -> dict:
        return {"key": self.cache_key, "text": self.text, "source": self.source,
                "version": self.version, "created": self.created}

    @classmethod
    def from_record(cls, rec: dict) -> "Description":
        return cls(rec["text"], rec["key"], rec["source"], rec["version"], rec.get("created", ""))


def cache_key(version: str, prefix: str, pairs: Sequence[Sequence[str]], suffix: str) -> str:
    payload = json.dumps([version, prefix, [list(p) for p in pairs], suffix],
                         ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).replace(microsecond=0).isoformat()


def long_date(iso: str) -> str:
    d = dt.date.fromisoformat(iso)
    return f"{MONTHS[d.month - 1]} {d.day}, {d.year}"


# feature name -> [(predicate on value, clause appended to the sentence)]
THRESHOLD_RULES: Dict[str, List[tuple]] = {
    "air_temperature": [(lambda v: v < 0.0, "where freezing-thawing and phase change may occur")],
}


def _feature_sentence(name: str, key: str, value: str, unit: Optional[str]) -> str:
    v = float(value)
    if name == "rainfall" and v == 0.0:
        return "There was no recorded rainfall."
    if name == "air_temperature":
        head = f"The average air temperature was {value} degrees Celsius"
    elif name == "solar_radiation":
        head = f"The solar radiation measured was {value} watts per square meter"
    else:
        phrase = UNIT_PHRASES.get(unit) if unit is not None else None
        if phrase is None:
            warnings.warn(f"no unit phrase for {key!r} (unit {unit!r}); rendering unitless", stacklevel=3)
            phrase = ""
        head = f"The {key} was {value}" + (f" {phrase}" if phrase else "")
    clauses = [text for pred, text in THRESHOLD_RULES.get(name, ()) if pred(v)]
    if clauses:
        head += ", " + ", ".join(clauses)
    return head + "."


def template_text(rec: LinearizedRecord, target: str = "water temperature") -> str:
    sentences = []
    aux_date = None
    for key, value in rec.pairs:
        if key == DATE_KEY:
            if value == rec.sample_ref[1]:
                sentences.append(f"The date was {long_date(value)}.")
                aux_date = None
            else:
                aux_date = value
            continue
        name = rec.names.get(key, key.replace(" ", "_"))
        if name == "aux" or key.startswith("observed "):
            where = key.split(" at ", 1)[1] if " at " in key else key
            when = f"On {long_date(aux_date)}, t" if aux_date else "T"
            sentences.append(f"{when}he observed {target} at {where} was {value} degrees Celsius.")
            continue
        sentences.append(_feature_sentence(name, key, value, rec.units.get(key)))
    return " ".join(sentences)


def render_template(cfg: PromptConfig, rec: LinearizedRecord) -> Description:
    """Deterministic stand-in for the language model."""
    if cfg.source != "template":
        raise ValueError("render_template requires a template-sourced PromptConfig")
    return Description(
        template_text(rec, cfg.target),
        cache_key(cfg.template_version, cfg.prefix, rec.pairs, cfg.suffix),
        "template",
        cfg.template_version,
        _now(),
    )


def build_prompt(cfg: PromptConfig, rec: LinearizedRecord) -> str:
    return "\n".join([cfg.prefix, *rec.prompt_lines(), cfg.suffix])


def describe_remote(cfg: PromptConfig, rec: LinearizedRecord, session=None, sleep: Callable[[float], None] = time.sleep) -> Description:
    """POST the assembled prompt to a chat-completion endpoint, with exponential backoff."""
    if cfg.source != "remote_llm":
        raise ValueError("describe_remote requires a remote_llm PromptConfig")
    remote = cfg.remote or RemoteConfig()
    base = remote.base_url or os.environ.get(BASE_URL_ENV)
    if not base:
        raise DescribeError(f"no endpoint configured; set remote.base_url or {BASE_URL_ENV}")
    api_key = os.environ.get(API_KEY_ENV, "")
    if not api_key:
        raise DescribeError(f"missing credentials: set {API_KEY_ENV}")
    body = {"model": remote.model_id, "messages": [{"role": "user", "content": build_prompt(cfg, rec)}]}
    if os.environ.get(DEBUG_ENV, "").lower() in ("1", "true", "yes"):
        log.debug("request body: %s", json.dumps(body, ensure_ascii=False))
    http = session or requests
    url = base.rstrip("/") + "/chat/completions"
    headers = {"Authorization": f"Bearer {api_key}", "Content-Type": "application/json"}
    last_err: Optional[BaseException] = None
    for attempt in range(remote.max_retries + 1):
        if attempt:
            sleep(remote.backoff_s * 2 ** (attempt - 1))
        try:
            resp = http.post(url, json=body, headers=headers, timeout=remote.timeout_s)
        except (requests.ConnectionError, requests.Timeout) as exc:
            last_err = exc
            log.warning("attempt %d/%d failed: %s", attempt + 1, remote.max_retries + 1, exc)
            continue
        if resp.status_code == 429 or resp.status_code >= 500:
            last_err = TransportError(f"HTTP {resp.status_code}")
            continue
        if resp.status_code >= 400:
            raise ProtocolError(f"HTTP {resp.status_code}: {resp.text[:200]}; fall back to the template source")
        try:
            text = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed completion response: {exc}; fall back to the template source") from exc
        if not text or not text.strip():
            raise ProtocolError("empty completion; fall back to the template source")
        return Description(
            text.strip(),
            cache_key(remote.model_id, cfg.prefix, rec.pairs, cfg.suffix),
            "remote_llm",
            remote.model_id,
            _now(),
        )
    raise TransportError(
        f"endpoint unreachable after {remote.max_retries + 1} attempts ({last_err}); fall back to the template source"
    )


class DescriptionCache:
    """Append-only JSON-lines store; the latest record for a key wins."""

    FILENAME = "descriptions.jsonl"

    def __init__(self, path):
        path = Path(path)
        self.path = path / self.FILENAME if path.suffix != ".jsonl" else path
        self._index: Dict[str, Description] = {}
        self._lock = threading.Lock()
        self._load()

    def _load(self):
        if not self.path.exists():
            return
        with self.path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    desc = Description.from_record(json.loads(line))
                except (ValueError, KeyError, TypeError) as exc:
                    warnings.warn(f"{self.path}:{lineno}: skipping corrupt cache line ({exc})")
                    continue
                self._index[desc.cache_key] = desc

    def __len__(self):
        return len(self._index)

    def get(self, key: str) -> Optional[Description]:
        return self._index.get(key)

    def put(self, desc: Description) -> None:
        with self._lock:
            if self._index.get(desc.cache_key) == desc:
                return
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(desc.to_record(), ensure_ascii=False) + "\n")
            self._index[desc.cache_key] = desc


class Describer:
    """Cache-first description source with bounded remote parallelism."""

    def __init__(self, cfg: PromptConfig = PromptConfig(), cache: Optional[DescriptionCache] = None,
                 remote_fn: Callable = describe_remote, fallback: bool = False):
        self.cfg = cfg
        self.cache = cache
        self.remote_fn = remote_fn
        self.fallback = fallback
        self.remote_calls = 0
        self.cache_hits = 0
        self._count_lock = threading.Lock()

    def key_for(self, rec: LinearizedRecord) -> str:
        return cache_key(self.cfg.version, self.cfg.prefix, rec.pairs, self.cfg.suffix)

    def __call__(self, rec: LinearizedRecord) -> Description:
        if self.cache is not None:
            hit = self.cache.get(self.key_for(rec))
            if hit is not None:
                with self._count_lock:
                    self.cache_hits += 1
                return hit
        if self.cfg.source == "template":
            desc = render_template(self.cfg, rec)
        else:
            with self._count_lock:
                self.remote_calls += 1
            try:
                desc = self.remote_fn(self.cfg, rec)
            except DescribeError:
                if not self.fallback:
                    raise
                log.warning("remote description failed for %s; using template", rec.sample_ref)
                return render_template(PromptConfig(self.cfg.prefix, self.cfg.suffix, target=self.cfg.target), rec)
        if self.cache is not None:
            self.cache.put(desc)
        return desc

    def describe_many(self, recs: Iterable[LinearizedRecord]) -> List[Description]:
        recs = list(recs)
        if self.cfg.source == "template" or self.cfg.parallelism <= 1:
            return [self(r) for r in recs]
        with ThreadPoolExecutor(max_workers=self.cfg.parallelism) as pool:
            return list(pool.map(self, recs))


def prompt_config_from_dict(d: dict) -> PromptConfig:
    d = dict(d)
    if d.get("remote") is not None:
        d["remote"] = RemoteConfig(**d["remote"])
    return PromptConfig(**d)


def prompt_config_to_dict(cfg: PromptConfig) -> dict:
    return asdict(cfg)
