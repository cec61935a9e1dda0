"""Execute conversation plans against a chat-completion endpoint.

Two backend kinds share one code path: ``http`` speaks the OpenAI
chat-completions wire format with retries, a shared rate limiter, and a
content-addressed response cache; ``replay`` serves completions from a fixture
directory in exactly the cache file format, so a live run's cache doubles as a
deterministic fixture set for offline tests.
"""
from dataclasses import dataclass, field
from pathlib import Path
import hashlib
import json
import os
import random
import tempfile
import threading
import time

import requests as _requests

from .errors import BackendError, ConfigError, FixtureMissError
from .prompting import ConversationPlan, Message
from .schema import SamplingParams


@dataclass(frozen=True)
class BackendProfile:
    kind: str  # http | replay
    model: str
    base_url: str = ""
    system_enabled: bool = True
    max_retries: int = 3
    timeout: float = 60.0
    rate_limit: float | None = None  # requests per minute, shared across workers
    cache_dir: str | None = None
    fixtures_dir: str | None = None
    api_key_env: str = "GNO_API_KEY"
    backoff_base: float = 1.0

    def __post_init__(self):
        if self.kind not in ("http", "replay"):
            raise ConfigError(f"unknown backend kind {self.kind!r}")
        if self.kind == "http" and not self.base_url:
            raise ConfigError("http backend requires base_url")
        if self.kind == "replay":
            if not self.fixtures_dir:
                raise ConfigError("replay backend requires a fixture directory")
            if not Path(self.fixtures_dir).is_dir():
                raise ConfigError(f"fixture directory {self.fixtures_dir} not found")


def request_digest(model: str, params: dict, messages: list[dict]) -> str:
    """Content address of one completion request; stable across platforms."""
    payload = json.dumps(
        {"model": model, "params": params, "messages": messages},
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class StageStatus:
    stage: str
    state: str  # ok | failed
    reason: str | None = None

    def to_dict(self) -> dict:
        d: dict = {"stage": self.stage, "state": self.state}
        if self.reason is not None:
            d["reason"] = self.reason
        return d


@dataclass
class Transcript:
    doc_id: str
    target: str
    messages: list[Message] = field(default_factory=list)
    stages: list[StageStatus] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(s.state == "ok" for s in self.stages)

    def last_reply(self) -> str | None:
        for m in reversed(self.messages):
            if m.role == "assistant":
                return m.content
        return None

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "target": self.target,
            "stages": [s.to_dict() for s in self.stages],
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Transcript":
        return cls(
            doc_id=d["doc_id"],
            target=d["target"],
            messages=[Message(m["role"], m["content"]) for m in d["messages"]],
            stages=[
                StageStatus(s["stage"], s["state"], s.get("reason")) for s in d["stages"]
            ],
        )


_TRANSIENT_STATUS = {429, 500, 502, 503, 504}


class ChatBackend:
    """Thread-safe completion client with counters for requests and cache hits."""

    def __init__(self, profile: BackendProfile, sleep=time.sleep, session=None):
        self.profile = profile
        self._sleep = sleep
        self._session = session or _requests.Session()
        self._lock = threading.Lock()
        self._counter_lock = threading.Lock()
        self._last_call = 0.0
        self.requests = 0  # complete() invocations
        self.network_calls = 0  # actual HTTP POSTs
        self.cache_hits = 0
        self.conversations = 0  # run_plan() invocations
        if profile.kind == "http":
            self._api_key = os.environ.get(profile.api_key_env)
            if not self._api_key:
                raise ConfigError(
                    f"http backend requires an API key in ${profile.api_key_env}"
                )
            if not profile.cache_dir:
                raise ConfigError("http backend requires a cache directory")
            Path(profile.cache_dir).mkdir(parents=True, exist_ok=True)

    # -- cache --

    def _store_dir(self) -> Path:
        if self.profile.kind == "replay":
            return Path(self.profile.fixtures_dir)  # type: ignore[arg-type]
        return Path(self.profile.cache_dir)  # type: ignore[arg-type]

    def _cache_read(self, digest: str) -> str | None:
        path = self._store_dir() / f"{digest}.json"
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))["response"]

    def _cache_write(self, digest: str, params: dict, messages: list[dict], response: str) -> None:
        path = self._store_dir() / f"{digest}.json"
        record = {
            "model": self.profile.model,
            "params": params,
            "messages": messages,
            "response": response,
            "timestamp": time.time(),
        }
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                json.dump(record, f, ensure_ascii=False)
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)

    # -- completion --

    def _throttle(self) -> None:
        if not self.profile.rate_limit:
            return
        interval = 60.0 / self.profile.rate_limit
        with self._lock:
            wait = self._last_call + interval - time.monotonic()
            if wait > 0:
                self._sleep(wait)
            self._last_call = time.monotonic()

    def _post(self, body: dict) -> str:
        url = self.profile.base_url.rstrip("/") + "/chat/completions"
        headers = {"Authorization": f"Bearer {self._api_key}"}
        last_error: str = "no attempt made"
        for attempt in range(self.profile.max_retries + 1):
            if attempt:
                delay = self.profile.backoff_base * (2 ** (attempt - 1))
                self._sleep(delay + random.uniform(0, delay / 4))
            self._throttle()
            with self._counter_lock:
                self.network_calls += 1
            try:
                resp = self._session.post(
                    url, json=body, headers=headers, timeout=self.profile.timeout
                )
            except _requests.RequestException as e:
                last_error = f"request failed: {e}"
                continue
            if resp.status_code in _TRANSIENT_STATUS:
                last_error = f"transient HTTP {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise BackendError(f"HTTP {resp.status_code}: {resp.text[:500]}")
            try:
                content = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as e:
                raise BackendError(f"malformed endpoint response: {e}") from e
            if not isinstance(content, str) or not content:
                raise BackendError("endpoint returned empty completion")
            return content
        raise BackendError(
            f"giving up after {self.profile.max_retries + 1} attempts: {last_error}"
        )

    def complete(self, messages: list[Message], sampling: SamplingParams) -> Message:
        """One assistant completion for the message history so far."""
        if not messages or messages[-1].role != "user":
            raise BackendError("message history must end with a user turn")
        with self._counter_lock:
            self.requests += 1
        params = {"temperature": sampling.temperature, "max_tokens": sampling.max_tokens}
        wire = [{"role": m.role, "content": m.content} for m in messages]
        digest = request_digest(self.profile.model, params, wire)

        cached = self._cache_read(digest)
        if cached is not None:
            with self._counter_lock:
                self.cache_hits += 1
            return Message("assistant", cached)
        if self.profile.kind == "replay":
            raise FixtureMissError(digest)

        body = {"model": self.profile.model, "messages": wire, **params}
        content = self._post(body)
        self._cache_write(digest, params, wire, content)
        return Message("assistant", content)

    def run_plan(self, plan: ConversationPlan, sampling: SamplingParams) -> Transcript:
        """Execute plan stages in order, each reply feeding the next turn."""
        with self._counter_lock:
            self.conversations += 1
        transcript = Transcript(doc_id=plan.doc_id, target=plan.target)
        history: list[Message] = []
        if plan.system is not None:
            history.append(plan.system)
        failed_reason: str | None = None
        for stage_name, user_msg in plan.stages:
            if failed_reason is not None:
                transcript.stages.append(
                    StageStatus(stage_name, "failed", f"prior stage failed: {failed_reason}")
                )
                continue
            history.append(user_msg)
            try:
                reply = self.complete(history, sampling)
            except BackendError as e:
                failed_reason = str(e)
                transcript.stages.append(StageStatus(stage_name, "failed", failed_reason))
                continue
            history.append(reply)
            transcript.stages.append(StageStatus(stage_name, "ok"))
        transcript.messages = history
        return transcript


def save_transcripts(transcripts: list[Transcript], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for t in transcripts:
            f.write(json.dumps(t.to_dict(), ensure_ascii=False) + "\n")


def load_transcripts(path: str | Path) -> list[Transcript]:
    out = []
    with Path(path).open("r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(Transcript.from_dict(json.loads(line)))
    return out
