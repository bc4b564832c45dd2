"""Provider-agnostic chat/vision model access with a per-call temperature
policy, bounded retries, budgets, audit transcripts, and a scriptable mock
transport so every pipeline loop can run offline.
"""

from __future__ import annotations

import base64
import json
import logging
import re
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

from .config import get_float, get_int, get_str
from .errors import BudgetExceeded, ScriptExhausted, TransportError

log = logging.getLogger(__name__)

# Call kinds, used both for the temperature policy and for auditing.
KIND_GENERATE = "generate"
KIND_REPAIR = "repair"
KIND_QUESTIONS = "questions"
KIND_ANSWERS = "answers"
KIND_FEEDBACK = "feedback"
KIND_REFINE = "refine"
KIND_VERBALIZE = "verbalize"

# Code generation and refinement run at temperature 0; repair retries run at
# temperature 1. A per-model override can replace every entry.
DEFAULT_TEMPERATURES = {
    KIND_GENERATE: 0.0,
    KIND_REPAIR: 1.0,
    KIND_QUESTIONS: 0.0,
    KIND_ANSWERS: 0.0,
    KIND_FEEDBACK: 0.0,
    KIND_REFINE: 0.0,
    KIND_VERBALIZE: 0.0,
}


@dataclass(frozen=True)
class Message:
    role: str
    text: str
    images: tuple[bytes, ...] = ()

    def __post_init__(self):
        if self.images and self.role != "user":
            raise ValueError("images may only be attached to user messages")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    temperature: float
    model_id: str
    max_tokens: int

    def __post_init__(self):
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    @property
    def image_count(self):
        return sum(len(m.images) for m in self.messages)

    @property
    def prompt_text(self):
        return "\n".join(m.text for m in self.messages)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage: dict
    model_id: str = ""


@dataclass(frozen=True)
class RequestMeta:
    kind: str
    episode_id: str = ""


@dataclass
class RequestRecord:
    kind: str
    episode_id: str
    temperature: float
    image_count: int
    prompt_text: str
    reply_text: str


@dataclass(frozen=True)
class TemperaturePolicy:
    """Per-call-kind temperatures with an optional whole-model override."""

    by_kind: dict = field(default_factory=lambda: dict(DEFAULT_TEMPERATURES))
    override: float | None = None

    def temperature_for(self, kind: str) -> float:
        if self.override is not None:
            return self.override
        if kind not in self.by_kind:
            raise KeyError(f"no temperature policy for call kind '{kind}'")
        return self.by_kind[kind]

    def snapshot(self) -> dict:
        if self.override is not None:
            return {kind: self.override for kind in self.by_kind}
        return dict(self.by_kind)


@dataclass(frozen=True)
class RetrySettings:
    max_attempts: int = 3
    backoff_s: float = 1.0
    backoff_cap_s: float = 30.0


class Budget:
    """Cumulative request/token caps; zero means unlimited."""

    def __init__(self, max_requests: int = 0, max_tokens: int = 0):
        self.max_requests = max_requests
        self.max_tokens = max_tokens
        self.requests = 0
        self.tokens = 0
        self._lock = threading.Lock()

    def charge_request(self):
        with self._lock:
            if self.max_requests and self.requests + 1 > self.max_requests:
                raise BudgetExceeded(f"request cap of {self.max_requests} reached")
            self.requests += 1

    def charge_tokens(self, usage: dict):
        used = int(usage.get("prompt_tokens", 0)) + int(usage.get("completion_tokens", 0))
        with self._lock:
            self.tokens += used
            if self.max_tokens and self.tokens > self.max_tokens:
                raise BudgetExceeded(f"token cap of {self.max_tokens} exceeded")


# -- transports ---------------------------------------------------------------

class MockTransport:
    """Replays canned reply sequences and records every request.

    ``script`` is either one global reply list, or a mapping from episode id
    to a per-episode list; the key "*" provides a fresh default sequence for
    episodes without an explicit entry.
    """

    def __init__(self, script):
        if isinstance(script, dict):
            self._by_episode = {k: list(v) for k, v in script.items() if k != "*"}
            self._wildcard = list(script.get("*", []))
            self._global = None
        else:
            self._by_episode = {}
            self._wildcard = None
            self._global = list(script)
        self.requests: list[tuple[RequestMeta, ChatRequest]] = []
        self._lock = threading.Lock()

    def _queue_for(self, episode_id):
        if self._global is not None:
            return self._global
        if episode_id not in self._by_episode:
            if self._wildcard is None:
                raise ScriptExhausted(f"no scripted replies for episode '{episode_id}'")
            self._by_episode[episode_id] = list(self._wildcard)
        return self._by_episode[episode_id]

    def send(self, request: ChatRequest, meta: RequestMeta) -> ChatResponse:
        with self._lock:
            self.requests.append((meta, request))
            queue = self._queue_for(meta.episode_id)
            if not queue:
                raise ScriptExhausted(
                    f"mock transport exhausted for episode '{meta.episode_id}' (kind={meta.kind})")
            reply = queue.pop(0)
        usage = {
            "prompt_tokens": len(request.prompt_text) // 4,
            "completion_tokens": len(reply) // 4,
        }
        return ChatResponse(text=reply, usage=usage, model_id=request.model_id)


class HttpTransport:
    """OpenAI-compatible chat-completions client over urllib.

    Images are attached inline as base64 PNG data URLs. A single send is one
    HTTP round trip; retry policy lives in the gateway.
    """

    def __init__(self, endpoint: str, api_key: str = "", timeout_s: float = 120.0):
        self.endpoint = endpoint
        self.api_key = api_key
        self.timeout_s = timeout_s

    def _payload(self, request: ChatRequest) -> dict:
        messages = []
        for m in request.messages:
            if m.images:
                content = [{"type": "text", "text": m.text}]
                for img in m.images:
                    url = "data:image/png;base64," + base64.b64encode(img).decode("ascii")
                    content.append({"type": "image_url", "image_url": {"url": url}})
                messages.append({"role": m.role, "content": content})
            else:
                messages.append({"role": m.role, "content": m.text})
        return {
            "model": request.model_id,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }

    def send(self, request: ChatRequest, meta: RequestMeta) -> ChatResponse:
        body = json.dumps(self._payload(request)).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        http_request = urllib.request.Request(self.endpoint, data=body, headers=headers)
        try:
            with urllib.request.urlopen(http_request, timeout=self.timeout_s) as response:
                parsed = json.loads(response.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            raise TransportError(f"HTTP {exc.code} from {self.endpoint}: {exc.reason}") from exc
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise TransportError(f"transport failure: {exc}") from exc
        try:
            text = parsed["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion payload: {exc}") from exc
        return ChatResponse(
            text=text if isinstance(text, str) else json.dumps(text),
            usage=parsed.get("usage", {}) or {},
            model_id=parsed.get("model", request.model_id),
        )


# -- gateway ------------------------------------------------------------------

class ModelGateway:
    """Shared front door to the model: applies the temperature policy, retries
    transient failures with bounded exponential backoff, enforces budgets and
    a global concurrency limit, and keeps an audit log of every call."""

    def __init__(self, transport, model_id: str, policy: TemperaturePolicy | None = None,
                 max_tokens: int = 2048, retry: RetrySettings | None = None,
                 budget: Budget | None = None, transcript_path=None,
                 concurrency: int = 4, min_request_interval_s: float = 0.0,
                 sleep=time.sleep):
        self.transport = transport
        self.model_id = model_id
        self.policy = policy or TemperaturePolicy()
        self.max_tokens = max_tokens
        self.retry = retry or RetrySettings()
        self.budget = budget
        self.transcript_path = Path(transcript_path) if transcript_path else None
        self.request_log: list[RequestRecord] = []
        self._sleep = sleep
        self._semaphore = threading.Semaphore(max(1, concurrency))
        self._min_interval = min_request_interval_s
        self._last_request_at = 0.0
        self._lock = threading.Lock()

    def complete(self, kind: str, messages, episode_id: str = "") -> ChatResponse:
        temperature = self.policy.temperature_for(kind)
        request = ChatRequest(
            messages=tuple(messages),
            temperature=temperature,
            model_id=self.model_id,
            max_tokens=self.max_tokens,
        )
        meta = RequestMeta(kind=kind, episode_id=episode_id)
        if self.budget is not None:
            self.budget.charge_request()
        response = self._send_with_retries(request, meta)
        if self.budget is not None:
            self.budget.charge_tokens(response.usage)
        record = RequestRecord(
            kind=kind, episode_id=episode_id, temperature=temperature,
            image_count=request.image_count, prompt_text=request.prompt_text,
            reply_text=response.text,
        )
        with self._lock:
            self.request_log.append(record)
        self._append_transcript(record)
        return response

    def _send_with_retries(self, request, meta):
        last_error = None
        for attempt in range(self.retry.max_attempts):
            self._respect_rate_limit()
            with self._semaphore:
                try:
                    return self.transport.send(request, meta)
                except ScriptExhausted:
                    raise  # a scripting bug, not a transient fault
                except TransportError as exc:
                    last_error = exc
                    log.warning("transport attempt %d/%d failed: %s",
                                attempt + 1, self.retry.max_attempts, exc)
            if attempt + 1 < self.retry.max_attempts:
                delay = min(self.retry.backoff_s * (2 ** attempt), self.retry.backoff_cap_s)
                self._sleep(delay)
        raise TransportError(
            f"transport failed after {self.retry.max_attempts} attempts: {last_error}")

    def _respect_rate_limit(self):
        if self._min_interval <= 0:
            return
        with self._lock:
            now = time.monotonic()
            wait = self._last_request_at + self._min_interval - now
            self._last_request_at = max(now, self._last_request_at + self._min_interval)
        if wait > 0:
            self._sleep(wait)

    def _append_transcript(self, record: RequestRecord):
        if self.transcript_path is None:
            return
        entry = {
            "ts": time.time(),
            "kind": record.kind,
            "episode_id": record.episode_id,
            "temperature": record.temperature,
            "image_count": record.image_count,
            "prompt": record.prompt_text,
            "reply": record.reply_text,
        }
        with self._lock:
            self.transcript_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.transcript_path, "a", encoding="utf-8") as handle:
                handle.write(json.dumps(entry) + "\n")


# -- few-shot library -----------------------------------------------------------

@dataclass(frozen=True)
class FewShotExample:
    code: str
    description: str = ""


@dataclass(frozen=True)
class FewShotLibrary:
    examples: tuple[FewShotExample, ...]
    source: str = ""

    def __post_init__(self):
        if not self.examples:
            raise ValueError("a few-shot library must hold at least one example")

    def __len__(self):
        return len(self.examples)

    @classmethod
    def load(cls, path):
        """Load from a JSON array of {"code", "description"?} objects, or from
        a directory of .py files whose leading comment is the description."""
        path = Path(path)
        if path.is_dir():
            examples = []
            for file in sorted(path.glob("*.py")):
                text = file.read_text(encoding="utf-8")
                lines = text.splitlines()
                desc_lines = []
                for line in lines:
                    if line.startswith("#"):
                        desc_lines.append(line.lstrip("#").strip())
                    else:
                        break
                code = "\n".join(lines[len(desc_lines):]).strip("\n")
                examples.append(FewShotExample(code=code, description=" ".join(desc_lines)))
            return cls(tuple(examples), source=str(path))
        entries = json.loads(path.read_text(encoding="utf-8"))
        examples = tuple(
            FewShotExample(code=e["code"], description=e.get("description", ""))
            for e in entries)
        return cls(examples, source=str(path))

    def prompt_block(self, k: int) -> str:
        """The first ``k`` examples (file order) formatted for the generation
        prompt; returns a block ending in a blank line."""
        chosen = self.examples[:max(1, k)]
        parts = []
        for i, example in enumerate(chosen, start=1):
            parts.append(f"### Example {i} ###")
            if example.description:
                parts.append(example.description)
            parts.append("```python\n" + example.code + "\n```")
            parts.append("")
        return "\n".join(parts) + "\n"


# -- reply handling -------------------------------------------------------------

_FENCE = re.compile(r"```(?:[A-Za-z0-9_+-]*)\n(.*?)```", re.DOTALL)


def extract_code(reply: str) -> str:
    """The first fenced code block, or the whole reply when nothing is fenced."""
    match = _FENCE.search(reply)
    if match:
        return match.group(1).strip("\n")
    return reply.strip()


# -- config wiring ---------------------------------------------------------------

def policy_from_config(cfg: dict) -> TemperaturePolicy:
    by_kind = dict(DEFAULT_TEMPERATURES)
    for kind in by_kind:
        by_kind[kind] = get_float(cfg, f"temperature.{kind}", by_kind[kind])
    override = cfg.get("temperature.override", "")
    return TemperaturePolicy(by_kind=by_kind, override=float(override) if override else None)


def gateway_from_config(cfg: dict, transcript_path=None) -> ModelGateway:
    """Build a gateway from a parsed key-value config.

    ``transport = mock`` with ``mock_script = <path.json>`` selects the
    scripted transport (the JSON file maps episode ids, or "*", to reply
    lists); anything else selects the HTTP transport against ``endpoint``.
    """
    import os

    kind = get_str(cfg, "transport", "http")
    if kind == "mock":
        script_path = cfg.get("mock_script", "")
        script = json.loads(Path(script_path).read_text(encoding="utf-8")) if script_path else {"*": []}
        transport = MockTransport(script)
    else:
        api_key_env = get_str(cfg, "api_key_env", "")
        api_key = os.environ.get(api_key_env, "") if api_key_env else ""
        transport = HttpTransport(
            endpoint=get_str(cfg, "endpoint", "http://localhost:8000/v1/chat/completions"),
            api_key=api_key,
            timeout_s=get_float(cfg, "http_timeout_s", 120.0),
        )
    budget = None
    max_requests = get_int(cfg, "budget.max_requests", 0)
    max_tokens_budget = get_int(cfg, "budget.max_tokens", 0)
    if max_requests or max_tokens_budget:
        budget = Budget(max_requests=max_requests, max_tokens=max_tokens_budget)
    return ModelGateway(
        transport=transport,
        model_id=get_str(cfg, "model", "gpt-4"),
        policy=policy_from_config(cfg),
        max_tokens=get_int(cfg, "max_tokens", 2048),
        retry=RetrySettings(
            max_attempts=get_int(cfg, "retry.max_attempts", 3),
            backoff_s=get_float(cfg, "retry.backoff_s", 1.0),
            backoff_cap_s=get_float(cfg, "retry.backoff_cap_s", 30.0),
        ),
        budget=budget,
        transcript_path=transcript_path,
        concurrency=get_int(cfg, "concurrency", 4),
        min_request_interval_s=get_float(cfg, "min_request_interval_s", 0.0),
    )
