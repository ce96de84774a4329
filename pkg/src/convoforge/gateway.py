"""Single choke point for all text generation.

Every stage renders a registered prompt template and calls
``Gateway.complete``; the gateway owns retries, the in-flight concurrency
cap, and the append-only call log. Backends are pluggable: a remote
chat-completions endpoint for real runs, a deterministic mock for offline
runs and tests.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import re
import string
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import requests

from .errors import GatewayError, TemplateError

TEMPLATE_DIR = Path(__file__).parent / "templates"

# The prompt library every run must ship with; startup fails if one is missing.
REQUIRED_TEMPLATES = (
    "seed_extraction",
    "inquirer",
    "assistant",
    "refiner",
    "doc_evaluator",
    "winrate_evaluator",
)

VALID_ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.7
    max_output_tokens: int = 1024
    stop_sequences: tuple[str, ...] = ()
    seed: int | None = None

    def __post_init__(self):
        if not (self.temperature >= 0 and self.temperature == self.temperature):
            raise ValueError(f"temperature must be finite and >= 0, got {self.temperature}")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be > 0")


@dataclass(frozen=True)
class CallRecord:
    request_hash: str
    backend: str
    kind: str
    attempt: int
    latency_s: float
    prompt_tokens: int
    completion_tokens: int
    truncated: bool
    ok: bool
    error: str = ""


@dataclass(frozen=True)
class BackendReply:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    truncated: bool = False


class ChatBackend(Protocol):
    name: str
    def complete(self, messages: Sequence[ChatMessage], params: GenerationParams, kind: str) -> BackendReply: ...


class TransientBackendError(Exception):
    """Retryable backend failure; may carry a server-suggested delay."""

    def __init__(self, message: str, retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


def validate_messages(messages: Sequence[ChatMessage]) -> None:
    if not messages:
        raise ValueError("messages must be non-empty")
    for msg in messages:
        if msg.role not in VALID_ROLES:
            raise ValueError(f"invalid role {msg.role!r}")
        if not msg.content:
            raise ValueError("message content must be non-empty")
    if messages[0].role != "system":
        raise ValueError("first message must have role=system")


def request_hash(messages: Sequence[ChatMessage], params: GenerationParams) -> str:
    payload = {
        "messages": [[m.role, m.content] for m in messages],
        "temperature": params.temperature,
        "max_output_tokens": params.max_output_tokens,
        "stop": list(params.stop_sequences),
        "seed": params.seed,
    }
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")
    ).hexdigest()


def prompt_text(messages: Sequence[ChatMessage]) -> str:
    return "\n".join(f"{m.role}: {m.content}" for m in messages)


def _estimate_tokens(text: str) -> int:
    return len(text.split())


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------


def available_templates(template_dir: Path | None = None) -> list[str]:
    directory = template_dir or TEMPLATE_DIR
    return sorted(p.stem for p in directory.glob("*.txt"))


def validate_templates(template_dir: Path | None = None) -> None:
    """Fail fast if any required prompt template is missing."""
    present = set(available_templates(template_dir))
    missing = [name for name in REQUIRED_TEMPLATES if name not in present]
    if missing:
        raise TemplateError(f"missing prompt templates: {', '.join(missing)}")


def render_template(
    template_name: str,
    bindings: dict[str, str],
    template_dir: Path | None = None,
) -> list[ChatMessage]:
    """Render a template file into chat messages.

    Rendering is strict both ways: a placeholder with no binding and a
    binding with no placeholder are both template errors naming the key.
    Template files are role-sectioned::

        [system]
        ...text with {placeholders}...
        [user]
        ...
    """
    directory = template_dir or TEMPLATE_DIR
    path = directory / f"{template_name}.txt"
    if not path.is_file():
        raise TemplateError(f"unknown template {template_name!r}")
    raw = path.read_text(encoding="utf-8")

    placeholders = {
        field_name
        for _, field_name, _, _ in string.Formatter().parse(raw)
        if field_name is not None
    }
    missing = placeholders - set(bindings)
    if missing:
        raise TemplateError(f"template {template_name!r} is missing bindings: {', '.join(sorted(missing))}")
    unused = set(bindings) - placeholders
    if unused:
        raise TemplateError(f"template {template_name!r} does not reference: {', '.join(sorted(unused))}")
    rendered = raw.format(**bindings)

    messages: list[ChatMessage] = []
    role: str | None = None
    buffer: list[str] = []

    def flush():
        if role is None:
            return
        content = "\n".join(buffer).strip()
        if not content:
            raise TemplateError(f"template {template_name!r} has an empty [{role}] section")
        messages.append(ChatMessage(role=role, content=content))

    for line in rendered.splitlines():
        match = re.fullmatch(r"\[(system|user|assistant)\]", line.strip())
        if match:
            flush()
            role = match.group(1)
            buffer = []
        else:
            if role is None and line.strip():
                raise TemplateError(f"template {template_name!r} has content before its first role section")
            buffer.append(line)
    flush()
    if not messages:
        raise TemplateError(f"template {template_name!r} defines no messages")
    return messages


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


class HttpChatBackend:
    """Remote chat-completions endpoint.

    Wire format: POST {model, messages[], temperature, max_tokens, stop[]}
    with bearer-token auth from an environment variable; the reply text is
    the first choice's message content.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "CONVOFORGE_API_KEY",
        timeout: float = 120.0,
        session: requests.Session | None = None,
    ):
        self.name = f"http:{model}"
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.session = session or requests.Session()

    def complete(self, messages: Sequence[ChatMessage], params: GenerationParams, kind: str) -> BackendReply:
        body = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in messages],
            "temperature": params.temperature,
            "max_tokens": params.max_output_tokens,
            "stop": list(params.stop_sequences),
        }
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = self.session.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
        except requests.RequestException as exc:
            raise TransientBackendError(f"transport failure: {exc}") from exc
        if resp.status_code == 429:
            retry_after = None
            try:
                retry_after = float(resp.headers.get("Retry-After", ""))
            except ValueError:
                pass
            raise TransientBackendError("rate limited (429)", retry_after=retry_after)
        if resp.status_code >= 500:
            raise TransientBackendError(f"server error ({resp.status_code})")
        if resp.status_code >= 400:
            raise GatewayError(f"backend rejected request ({resp.status_code}): {resp.text[:200]}")
        try:
            payload = resp.json()
            choice = payload["choices"][0]
            text = choice["message"]["content"]
            usage = payload.get("usage", {})
            return BackendReply(
                text=text,
                prompt_tokens=int(usage.get("prompt_tokens", 0)),
                completion_tokens=int(usage.get("completion_tokens", 0)),
                truncated=choice.get("finish_reason") == "length",
            )
        except (KeyError, IndexError, ValueError, json.JSONDecodeError) as exc:
            raise GatewayError(f"malformed backend response: {exc}") from exc


@dataclass
class ScriptEntry:
    """One scripted mock response, matched by request hash or regex."""

    response: str
    hash: str | None = None
    regex: str | None = None
    kind: str | None = None
    once: bool = False
    used: bool = field(default=False, compare=False)

    def matches(self, req_hash: str, text: str, kind: str) -> bool:
        if self.once and self.used:
            return False
        if self.kind is not None and self.kind != kind:
            return False
        if self.hash is not None:
            return self.hash == req_hash
        if self.regex is not None:
            return re.search(self.regex, text, re.DOTALL) is not None
        return False


class MockChatBackend:
    """Deterministic offline backend.

    Scripted entries (request-hash or regex keyed, loadable from a records
    file) take precedence; anything unscripted falls through to a seeded
    synthesizer that produces stage-appropriate output from the prompt
    content alone, so whole pipeline runs are reproducible byte for byte.
    """

    def __init__(self, entries: Sequence[ScriptEntry] = (), seed: int = 0, strict: bool = False):
        self.name = "mock"
        self.entries = list(entries)
        self.seed = seed
        self.strict = strict

    @classmethod
    def from_file(cls, path: Path | str, seed: int = 0, strict: bool = False) -> "MockChatBackend":
        entries = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                entries.append(
                    ScriptEntry(
                        response=rec["response"],
                        hash=rec.get("hash"),
                        regex=rec.get("regex"),
                        kind=rec.get("kind"),
                        once=bool(rec.get("once", False)),
                    )
                )
        return cls(entries, seed=seed, strict=strict)

    def complete(self, messages: Sequence[ChatMessage], params: GenerationParams, kind: str) -> BackendReply:
        req_hash = request_hash(messages, params)
        text = prompt_text(messages)
        for entry in self.entries:
            if entry.matches(req_hash, text, kind):
                entry.used = True
                reply = entry.response
                break
        else:
            if self.strict:
                raise GatewayError(f"mock backend has no scripted response for kind={kind!r} hash={req_hash[:12]}")
            reply = synthesize_mock_reply(kind, text, seed=self.seed, params_seed=params.seed)
        return BackendReply(
            text=reply,
            prompt_tokens=_estimate_tokens(text),
            completion_tokens=_estimate_tokens(reply),
            truncated=False,
        )


class QueueBackend:
    """Fixed response sequence for unit tests; raises when exhausted."""

    def __init__(self, responses: Sequence[str]):
        self.name = "mock-queue"
        self.responses = list(responses)
        self.requests: list[tuple[str, str]] = []

    def complete(self, messages: Sequence[ChatMessage], params: GenerationParams, kind: str) -> BackendReply:
        self.requests.append((kind, prompt_text(messages)))
        if not self.responses:
            raise GatewayError("scripted response queue exhausted")
        reply = self.responses.pop(0)
        return BackendReply(text=reply, completion_tokens=_estimate_tokens(reply))


# ---------------------------------------------------------------------------
# Deterministic mock synthesis (used by MockChatBackend fallback)
# ---------------------------------------------------------------------------

_SECTION_RES = {
    "document": re.compile(r"DOCUMENT:\n(.*?)\nEND DOCUMENT", re.DOTALL),
    "references": re.compile(r"REFERENCES:\n(.*?)\nEND REFERENCES", re.DOTALL),
    "suggestions": re.compile(r"SUGGESTIONS:\n(.*?)\nEND SUGGESTIONS", re.DOTALL),
    "answer": re.compile(r"ANSWER:\n(.*?)\nEND ANSWER", re.DOTALL),
    "feedback": re.compile(r"FEEDBACK:\n(.*?)\nEND FEEDBACK", re.DOTALL),
    "answer_a": re.compile(r"ANSWER A:\n(.*?)\nEND ANSWER A", re.DOTALL),
    "answer_b": re.compile(r"ANSWER B:\n(.*?)\nEND ANSWER B", re.DOTALL),
}


def _section(text: str, name: str) -> str:
    match = _SECTION_RES[name].search(text)
    return match.group(1).strip() if match else ""


def _content_words(text: str, limit: int = 40) -> list[str]:
    words = [w.lower() for w in re.findall(r"[A-Za-z][A-Za-z-]{3,}", text)]
    seen: list[str] = []
    for w in words:
        if w not in seen:
            seen.append(w)
        if len(seen) >= limit:
            break
    return seen or ["details"]

def _sentences(text: str) -> list[str]:
    parts = [s.strip() for s in re.split(r"(?<=[.!?])\s+|\n+", text) if len(s.strip()) > 20]
    return parts or [text.strip()[:160] or "the provided material"]


def synthesize_mock_reply(kind: str, prompt: str, seed: int = 0, params_seed: int | None = None) -> str:
    """Produce a plausible, deterministic reply for a pipeline stage.

    Keyed only on (seed, params seed, kind, prompt bytes) so identical runs
    yield identical transcripts.
    """
    digest = hashlib.sha256(f"{seed}:{params_seed}:{kind}:{prompt}".encode("utf-8")).digest()
    rng = random.Random(int.from_bytes(digest[:8], "big"))

    if kind == "seed_extraction":
        doc = _section(prompt, "document") or prompt
        words = _content_words(doc)
        sents = _sentences(doc)
        w1 = rng.choice(words)
        w2 = rng.choice(words)
        return (
            f"1. Q: What should I know about {w1}?\n"
            f"   A: {sents[0]}\n"
            f"2. Q: How do I handle {w2} correctly?\n"
            f"   A: {sents[min(1, len(sents) - 1)]}\n"
        )

    if kind == "assistant":
        refs = _section(prompt, "references") or prompt
        words = _content_words(refs)
        sents = _sentences(refs)
        answer = " ".join(sents[: min(2, len(sents))])
        followups = rng.sample(words, k=min(3, len(words)))
        lines = [answer, "FOLLOW-UPS:"]
        templates = [
            "What else should I check about {w}?",
            "How does {w} affect the results?",
            "Can you explain {w} in more detail?",
        ]
        for i, w in enumerate(followups):
            lines.append(f"{i + 1}. {templates[i % len(templates)].format(w=w)}")
        return "\n".join(lines)

    if kind == "inquirer":
        offered = _section(prompt, "suggestions")
        n_offered = len(re.findall(r"^\s*\d+\.", offered, re.MULTILINE))
        roll = rng.random()
        if roll < 0.25 or n_offered == 0:
            if roll < 0.125:
                return "No more questions"
            words = _content_words(prompt)
            return f"Could you go deeper on {rng.choice(words)}?"
        if roll < 0.5:
            return "No more questions"
        return str(rng.randrange(1, n_offered + 1))

    if kind == "refiner":
        answer = _section(prompt, "answer")
        feedback = _section(prompt, "feedback")
        words = _content_words(feedback + " " + prompt)
        extra = rng.choice(words)
        return f"{answer} Additionally, keep {extra} in mind when applying this."

    if kind == "doc_evaluator":
        dims = {
            name: rng.randint(3, 5)
            for name in ("relevance", "completeness", "clarity", "accuracy", "actionability")
        }
        overall = round(sum(dims.values()) / 5, 2)
        word = rng.choice(_content_words(prompt))
        verdict = dict(dims)
        verdict["overall"] = overall
        verdict["feedback"] = f"Consider adding more concrete steps about {word}."
        return json.dumps(verdict, sort_keys=True)

    if kind == "winrate_evaluator":
        a = _section(prompt, "answer_a")
        b = _section(prompt, "answer_b")
        ha = hashlib.sha256(a.encode("utf-8")).hexdigest()
        hb = hashlib.sha256(b.encode("utf-8")).hexdigest()
        winner = "tie" if ha == hb else ("A" if ha > hb else "B")
        return json.dumps({"winner": winner, "reason": "mock verdict"})

    words = _content_words(prompt)
    return f"Acknowledged: {rng.choice(words)}."


# ---------------------------------------------------------------------------
# Gateway
# ---------------------------------------------------------------------------


class Gateway:
    """Thread-safe front door for generation calls.

    Shared across pipeline workers; the only serialization points are the
    in-flight semaphore and the call-log lock. Every backend attempt appends
    exactly one CallRecord, so generation work is always attributable.
    """

    def __init__(
        self,
        backend: ChatBackend,
        retries: int = 3,
        concurrency: int = 4,
        sleep=time.sleep,
        rng: random.Random | None = None,
    ):
        self.backend = backend
        self.retries = retries
        self._semaphore = threading.Semaphore(concurrency)
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._log_lock = threading.Lock()
        self.call_log: list[CallRecord] = []

    def _record(self, rec: CallRecord) -> None:
        with self._log_lock:
            self.call_log.append(rec)

    def drain_log(self) -> list[CallRecord]:
        with self._log_lock:
            drained, self.call_log = self.call_log, []
            return drained

    def complete(self, messages: Sequence[ChatMessage], params: GenerationParams, kind: str = "generic") -> str:
        validate_messages(messages)
        req_hash = request_hash(messages, params)
        prompt_tokens = _estimate_tokens(prompt_text(messages))
        last_error: Exception | None = None
        attempts = self.retries + 1
        for attempt in range(1, attempts + 1):
            start = time.perf_counter()
            try:
                with self._semaphore:
                    reply = self.backend.complete(messages, params, kind)
            except TransientBackendError as exc:
                self._record(CallRecord(
                    request_hash=req_hash, backend=self.backend.name, kind=kind,
                    attempt=attempt, latency_s=time.perf_counter() - start,
                    prompt_tokens=prompt_tokens, completion_tokens=0,
                    truncated=False, ok=False, error=str(exc),
                ))
                last_error = exc
                if attempt < attempts:
                    delay = exc.retry_after
                    if delay is None:
                        delay = (2 ** (attempt - 1)) * (1.0 + self._rng.random() * 0.25)
                    self._sleep(delay)
                continue
            except GatewayError as exc:
                self._record(CallRecord(
                    request_hash=req_hash, backend=self.backend.name, kind=kind,
                    attempt=attempt, latency_s=time.perf_counter() - start,
                    prompt_tokens=prompt_tokens, completion_tokens=0,
                    truncated=False, ok=False, error=str(exc),
                ))
                raise
            self._record(CallRecord(
                request_hash=req_hash, backend=self.backend.name, kind=kind,
                attempt=attempt, latency_s=time.perf_counter() - start,
                prompt_tokens=reply.prompt_tokens or prompt_tokens,
                completion_tokens=reply.completion_tokens or _estimate_tokens(reply.text),
                truncated=reply.truncated, ok=True,
            ))
            return reply.text.strip()
        raise GatewayError(f"backend {self.backend.name} failed after {attempts} attempts: {last_error}")
