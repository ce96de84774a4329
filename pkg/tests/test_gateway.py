from __future__ import annotations

import random

import pytest
import requests

from convoforge.errors import GatewayError, TemplateError
from convoforge.gateway import (
    ChatMessage,
    Gateway,
    GenerationParams,
    HttpChatBackend,
    MockChatBackend,
    QueueBackend,
    REQUIRED_TEMPLATES,
    ScriptEntry,
    render_template,
    request_hash,
    validate_messages,
    validate_templates,
)


def msgs(user: str = "hello", system: str = "sys") -> list[ChatMessage]:
    return [ChatMessage("system", system), ChatMessage("user", user)]


class TestValidation:
    def test_first_message_must_be_system(self):
        with pytest.raises(ValueError):
            validate_messages([ChatMessage("user", "hi")])

    def test_empty_content_rejected(self):
        with pytest.raises(ValueError):
            validate_messages([ChatMessage("system", "")])

    def test_params_bounds(self):
        with pytest.raises(ValueError):
            GenerationParams(temperature=-1)
        with pytest.raises(ValueError):
            GenerationParams(max_output_tokens=0)

    def test_default_temperature_is_paper_default(self):
        assert GenerationParams().temperature == 0.7


class TestScriptedMock:
    def test_hash_scripted_response(self):
        params = GenerationParams(seed=1)
        h = request_hash(msgs(), params)
        backend = MockChatBackend([ScriptEntry(response="OK", hash=h)])
        gw = Gateway(backend, sleep=lambda _: None)
        assert gw.complete(msgs(), params, kind="generic") == "OK"

    def test_regex_scripted_response(self):
        backend = MockChatBackend([ScriptEntry(response="matched", regex=r"magic-token")])
        gw = Gateway(backend, sleep=lambda _: None)
        assert gw.complete(msgs("has magic-token inside"), GenerationParams()) == "matched"

    def test_script_file_round_trip(self, tmp_path):
        path = tmp_path / "script.jsonl"
        path.write_text('{"regex": "ping", "response": "pong"}\n', encoding="utf-8")
        backend = MockChatBackend.from_file(path)
        gw = Gateway(backend, sleep=lambda _: None)
        assert gw.complete(msgs("ping"), GenerationParams()) == "pong"

    def test_once_entries_are_consumed(self):
        backend = MockChatBackend([
            ScriptEntry(response="first", regex=".", once=True),
            ScriptEntry(response="second", regex="."),
        ])
        gw = Gateway(backend, sleep=lambda _: None)
        assert gw.complete(msgs(), GenerationParams()) == "first"
        assert gw.complete(msgs(), GenerationParams()) == "second"

    def test_strict_mock_raises_on_unscripted(self):
        gw = Gateway(MockChatBackend(strict=True), sleep=lambda _: None)
        with pytest.raises(GatewayError):
            gw.complete(msgs(), GenerationParams())

    def test_mock_determinism_over_random_prompts(self):
        rng = random.Random(17)
        prompts = ["".join(chr(rng.randrange(33, 500)) for _ in range(rng.randrange(5, 80))) for _ in range(100)]
        a = Gateway(MockChatBackend(seed=7), sleep=lambda _: None)
        b = Gateway(MockChatBackend(seed=7), sleep=lambda _: None)
        params = GenerationParams(seed=3)
        for prompt in prompts:
            assert a.complete(msgs(prompt), params) == b.complete(msgs(prompt), params)


class _FailingSession:
    def __init__(self, failures: int, payload=None, status: int = 200, headers=None):
        self.failures = failures
        self.payload = payload
        self.status = status
        self.headers = headers or {}
        self.calls = 0

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls += 1
        if self.calls <= self.failures:
            raise requests.ConnectionError("timeout")
        return _FakeResponse(self.payload, self.status, self.headers)


class _FakeResponse:
    def __init__(self, payload, status, headers):
        self._payload = payload
        self.status_code = status
        self.headers = headers
        self.text = str(payload)

    def json(self):
        return self._payload


class TestHttpBackend:
    def _payload(self, text="answer text"):
        return {
            "choices": [{"message": {"content": text}, "finish_reason": "stop"}],
            "usage": {"prompt_tokens": 10, "completion_tokens": 5},
        }

    def test_happy_path_parses_first_choice(self):
        session = _FailingSession(failures=0, payload=self._payload("  spaced  "))
        backend = HttpChatBackend("http://x", "m", session=session)
        gw = Gateway(backend, sleep=lambda _: None)
        assert gw.complete(msgs(), GenerationParams()) == "spaced"

    def test_exhausted_retries_reports_attempt_count(self):
        session = _FailingSession(failures=99)
        backend = HttpChatBackend("http://x", "m", session=session)
        gw = Gateway(backend, retries=3, sleep=lambda _: None)
        with pytest.raises(GatewayError, match="4 attempts"):
            gw.complete(msgs(), GenerationParams())
        assert session.calls == 4

    def test_recovers_within_retry_budget(self):
        session = _FailingSession(failures=2, payload=self._payload())
        backend = HttpChatBackend("http://x", "m", session=session)
        gw = Gateway(backend, retries=3, sleep=lambda _: None)
        assert gw.complete(msgs(), GenerationParams()) == "answer text"

    def test_rate_limit_uses_server_hint(self):
        sleeps = []
        session = _FailingSession(failures=0, payload=self._payload(), status=429, headers={"Retry-After": "9"})
        backend = HttpChatBackend("http://x", "m", session=session)
        gw = Gateway(backend, retries=1, sleep=sleeps.append)
        with pytest.raises(GatewayError):
            gw.complete(msgs(), GenerationParams())
        assert sleeps == [9.0]

    def test_client_error_is_not_retried(self):
        session = _FailingSession(failures=0, payload={"error": "bad"}, status=400)
        backend = HttpChatBackend("http://x", "m", session=session)
        gw = Gateway(backend, retries=3, sleep=lambda _: None)
        with pytest.raises(GatewayError, match="400"):
            gw.complete(msgs(), GenerationParams())
        assert session.calls == 1


class TestCallLog:
    def test_every_attempt_is_recorded(self):
        session = _FailingSession(failures=2, payload={
            "choices": [{"message": {"content": "ok"}, "finish_reason": "stop"}],
        })
        gw = Gateway(HttpChatBackend("http://x", "m", session=session), retries=3, sleep=lambda _: None)
        gw.complete(msgs(), GenerationParams(), kind="assistant")
        log = gw.drain_log()
        assert len(log) == 3
        assert [r.ok for r in log] == [False, False, True]
        assert all(r.kind == "assistant" for r in log)
        assert gw.drain_log() == []


class TestTemplates:
    def test_all_required_templates_registered(self):
        validate_templates()
        assert set(REQUIRED_TEMPLATES) <= {
            "seed_extraction", "inquirer", "assistant", "refiner", "doc_evaluator", "winrate_evaluator",
        }

    def test_missing_template_dir_fails_startup(self, tmp_path):
        with pytest.raises(TemplateError, match="seed_extraction"):
            validate_templates(tmp_path)

    def test_inquirer_render_contains_style_examples_verbatim(self):
        examples = "- How do I get a refund?\n- Why was my ad rejected?"
        rendered = render_template("inquirer", {
            "style_examples": examples,
            "history": "Turn 1\nUser: q\nAssistant: a",
            "suggestions": "1. one\n2. two",
        })
        joined = "\n".join(m.content for m in rendered)
        assert "How do I get a refund?" in joined
        assert "Why was my ad rejected?" in joined
        assert rendered[0].role == "system"

    def test_unknown_template_rejected(self):
        with pytest.raises(TemplateError, match="unknown"):
            render_template("nope", {})

    def test_missing_placeholder_named(self):
        with pytest.raises(TemplateError, match="question"):
            render_template("assistant", {"documents": "d", "history": "h", "n_suggestions": "3"})

    def test_unreferenced_binding_named(self):
        with pytest.raises(TemplateError, match="extra_key"):
            render_template("doc_evaluator", {
                "question": "q", "answer": "a", "documents": "d", "extra_key": "x",
            })

    def test_rendering_is_deterministic(self):
        bindings = {"question": "q", "answer": "a", "documents": "d"}
        assert render_template("doc_evaluator", bindings) == render_template("doc_evaluator", bindings)


class TestQueueBackend:
    def test_pops_in_order_then_raises(self):
        gw = Gateway(QueueBackend(["one", "two"]), sleep=lambda _: None)
        assert gw.complete(msgs(), GenerationParams()) == "one"
        assert gw.complete(msgs(), GenerationParams()) == "two"
        with pytest.raises(GatewayError):
            gw.complete(msgs(), GenerationParams())
