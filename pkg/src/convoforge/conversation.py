"""Dual-role dialogue simulation over seed questions.

One role imitates a platform user (picking or inventing follow-ups, or
ending the chat with the literal sentinel "No more questions"); the other
answers grounded in retrieved chunks and offers follow-up suggestions.
Conversations never exceed the turn cap regardless of what the backends
return.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

from .corpus import Chunk
from .errors import GatewayError, RetrievalError
from .formatting import render_history, render_references, render_suggestions
from .gateway import ChatMessage, Gateway, GenerationParams, render_template
from .retrieval import RetrievedDoc, VectorIndex
from .seeds import SeedQA, StyleExemplar, content_words, render_exemplars

DEFAULT_MAX_TURNS = 3
DEFAULT_N_SUGGESTIONS = 3

STOP_SENTINEL = "no more questions"

TERMINATION_INQUIRER_STOP = "inquirer_stop"
TERMINATION_TURN_CAP = "turn_cap"
TERMINATION_ERROR = "error"

_FOLLOWUP_SPLIT_RE = re.compile(r"^\s*FOLLOW-UPS:\s*$", re.IGNORECASE | re.MULTILINE)
_NUMBERED_RE = re.compile(r"^\s*\d+[.)]\s*(.+?)\s*$", re.MULTILINE)

INQUIRER_REMINDER = (
    "That reply was not a valid move. Reply with only a suggestion number within range, "
    'a new question, or exactly "No more questions".'
)


@dataclass(frozen=True)
class InquirerAction:
    kind: str  # "pick" | "new_question" | "stop"
    index: int | None = None  # 1-based suggestion index for "pick"
    text: str | None = None  # question text for "new_question"
    rationale_text: str | None = None


@dataclass(frozen=True)
class ConversationTurn:
    turn_index: int  # 1-based
    question: str
    answer: str
    retrieved: tuple[RetrievedDoc, ...]
    suggestions: tuple[str, ...]


@dataclass(frozen=True)
class Conversation:
    seed_ref: str
    turns: tuple[ConversationTurn, ...]
    termination: str


def grounded_in(answer: str, doc_texts: Sequence[str]) -> bool:
    """True when the answer shares at least one content word with the docs."""
    doc_words = set()
    for text in doc_texts:
        doc_words |= content_words(text)
    return bool(content_words(answer) & doc_words)


def parse_assistant_reply(reply: str, n_suggestions: int) -> tuple[str, list[str]]:
    """Split a generation into (answer, follow-up suggestions).

    A missing or malformed FOLLOW-UPS section degrades to zero suggestions;
    the dialogue continues either way.
    """
    parts = _FOLLOWUP_SPLIT_RE.split(reply, maxsplit=1)
    answer = parts[0].strip()
    suggestions: list[str] = []
    if len(parts) == 2:
        suggestions = [m for m in _NUMBERED_RE.findall(parts[1])][:n_suggestions]
    return answer, suggestions


def parse_inquirer_reply(reply: str, n_suggestions: int) -> InquirerAction | None:
    """Map a generation to an action; None means unparseable (re-ask)."""
    text = reply.strip()
    normalized = re.sub(r"^[\W_]+|[\W_]+$", "", text).lower()
    if normalized == STOP_SENTINEL:
        return InquirerAction(kind="stop")
    bare = re.fullmatch(r"\(?(\d+)\)?[.)]?", text)
    if bare:
        index = int(bare.group(1))
        if 1 <= index <= n_suggestions:
            return InquirerAction(kind="pick", index=index)
        return None
    if len(normalized) >= 5 and re.search(r"[a-z]", normalized):
        return InquirerAction(kind="new_question", text=text)
    return None


class ConversationEngine:
    """Holds everything both roles need; conversations are independent jobs."""

    def __init__(
        self,
        gateway: Gateway,
        index: VectorIndex,
        chunks_by_id: dict[str, Chunk],
        exemplars: Sequence[StyleExemplar],
        k: int = 3,
        n_suggestions: int = DEFAULT_N_SUGGESTIONS,
        max_turns: int = DEFAULT_MAX_TURNS,
        assistant_params: GenerationParams = GenerationParams(),
        inquirer_params: GenerationParams = GenerationParams(),
    ):
        if max_turns < 1:
            raise ValueError("max_turns must be >= 1")
        self.gateway = gateway
        self.index = index
        self.chunks_by_id = chunks_by_id
        self.exemplars = list(exemplars)
        self.k = k
        self.n_suggestions = n_suggestions
        self.max_turns = max_turns
        self.assistant_params = assistant_params
        self.inquirer_params = inquirer_params

    def _doc_texts(self, retrieved: Sequence[RetrievedDoc]) -> list[str]:
        return [self.chunks_by_id[r.chunk_ref].text for r in retrieved]

    def assistant_step(
        self, question: str, history: Sequence[tuple[str, str]]
    ) -> tuple[str, list[str], list[RetrievedDoc]]:
        """Answer grounded in the top-k chunks for the question."""
        if not question.strip():
            raise ValueError("question must be non-empty")
        if len(self.index) == 0:
            raise RetrievalError("vector index is empty; run ingestion first")
        retrieved = self.index.top_k(question, k=self.k)
        messages = render_template(
            "assistant",
            {
                "documents": render_references(self._doc_texts(retrieved)),
                "history": render_history(history),
                "question": question,
                "n_suggestions": str(self.n_suggestions),
            },
        )
        reply = self.gateway.complete(messages, self.assistant_params, kind="assistant")
        answer, suggestions = parse_assistant_reply(reply, self.n_suggestions)
        if not answer:
            raise GatewayError("assistant produced an empty answer")
        return answer, suggestions, retrieved

    def inquirer_step(
        self, history: Sequence[tuple[str, str]], suggestions: Sequence[str]
    ) -> InquirerAction:
        """Choose the user's next move; degrades to stop after a failed re-ask."""
        if not history:
            raise ValueError("inquirer needs at least one completed turn")
        messages = render_template(
            "inquirer",
            {
                "style_examples": render_exemplars(self.exemplars),
                "history": render_history(history),
                "suggestions": render_suggestions(suggestions),
            },
        )
        try:
            reply = self.gateway.complete(messages, self.inquirer_params, kind="inquirer")
            action = parse_inquirer_reply(reply, len(suggestions))
            if action is not None:
                return action
            retry = list(messages) + [ChatMessage("user", INQUIRER_REMINDER)]
            reply = self.gateway.complete(retry, self.inquirer_params, kind="inquirer")
            action = parse_inquirer_reply(reply, len(suggestions))
            if action is not None:
                return action
        except GatewayError:
            pass
        return InquirerAction(kind="stop")

    def run(self, seed: SeedQA, seed_ref: str) -> Conversation:
        """Simulate one conversation; turn 1 asks the seed question verbatim."""
        turns: list[ConversationTurn] = []
        history: list[tuple[str, str]] = []
        question = seed.question
        termination = TERMINATION_ERROR
        for turn_index in range(1, self.max_turns + 1):
            try:
                answer, suggestions, retrieved = self.assistant_step(question, history)
            except GatewayError:
                termination = TERMINATION_ERROR
                break
            turns.append(
                ConversationTurn(
                    turn_index=turn_index,
                    question=question,
                    answer=answer,
                    retrieved=tuple(retrieved),
                    suggestions=tuple(suggestions),
                )
            )
            history.append((question, answer))
            if turn_index == self.max_turns:
                termination = TERMINATION_TURN_CAP
                break
            action = self.inquirer_step(history, suggestions)
            if action.kind == "stop":
                termination = TERMINATION_INQUIRER_STOP
                break
            if action.kind == "pick":
                question = suggestions[action.index - 1]
            else:
                question = action.text or ""
                if not question.strip():
                    termination = TERMINATION_ERROR
                    break
        return Conversation(seed_ref=seed_ref, turns=tuple(turns), termination=termination)


# ---------------------------------------------------------------------------
# Serialization and rendering
# ---------------------------------------------------------------------------


def conversation_to_record(conversation: Conversation) -> dict:
    return {
        "seed_ref": conversation.seed_ref,
        "termination": conversation.termination,
        "turns": [
            {
                "turn_index": t.turn_index,
                "question": t.question,
                "answer": t.answer,
                "retrieved": [{"chunk_ref": r.chunk_ref, "score": r.score} for r in t.retrieved],
                "suggestions": list(t.suggestions),
            }
            for t in conversation.turns
        ],
    }


def conversation_from_record(record: dict) -> Conversation:
    return Conversation(
        seed_ref=record["seed_ref"],
        termination=record["termination"],
        turns=tuple(
            ConversationTurn(
                turn_index=t["turn_index"],
                question=t["question"],
                answer=t["answer"],
                retrieved=tuple(RetrievedDoc(r["chunk_ref"], r["score"]) for r in t["retrieved"]),
                suggestions=tuple(t["suggestions"]),
            )
            for t in record["turns"]
        ),
    )


def render_transcript(conversation: Conversation) -> str:
    """Human-readable transcript for spot checks."""
    lines = [f"=== conversation (seed {conversation.seed_ref}, ends: {conversation.termination}) ==="]
    for turn in conversation.turns:
        lines.append(f"[turn {turn.turn_index}] User: {turn.question}")
        lines.append(f"[turn {turn.turn_index}] Assistant: {turn.answer}")
        if turn.suggestions:
            lines.append(f"[turn {turn.turn_index}] Suggested follow-ups:")
            lines.extend(f"  {i + 1}. {s}" for i, s in enumerate(turn.suggestions))
        refs = ", ".join(f"{r.chunk_ref}({r.score:.3f})" for r in turn.retrieved)
        lines.append(f"[turn {turn.turn_index}] Grounded on: {refs}")
    return "\n".join(lines)
