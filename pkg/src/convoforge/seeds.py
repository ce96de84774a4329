"""Seed question-answer synthesis from chunks, styled after real user questions."""

from __future__ import annotations

import random
import re
from dataclasses import dataclass
from pathlib import Path

from ._io import sha256_text
from .corpus import Chunk
from .errors import GatewayError
from .gateway import ChatMessage, Gateway, GenerationParams, render_template

DEFAULT_N_EXEMPLARS = 15

# Words too generic to count as grounding evidence.
_STOPWORDS = frozenset(
    "that this with from have what when where which whose your will would could "
    "should there their about into over under more most some such then than they "
    "them were been being does doing only also very just like each other".split()
)

_PAIR_RE = re.compile(
    r"Q:\s*(?P<q>.+?)\s*\n\s*A:\s*(?P<a>.+?)(?=\n\s*(?:\d+[.)]\s*)?Q:|\Z)",
    re.DOTALL,
)

FORMAT_REMINDER = (
    "Your previous reply was not in the required format. Reply again using only "
    "numbered pairs, exactly like:\n1. Q: <question>\n   A: <answer>"
)


@dataclass(frozen=True)
class StyleExemplar:
    question: str
    sampled_at: str


@dataclass(frozen=True)
class SeedQA:
    question: str
    answer: str
    chunk_id: str
    exemplar_set_hash: str


@dataclass(frozen=True)
class SeedFailure:
    chunk_id: str
    reason: str


def load_user_questions(path: Path | str) -> list[str]:
    """Real-user-question file: one question per line, UTF-8."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [line.strip() for line in lines if line.strip()]


def sample_exemplars(user_questions: list[str], n: int = DEFAULT_N_EXEMPLARS, seed: int = 0) -> list[StyleExemplar]:
    """Uniform sample without replacement, deterministic under the seed."""
    unique: dict[str, int] = {}
    for i, question in enumerate(user_questions):
        q = question.strip()
        if q and q not in unique:
            unique[q] = i + 1
    if len(unique) < n:
        raise ValueError(
            f"need {n} distinct user questions but only {len(unique)} available; pass a smaller n"
        )
    picked = random.Random(seed).sample(list(unique), n)
    return [StyleExemplar(question=q, sampled_at=f"line:{unique[q]}") for q in picked]


def exemplar_set_hash(exemplars: list[StyleExemplar]) -> str:
    return sha256_text("\n".join(sorted(e.question for e in exemplars)))[:16]


def render_exemplars(exemplars: list[StyleExemplar]) -> str:
    return "\n".join(f"- {e.question}" for e in exemplars)


def content_words(text: str) -> set[str]:
    return {
        w.lower()
        for w in re.findall(r"[0-9A-Za-z][0-9A-Za-z-]{3,}", text)
        if w.lower() not in _STOPWORDS
    }


def parse_seed_pairs(text: str) -> list[tuple[str, str]]:
    pairs = []
    for match in _PAIR_RE.finditer(text):
        q = match.group("q").strip()
        a = match.group("a").strip()
        if q and a:
            pairs.append((q, a))
    return pairs


def generate_seed_qas(
    chunk: Chunk,
    exemplars: list[StyleExemplar],
    gateway: Gateway,
    params: GenerationParams,
    grounding_min_overlap: int = 1,
) -> tuple[list[SeedQA], SeedFailure | None]:
    """Ask the generator for QA pairs over one chunk and parse them.

    Pairs whose answer shares no content word with the chunk are rejected
    (cheap hallucination guard). One re-ask with a stricter format reminder
    is allowed; after that the chunk is recorded as seed-failed and the
    pipeline moves on.
    """
    bindings = {"style_examples": render_exemplars(exemplars), "chunk_text": chunk.text}
    messages = render_template("seed_extraction", bindings)
    chunk_words = content_words(chunk.text)
    set_hash = exemplar_set_hash(exemplars)

    def attempt(msgs: list[ChatMessage]) -> list[SeedQA]:
        reply = gateway.complete(msgs, params, kind="seed_extraction")
        accepted = []
        for q, a in parse_seed_pairs(reply):
            overlap = len(content_words(a) & chunk_words)
            if overlap >= grounding_min_overlap:
                accepted.append(
                    SeedQA(question=q, answer=a, chunk_id=chunk.chunk_id, exemplar_set_hash=set_hash)
                )
        return accepted

    try:
        seeds = attempt(messages)
        if seeds:
            return seeds, None
        retry = messages + [ChatMessage("user", FORMAT_REMINDER)]
        seeds = attempt(retry)
        if seeds:
            return seeds, None
        return [], SeedFailure(chunk_id=chunk.chunk_id, reason="unparseable or ungrounded after re-ask")
    except GatewayError as exc:
        return [], SeedFailure(chunk_id=chunk.chunk_id, reason=f"generation failed: {exc}")
