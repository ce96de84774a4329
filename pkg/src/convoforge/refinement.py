"""Judge-guided answer refinement and best-candidate selection.

Each conversation turn's answer is first revised using the surrounding
conversation, then iteratively revised against judge feedback. All
candidates and their scores form a pool; the best scorer strictly above the
quality threshold is kept, otherwise the record is dropped to an audit file.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Sequence

from .errors import ConvoForgeError, GatewayError
from .formatting import render_references
from .gateway import ChatMessage, Gateway, GenerationParams, render_template

DIMENSIONS = ("relevance", "completeness", "clarity", "accuracy", "actionability")

DEFAULT_ROUNDS = 3
DEFAULT_THRESHOLD = 4.0

JUDGE_FORMAT_REMINDER = (
    "Your previous reply was not a valid verdict. Reply with only the JSON object, "
    "all five integer dimensions between 1 and 5."
)

_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)\s*```", re.DOTALL)
_OBJECT_RE = re.compile(r"\{.*\}", re.DOTALL)


class AssessmentError(ConvoForgeError):
    """Judge reply unusable after the allowed re-ask."""


@dataclass(frozen=True)
class AssessmentScores:
    relevance: int
    completeness: int
    clarity: int
    accuracy: int
    actionability: int
    overall: float
    feedback: str

    def dimension(self, name: str) -> int:
        return int(getattr(self, name))


@dataclass(frozen=True)
class RefinementTrace:
    question: str
    candidates: tuple[str, ...]
    scores: tuple[AssessmentScores | None, ...]  # None = assessment failed, never fabricated
    threshold: float
    selected: int | None
    context_ref: str


@dataclass(frozen=True)
class Selection:
    index: int
    answer: str
    overall: float


def parse_assessment(text: str) -> AssessmentScores:
    """Parse the judge's strict machine-readable verdict.

    Accepts an optional markdown fence around the object. Dimension scores
    must be integers in 1..5; a missing overall falls back to the arithmetic
    mean of the five dimensions.
    """
    candidate = text.strip()
    fenced = _FENCE_RE.search(candidate)
    if fenced:
        candidate = fenced.group(1)
    try:
        data = json.loads(candidate)
    except json.JSONDecodeError:
        embedded = _OBJECT_RE.search(candidate)
        if not embedded:
            raise ValueError("judge reply contains no JSON object")
        data = json.loads(embedded.group(0))
    if not isinstance(data, dict):
        raise ValueError("judge reply is not a JSON object")

    dims: dict[str, int] = {}
    for name in DIMENSIONS:
        if name not in data:
            raise ValueError(f"judge reply missing dimension {name!r}")
        value = data[name]
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"dimension {name!r} must be an integer, got {value!r}")
        if not 1 <= value <= 5:
            raise ValueError(f"dimension {name!r} out of range 1..5: {value}")
        dims[name] = value

    if "overall" in data and data["overall"] is not None:
        overall = float(data["overall"])
    else:
        overall = sum(dims.values()) / len(DIMENSIONS)
    if not 1.0 <= overall <= 5.0:
        raise ValueError(f"overall score out of range [1,5]: {overall}")

    feedback = data.get("feedback", "")
    if not isinstance(feedback, str):
        raise ValueError("feedback must be a string")
    return AssessmentScores(overall=overall, feedback=feedback, **dims)


def assess(
    question: str,
    answer: str,
    doc_texts: Sequence[str],
    gateway: Gateway,
    params: GenerationParams,
) -> AssessmentScores:
    """Score one answer; one re-ask with a format reminder, then give up."""
    messages = render_template(
        "doc_evaluator",
        {"question": question, "answer": answer, "documents": render_references(doc_texts)},
    )
    try:
        reply = gateway.complete(messages, params, kind="doc_evaluator")
        try:
            return parse_assessment(reply)
        except ValueError:
            retry = list(messages) + [ChatMessage("user", JUDGE_FORMAT_REMINDER)]
            reply = gateway.complete(retry, params, kind="doc_evaluator")
            try:
                return parse_assessment(reply)
            except ValueError as exc:
                raise AssessmentError(f"judge reply unusable after re-ask: {exc}") from exc
    except GatewayError as exc:
        raise AssessmentError(f"judge backend failed: {exc}") from exc


def refine_init(
    question: str,
    answer: str,
    conversation_text: str,
    doc_texts: Sequence[str],
    gateway: Gateway,
    params: GenerationParams,
) -> str:
    """First revision: enrich the answer from the other conversation turns."""
    messages = render_template(
        "refiner",
        {
            "question": question,
            "current_answer": answer,
            "conversation": conversation_text,
            "documents": render_references(doc_texts),
            "feedback": "(none yet: first revision pass, use the conversation context)",
        },
    )
    return gateway.complete(messages, params, kind="refiner")


def refine_feedback(
    question: str,
    previous_answer: str,
    feedback: str,
    doc_texts: Sequence[str],
    gateway: Gateway,
    params: GenerationParams,
) -> str:
    """Next revision, steered by the latest judge feedback."""
    messages = render_template(
        "refiner",
        {
            "question": question,
            "current_answer": previous_answer,
            "conversation": "(see feedback; conversation context was used in the first pass)",
            "documents": render_references(doc_texts),
            "feedback": feedback,
        },
    )
    return gateway.complete(messages, params, kind="refiner")


def select_best(trace: RefinementTrace) -> Selection | None:
    """Highest-scoring candidate strictly above the threshold; earliest on ties.

    Returns None when no scored candidate qualifies (the record is dropped
    from the dataset and kept in the audit file).
    """
    best: Selection | None = None
    for index, score in enumerate(trace.scores):
        if score is None or score.overall <= trace.threshold:
            continue
        if best is None or score.overall > best.overall:
            best = Selection(index=index, answer=trace.candidates[index], overall=score.overall)
    return best


def refine_turn(
    question: str,
    answer: str,
    conversation_text: str,
    doc_texts: Sequence[str],
    gateway: Gateway,
    context_ref: str,
    rounds: int = DEFAULT_ROUNDS,
    threshold: float = DEFAULT_THRESHOLD,
    refiner_params: GenerationParams = GenerationParams(),
    judge_params: GenerationParams = GenerationParams(),
) -> RefinementTrace:
    """Run the full refine/assess loop for one turn.

    At most ``rounds`` refiner calls and ``rounds + 1`` assessments happen.
    A failed assessment leaves that candidate unscored and halts iteration
    (no feedback to steer the next round); a failed refinement keeps the
    pool as it stands.
    """
    candidates: list[str] = [answer]
    scores: list[AssessmentScores | None] = []

    def assess_or_none(text: str) -> AssessmentScores | None:
        try:
            return assess(question, text, doc_texts, gateway, judge_params)
        except AssessmentError:
            return None

    scores.append(assess_or_none(answer))

    for round_index in range(1, rounds + 1):
        try:
            if round_index == 1:
                revised = refine_init(question, candidates[-1], conversation_text, doc_texts,
                                      gateway, refiner_params)
            else:
                previous_score = scores[-1]
                if previous_score is None:
                    break  # no feedback to steer the next round
                revised = refine_feedback(question, candidates[-1], previous_score.feedback,
                                          doc_texts, gateway, refiner_params)
        except GatewayError:
            break  # pool keeps existing candidates
        if not revised.strip():
            break
        candidates.append(revised)
        scores.append(assess_or_none(revised))

    trace = RefinementTrace(
        question=question,
        candidates=tuple(candidates),
        scores=tuple(scores),
        threshold=threshold,
        selected=None,
        context_ref=context_ref,
    )
    selection = select_best(trace)
    if selection is not None:
        trace = RefinementTrace(
            question=trace.question,
            candidates=trace.candidates,
            scores=trace.scores,
            threshold=trace.threshold,
            selected=selection.index,
            context_ref=trace.context_ref,
        )
    return trace


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def scores_to_record(scores: AssessmentScores | None) -> dict | None:
    if scores is None:
        return None
    rec = {name: scores.dimension(name) for name in DIMENSIONS}
    rec["overall"] = scores.overall
    rec["feedback"] = scores.feedback
    return rec


def scores_from_record(record: dict | None) -> AssessmentScores | None:
    if record is None:
        return None
    return AssessmentScores(
        overall=record["overall"],
        feedback=record.get("feedback", ""),
        **{name: record[name] for name in DIMENSIONS},
    )


def trace_to_record(trace: RefinementTrace) -> dict:
    return {
        "question": trace.question,
        "candidates": list(trace.candidates),
        "scores": [scores_to_record(s) for s in trace.scores],
        "threshold": trace.threshold,
        "selected": trace.selected,
        "context_ref": trace.context_ref,
    }


def trace_from_record(record: dict) -> RefinementTrace:
    return RefinementTrace(
        question=record["question"],
        candidates=tuple(record["candidates"]),
        scores=tuple(scores_from_record(s) for s in record["scores"]),
        threshold=record["threshold"],
        selected=record["selected"],
        context_ref=record["context_ref"],
    )
