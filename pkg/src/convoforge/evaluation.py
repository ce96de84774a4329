"""Judge-based scoring, pairwise WinRate, and distribution/similarity reports."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

from .errors import ConvoForgeError, GatewayError
from .formatting import render_references
from .gateway import ChatMessage, Gateway, GenerationParams, render_template
from .refinement import DIMENSIONS, AssessmentScores, assess
from .retrieval import EmbeddingBackend, centroid_similarity

VERDICTS = ("A", "B", "tie")

VERDICT_REMINDER = (
    'Your previous reply was not a valid verdict. Reply with only the JSON object '
    '{"winner": "A" | "B" | "tie", "reason": "..."}.'
)

_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)\s*```", re.DOTALL)
_OBJECT_RE = re.compile(r"\{.*\}", re.DOTALL)


class JudgeError(ConvoForgeError):
    """Pairwise judge unusable for one pair after the allowed re-ask."""


@dataclass(frozen=True)
class JudgedAnswer:
    question: str
    answer: str
    doc_refs: tuple[str, ...]
    scores: AssessmentScores


@dataclass(frozen=True)
class WinRateResult:
    wins: int
    losses: int
    ties: int
    excluded: int = 0

    @property
    def winrate(self) -> float:
        total = self.wins + self.losses + self.ties
        if total <= 0:
            raise ValueError("winrate undefined: no judged pairs")
        return (self.wins + 0.5 * self.ties) / total


def judge_answer(
    question: str,
    answer: str,
    doc_texts: Sequence[str],
    gateway: Gateway,
    params: GenerationParams,
) -> AssessmentScores:
    """Five-dimension verdict for one answer (same judge as refinement)."""
    return assess(question, answer, doc_texts, gateway, params)


def parse_verdict(text: str) -> str:
    candidate = text.strip()
    fenced = _FENCE_RE.search(candidate)
    if fenced:
        candidate = fenced.group(1)
    try:
        data = json.loads(candidate)
    except json.JSONDecodeError:
        embedded = _OBJECT_RE.search(candidate)
        if not embedded:
            raise ValueError("verdict reply contains no JSON object")
        data = json.loads(embedded.group(0))
    if not isinstance(data, dict) or "winner" not in data:
        raise ValueError("verdict reply missing 'winner'")
    winner = str(data["winner"]).strip()
    normalized = {"a": "A", "b": "B", "tie": "tie"}.get(winner.lower())
    if normalized is None:
        raise ValueError(f"winner must be one of {VERDICTS}, got {winner!r}")
    return normalized


def _single_verdict(
    question: str, answer_a: str, answer_b: str, gateway: Gateway, params: GenerationParams
) -> str:
    messages = render_template(
        "winrate_evaluator",
        {"question": question, "answer_a": answer_a, "answer_b": answer_b},
    )
    try:
        reply = gateway.complete(messages, params, kind="winrate_evaluator")
        try:
            return parse_verdict(reply)
        except ValueError:
            retry = list(messages) + [ChatMessage("user", VERDICT_REMINDER)]
            reply = gateway.complete(retry, params, kind="winrate_evaluator")
            try:
                return parse_verdict(reply)
            except ValueError as exc:
                raise JudgeError(f"verdict unusable after re-ask: {exc}") from exc
    except GatewayError as exc:
        raise JudgeError(f"judge backend failed: {exc}") from exc


def _swap(verdict: str) -> str:
    return {"A": "B", "B": "A", "tie": "tie"}[verdict]


def combine_orderings(forward: str, swapped_back: str) -> str:
    """Positional-bias control: a win needs agreement across both orders.

    Winning or tying both orders with at least one outright win counts as a
    win; opposite verdicts across orders count as a tie.
    """
    pair = {forward, swapped_back}
    if pair <= {"A", "tie"} and "A" in pair:
        return "A"
    if pair <= {"B", "tie"} and "B" in pair:
        return "B"
    return "tie"


def winrate(
    pairs: Sequence[tuple[str, str, str]],
    gateway: Gateway,
    params: GenerationParams,
    on_verdict: Callable[[int, str], None] | None = None,
) -> WinRateResult:
    """Judge (question, answer_A, answer_B) pairs twice with the order swapped.

    A failed pair is excluded from the denominator and tallied separately.
    """
    if not pairs:
        raise ValueError("winrate requires at least one pair")
    wins = losses = ties = excluded = 0
    for i, (question, answer_a, answer_b) in enumerate(pairs):
        try:
            forward = _single_verdict(question, answer_a, answer_b, gateway, params)
            swapped = _single_verdict(question, answer_b, answer_a, gateway, params)
        except JudgeError:
            excluded += 1
            continue
        final = combine_orderings(forward, _swap(swapped))
        if on_verdict is not None:
            on_verdict(i, final)
        if final == "A":
            wins += 1
        elif final == "B":
            losses += 1
        else:
            ties += 1
    if wins + losses + ties == 0:
        raise JudgeError(f"all {excluded} pairs were excluded; no verdicts to aggregate")
    return WinRateResult(wins=wins, losses=losses, ties=ties, excluded=excluded)


# ---------------------------------------------------------------------------
# Distributions and similarity
# ---------------------------------------------------------------------------


def score_distribution(scores: Sequence[AssessmentScores]) -> dict[str, dict[int, int]]:
    """Counts per integer score 1..5, per dimension plus rounded overall."""
    if not scores:
        raise ValueError("score_distribution requires at least one score")
    histogram: dict[str, dict[int, int]] = {}
    for name in DIMENSIONS:
        counts = Counter(s.dimension(name) for s in scores)
        histogram[name] = {bucket: counts.get(bucket, 0) for bucket in range(1, 6)}
    overall = Counter(min(5, max(1, round(s.overall))) for s in scores)
    histogram["overall"] = {bucket: overall.get(bucket, 0) for bucket in range(1, 6)}
    return histogram


def histogram_fractions(histogram: dict[str, dict[int, int]]) -> dict[str, dict[int, float]]:
    fractions: dict[str, dict[int, float]] = {}
    for name, counts in histogram.items():
        total = sum(counts.values())
        fractions[name] = {bucket: n / total for bucket, n in counts.items()}
    return fractions


def imitation_similarity_report(
    imitation_questions: Sequence[str],
    synthesis_questions: Sequence[str],
    real_questions: Sequence[str],
    backend: EmbeddingBackend,
) -> dict:
    """Centroid similarity of each synthetic set against real questions."""
    for name, questions in (
        ("imitation", imitation_questions),
        ("synthesis", synthesis_questions),
        ("real", real_questions),
    ):
        if not questions:
            raise ValueError(f"{name} question set is empty")
    real_vecs = backend.embed(list(real_questions))
    sim_imitation = centroid_similarity(backend.embed(list(imitation_questions)), real_vecs)
    sim_synthesis = centroid_similarity(backend.embed(list(synthesis_questions)), real_vecs)
    if sim_imitation > sim_synthesis:
        closer = "imitation"
    elif sim_synthesis > sim_imitation:
        closer = "synthesis"
    else:
        closer = "equal"
    return {"sim_imitation": sim_imitation, "sim_synthesis": sim_synthesis, "closer": closer}


# ---------------------------------------------------------------------------
# CSV rows (files are written by the pipeline)
# ---------------------------------------------------------------------------


def dimension_summary_rows(judged: Sequence[JudgedAnswer]) -> list[list[str]]:
    rows = [["dimension", "mean", "count"]]
    if not judged:
        return rows
    for name in DIMENSIONS:
        mean = sum(j.scores.dimension(name) for j in judged) / len(judged)
        rows.append([name, f"{mean:.4f}", str(len(judged))])
    mean_overall = sum(j.scores.overall for j in judged) / len(judged)
    rows.append(["overall", f"{mean_overall:.4f}", str(len(judged))])
    return rows


def winrate_summary_rows(result: WinRateResult) -> list[list[str]]:
    return [
        ["wins", "losses", "ties", "excluded", "winrate"],
        [str(result.wins), str(result.losses), str(result.ties), str(result.excluded),
         f"{result.winrate:.6f}"],
    ]


def histogram_rows(histogram: dict[str, dict[int, int]]) -> list[list[str]]:
    rows = [["dimension", "score", "count", "fraction"]]
    fractions = histogram_fractions(histogram)
    for name, counts in histogram.items():
        for bucket in range(1, 6):
            rows.append([name, str(bucket), str(counts[bucket]), f"{fractions[name][bucket]:.6f}"])
    return rows
