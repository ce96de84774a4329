from __future__ import annotations

import json
import random

import pytest

from convoforge.evaluation import (
    JudgeError,
    WinRateResult,
    combine_orderings,
    dimension_summary_rows,
    histogram_fractions,
    histogram_rows,
    imitation_similarity_report,
    judge_answer,
    parse_verdict,
    score_distribution,
    winrate,
)
from convoforge.gateway import Gateway, GenerationParams, MockChatBackend, QueueBackend
from convoforge.refinement import AssessmentScores
from convoforge.retrieval import HashEmbeddingBackend

PARAMS = GenerationParams(seed=0)
DOCS = ["Budgets cap spending.", "Invoices are monthly.", "Reviews take a day."]


def verdict(winner: str) -> str:
    return json.dumps({"winner": winner, "reason": "scripted"})


def a_win() -> list[str]:
    return [verdict("A"), verdict("B")]  # forward A, swapped B -> maps back to A


def b_win() -> list[str]:
    return [verdict("B"), verdict("A")]


def tie_pair() -> list[str]:
    return [verdict("tie"), verdict("tie")]


def scores(overall: float = 5.0, **dims) -> AssessmentScores:
    base = dict(relevance=5, completeness=5, clarity=5, accuracy=5, actionability=5)
    base.update(dims)
    return AssessmentScores(overall=overall, feedback="", **base)


class TestJudgeAnswer:
    def test_full_marks_reply(self):
        reply = json.dumps({
            "relevance": 5, "completeness": 5, "clarity": 5, "accuracy": 5,
            "actionability": 5, "overall": 5, "feedback": "perfect",
        })
        gw = Gateway(QueueBackend([reply]), sleep=lambda _: None)
        got = judge_answer("q", "a", DOCS, gw, PARAMS)
        assert got.overall == 5.0
        assert all(got.dimension(d) == 5 for d in
                   ("relevance", "completeness", "clarity", "accuracy", "actionability"))

    def test_identical_scripts_give_identical_scores(self):
        reply = json.dumps({
            "relevance": 4, "completeness": 4, "clarity": 4, "accuracy": 4,
            "actionability": 4, "overall": 4.0, "feedback": "fine",
        })
        first = judge_answer("q", "a1", DOCS, Gateway(QueueBackend([reply]), sleep=lambda _: None), PARAMS)
        second = judge_answer("q", "a2", DOCS, Gateway(QueueBackend([reply]), sleep=lambda _: None), PARAMS)
        assert first == second


class TestVerdictParsing:
    def test_accepts_case_variants(self):
        assert parse_verdict('{"winner": "a"}') == "A"
        assert parse_verdict('{"winner": "TIE"}') == "tie"

    def test_accepts_fenced_json(self):
        assert parse_verdict('```json\n{"winner": "B"}\n```') == "B"

    def test_rejects_missing_winner(self):
        with pytest.raises(ValueError):
            parse_verdict('{"verdict": "A"}')

    def test_rejects_free_text(self):
        with pytest.raises(ValueError):
            parse_verdict("A is better")


class TestCombineOrderings:
    def test_agreement_wins(self):
        assert combine_orderings("A", "A") == "A"
        assert combine_orderings("B", "B") == "B"

    def test_win_plus_tie_still_wins(self):
        assert combine_orderings("A", "tie") == "A"
        assert combine_orderings("tie", "B") == "B"

    def test_opposite_verdicts_are_a_tie(self):
        assert combine_orderings("A", "B") == "tie"
        assert combine_orderings("B", "A") == "tie"

    def test_double_tie_stays_tie(self):
        assert combine_orderings("tie", "tie") == "tie"


class TestWinRate:
    def _pairs(self, n: int) -> list[tuple[str, str, str]]:
        return [(f"q{i}", f"answer A {i}", f"answer B {i}") for i in range(n)]

    def test_three_a_wins_one_b_win(self):
        responses = a_win() + a_win() + a_win() + b_win()
        gw = Gateway(QueueBackend(responses), sleep=lambda _: None)
        result = winrate(self._pairs(4), gw, PARAMS)
        assert (result.wins, result.losses, result.ties) == (3, 1, 0)
        assert result.winrate == 0.75

    def test_order_dependent_verdicts_count_as_tie(self):
        # forward says A; swapped also says A (maps back to B): bias -> tie
        responses = [verdict("A"), verdict("A")]
        gw = Gateway(QueueBackend(responses), sleep=lambda _: None)
        result = winrate(self._pairs(1), gw, PARAMS)
        assert (result.wins, result.losses, result.ties) == (0, 0, 1)

    def test_all_ties_give_half(self):
        responses = tie_pair() * 5
        gw = Gateway(QueueBackend(responses), sleep=lambda _: None)
        result = winrate(self._pairs(5), gw, PARAMS)
        assert result.winrate == 0.5

    def test_failed_pair_is_excluded(self):
        responses = a_win() + ["junk", "junk"] + b_win()
        gw = Gateway(QueueBackend(responses), sleep=lambda _: None)
        result = winrate(self._pairs(3), gw, PARAMS)
        assert result.excluded == 1
        assert result.wins + result.losses + result.ties == 2

    def test_reask_can_rescue_a_verdict(self):
        responses = ["not json", verdict("A"), verdict("B")]
        gw = Gateway(QueueBackend(responses), sleep=lambda _: None)
        result = winrate(self._pairs(1), gw, PARAMS)
        assert result.wins == 1

    def test_all_pairs_excluded_raises(self):
        gw = Gateway(QueueBackend(["junk"] * 4), sleep=lambda _: None)
        with pytest.raises(JudgeError, match="excluded"):
            winrate(self._pairs(1), gw, PARAMS)

    def test_empty_pairs_rejected(self):
        gw = Gateway(QueueBackend([]), sleep=lambda _: None)
        with pytest.raises(ValueError):
            winrate([], gw, PARAMS)

    def test_swap_symmetry_with_deterministic_judge(self):
        rng = random.Random(21)
        pairs = [
            (f"question {i}", f"answer-{rng.randrange(10**6)}", f"answer-{rng.randrange(10**6)}")
            for i in range(40)
        ]
        swapped = [(q, b, a) for q, a, b in pairs]
        gw = Gateway(MockChatBackend(seed=2), sleep=lambda _: None)
        w = winrate(pairs, gw, PARAMS).winrate
        w_swapped = winrate(swapped, gw, PARAMS).winrate
        assert w == pytest.approx(1.0 - w_swapped)

    def test_winrate_undefined_without_pairs(self):
        with pytest.raises(ValueError):
            _ = WinRateResult(0, 0, 0).winrate


class TestScoreDistribution:
    def test_small_example(self):
        hist = score_distribution([scores(overall=5), scores(overall=5), scores(overall=4)])
        fractions = histogram_fractions(hist)
        assert hist["overall"][5] == 2
        assert hist["overall"][4] == 1
        assert fractions["overall"][5] == pytest.approx(2 / 3)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            score_distribution([])

    def test_counts_match_bruteforce_and_conserve(self):
        rng = random.Random(13)
        sample = [
            scores(
                overall=rng.uniform(1, 5),
                relevance=rng.randint(1, 5),
                completeness=rng.randint(1, 5),
                clarity=rng.randint(1, 5),
                accuracy=rng.randint(1, 5),
                actionability=rng.randint(1, 5),
            )
            for _ in range(500)
        ]
        hist = score_distribution(sample)
        for name in ("relevance", "completeness", "clarity", "accuracy", "actionability"):
            for bucket in range(1, 6):
                expected = sum(1 for s in sample if s.dimension(name) == bucket)
                assert hist[name][bucket] == expected
            assert sum(hist[name].values()) == len(sample)
        fractions = histogram_fractions(hist)
        for name in fractions:
            assert sum(fractions[name].values()) == pytest.approx(1.0, abs=1e-9)


class TestSimilarityReport:
    def test_real_vs_itself_is_one(self):
        backend = HashEmbeddingBackend(dim=16, seed=4)
        real = [f"real question {i}" for i in range(5)]
        report = imitation_similarity_report(real, [f"synthetic {i}" for i in range(5)], real, backend)
        assert report["sim_imitation"] == pytest.approx(1.0, abs=1e-9)
        assert report["closer"] == "imitation"

    def test_matches_centroid_oracle(self):
        import math

        backend = HashEmbeddingBackend(dim=8, seed=9)
        imitation = [f"imit {i}" for i in range(6)]
        synthesis = [f"synth {i}" for i in range(6)]
        real = [f"real {i}" for i in range(6)]
        report = imitation_similarity_report(imitation, synthesis, real, backend)

        def oracle(qs_a: list[str], qs_b: list[str]) -> float:
            va = backend.embed(qs_a)
            vb = backend.embed(qs_b)
            mean_a = [sum(v[i] for v in va) / len(va) for i in range(8)]
            mean_b = [sum(v[i] for v in vb) / len(vb) for i in range(8)]
            na = math.sqrt(sum(x * x for x in mean_a))
            nb = math.sqrt(sum(x * x for x in mean_b))
            return sum(x * y for x, y in zip(mean_a, mean_b)) / (na * nb)

        assert report["sim_imitation"] == pytest.approx(oracle(imitation, real), abs=1e-9)
        assert report["sim_synthesis"] == pytest.approx(oracle(synthesis, real), abs=1e-9)

    def test_empty_set_rejected(self):
        backend = HashEmbeddingBackend(dim=8)
        with pytest.raises(ValueError, match="synthesis"):
            imitation_similarity_report(["a"], [], ["b"], backend)


class TestCsvRows:
    def test_dimension_summary(self):
        judged = []
        from convoforge.evaluation import JudgedAnswer

        judged.append(JudgedAnswer("q", "a", ("c1",), scores(overall=4.0, relevance=3)))
        judged.append(JudgedAnswer("q2", "a2", ("c2",), scores(overall=5.0, relevance=5)))
        rows = dimension_summary_rows(judged)
        assert rows[0] == ["dimension", "mean", "count"]
        relevance_row = [r for r in rows if r[0] == "relevance"][0]
        assert relevance_row[1] == "4.0000"

    def test_histogram_rows_cover_all_buckets(self):
        hist = score_distribution([scores()])
        rows = histogram_rows(hist)
        assert len(rows) == 1 + 6 * 5
