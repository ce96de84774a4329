from __future__ import annotations

from pathlib import Path

import pytest

REPO_ROOT = Path(__file__).resolve().parent.parent

DOCS = {
    "budgets.md": (
        "Daily budgets cap average spend per campaign per day. The platform may spend up to "
        "twice the daily budget on strong days but never more than the monthly cap. Budgets "
        "can be edited from the campaign settings page and changes apply within minutes. "
        "Budget-limited campaigns lose impression share in the afternoon hours."
    ),
    "review.md": (
        "Every new or edited ad is reviewed against policy before serving. Most reviews "
        "finish within one business day. Disapproved ads show the violated policy and stop "
        "serving until fixed and resubmitted. Appeals are answered within two business days."
    ),
    "tracking.md": (
        "Conversion tracking requires the site tag on every page. Create a conversion action "
        "and verify the tag with the built-in checker. Conversions attribute to the last ad "
        "click with a thirty day window. A sudden drop to zero usually means the tag was "
        "removed during a site redesign."
    ),
    "invoices.md": (
        "Invoices are issued monthly and whenever spend reaches the billing threshold. Each "
        "invoice lists spend per campaign and per day plus applied credits and taxes. "
        "Documents appear under the billing page within two days of the charge. Disputes can "
        "be raised from the invoice row within sixty days."
    ),
}

QUESTIONS = [
    "How do I change my daily budget?",
    "Why is my ad not showing?",
    "How long does ad review take?",
    "How do I appeal a disapproval?",
    "How do I set up conversion tracking?",
    "Why did conversions drop to zero?",
    "Where can I download my invoice?",
    "When will I be charged?",
    "How do I dispute a charge?",
    "What does budget-limited mean?",
    "Can I raise my budget today?",
    "How do I verify the site tag?",
    "What is on each invoice?",
    "How fast do budget changes apply?",
    "Who reviews my ads?",
    "What happens after a disapproval?",
]


@pytest.fixture
def tiny_corpus(tmp_path: Path) -> dict:
    corpus_dir = tmp_path / "corpus"
    corpus_dir.mkdir()
    for name, text in DOCS.items():
        (corpus_dir / name).write_text(text, encoding="utf-8")
    questions = tmp_path / "questions.txt"
    questions.write_text("\n".join(QUESTIONS) + "\n", encoding="utf-8")
    return {
        "corpus_dir": corpus_dir,
        "questions": questions,
        "out": tmp_path / "out",
    }


def config_overrides(tiny_corpus: dict, **extra) -> dict:
    base = {
        "seed": 7,
        "corpus": {
            "input": str(tiny_corpus["corpus_dir"]),
            "user_questions": str(tiny_corpus["questions"]),
        },
        "chunking": {"size": 200, "overlap": 20},
        "retrieval": {"embedding": {"dim": 24}},
        "seeds": {"n_exemplars": 8},
        "concurrency": {"jobs": 2},
        "output": {"dir": str(tiny_corpus["out"])},
    }
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key] = {**base[key], **value}
        else:
            base[key] = value
    return base
