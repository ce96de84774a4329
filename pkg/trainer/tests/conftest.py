from __future__ import annotations

import hashlib
import json
import random
from pathlib import Path

RESPONSE_SEPARATOR = "\n\n### Response:\n"

ANSWER_PATTERNS = {
    "budget": "daily budgets cap average spend per campaign and changes apply within minutes",
    "invoice": "invoices are issued monthly and list spend per campaign per day with taxes",
    "review": "every edited ad is reviewed against policy within one business day before serving",
    "tracking": "conversion tracking needs the site tag installed on every page to report results",
}

DISTRACTORS = [
    "the weather panel shows sunrise and sunset hours for the selected region",
    "keyboard shortcuts open the navigation menu and toggle the compact layout",
]


def make_records(n: int, variant: str, seed: int = 99) -> list[dict]:
    """Synthetic records in the documented dataset-file schema.

    Both variants share the same answers per index; the rag variant embeds
    the answer verbatim among marked references, the plain variant carries
    the bare question.
    """
    rng = random.Random(seed)
    records = []
    for i in range(n):
        topic = rng.choice(sorted(ANSWER_PATTERNS))
        answer = ANSWER_PATTERNS[topic]
        question = "what should i know here ?"
        if variant == "rag":
            refs = [answer, rng.choice(DISTRACTORS), rng.choice(DISTRACTORS)]
            rng.shuffle(refs)
            instruction = (
                "\n\n".join(f"Reference [{j + 1}]:\n{text}" for j, text in enumerate(refs))
                + "\n\n" + question
            )
        else:
            instruction = question
        records.append({
            "id": f"ex-{i:04d}",
            "instruction": instruction,
            "output": answer,
            "loss_mask": {"output_start_char": len(instruction) + len(RESPONSE_SEPARATOR)},
            "meta": {"source": "seed"},
        })
    return records


def write_records(records: list[dict], path: Path) -> Path:
    hasher = hashlib.sha256()
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            line = json.dumps(record, ensure_ascii=False, sort_keys=True, separators=(",", ":")) + "\n"
            hasher.update(line.encode("utf-8"))
            fh.write(line)
        fh.write(f"#sha256:{hasher.hexdigest()}\n")
    return path
