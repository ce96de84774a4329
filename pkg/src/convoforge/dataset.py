"""Training-triplet assembly, dataset emission, and corpus statistics.

An emitted record is {id, instruction, output, loss_mask, meta}. The
canonical training text is ``instruction + RESPONSE_SEPARATOR + output``
and ``loss_mask.output_start_char`` is the character offset where the
output begins in that text, so trainers can supervise output tokens only
without re-deriving any layout.
"""

from __future__ import annotations

import re
import statistics
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from ._io import read_jsonl, sha256_text, write_jsonl
from .corpus import Chunk
from .errors import RetrievalError, StatsError
from .formatting import render_references
from .retrieval import VectorIndex

RESPONSE_SEPARATOR = "\n\n### Response:\n"
VARIANTS = ("rag", "plain")

_LEXICON_PATH = Path(__file__).parent / "lexicon" / "verbs.txt"

# Function words skipped when hunting for a verb's object.
_FUNCTION_WORDS = frozenset(
    "a an the my our your their his her its this that these those some any each "
    "every all both few many much more most other another such no not only own "
    "same so than too very s t can will just don should now of in on at to for "
    "with by from up down out over under again further then once here there "
    "when where why how what which who whom i you he she it we they me him them "
    "us am is are was were be been being do does did doing would could and or "
    "new best first last".split()
)

_WH_STARTERS = frozenset(
    "how what where when why which who whats can could do does should would is "
    "are will may might must im i".split()
)


@dataclass(frozen=True)
class TripletDoc:
    chunk_ref: str
    text: str


@dataclass(frozen=True)
class InstructionTriplet:
    question: str
    docs: tuple[TripletDoc, ...]
    answer: str
    source: str  # "seed" or "conversation_turn_<k>"
    overall_score: float
    trace_ref: str


@dataclass(frozen=True)
class DatasetStats:
    num_examples: int
    instr_len_mean: float
    instr_len_std: float
    out_len_mean: float
    out_len_std: float
    per_source: dict[str, "SourceStats"]


@dataclass(frozen=True)
class SourceStats:
    num_examples: int
    instr_len_mean: float
    instr_len_std: float
    out_len_mean: float
    out_len_std: float


def normalize_question(question: str) -> str:
    """Key used for near-duplicate collapsing."""
    text = question.strip().lower()
    text = re.sub(r"\s+", " ", text)
    return text.rstrip(" .!?")


def source_from_context_ref(context_ref: str) -> str:
    """Map a trace context ref like "conv-0007#turn2" to a source tag.

    Turn 1 carries the seed question verbatim, so it is tagged "seed";
    later turns are tagged by their turn number.
    """
    match = re.search(r"#turn(\d+)$", context_ref)
    turn = int(match.group(1)) if match else 1
    return "seed" if turn == 1 else f"conversation_turn_{turn}"


def build_triplets(
    refined_records: Sequence[dict],
    index: VectorIndex,
    chunks_by_id: dict[str, Chunk],
    k: int = 3,
) -> tuple[list[InstructionTriplet], list[dict]]:
    """Turn selected refinement records into (question, docs, answer) triplets.

    Documents are re-retrieved at emission time so d is exactly the current
    top-k for the question. Near-duplicate questions (normalized-text
    equality) collapse to the higher-scoring record; the loser and any
    retrieval failures land in the audit list.
    """
    audit: list[dict] = []
    best_by_key: dict[str, dict] = {}
    order: list[str] = []
    for record in refined_records:
        key = normalize_question(record["question"])
        incumbent = best_by_key.get(key)
        if incumbent is None:
            best_by_key[key] = record
            order.append(key)
        elif record["overall_score"] > incumbent["overall_score"]:
            audit.append({
                "question": incumbent["question"],
                "scores": {"overall": incumbent["overall_score"]},
                "reason": "near-duplicate question, lower score",
            })
            best_by_key[key] = record
        else:
            audit.append({
                "question": record["question"],
                "scores": {"overall": record["overall_score"]},
                "reason": "near-duplicate question, lower score",
            })

    triplets: list[InstructionTriplet] = []
    for key in order:
        record = best_by_key[key]
        question = record["question"]
        try:
            retrieved = index.top_k(question, k=k)
        except RetrievalError as exc:
            audit.append({
                "question": question,
                "scores": {"overall": record["overall_score"]},
                "reason": f"retrieval failed: {exc}",
            })
            continue
        docs = tuple(
            TripletDoc(chunk_ref=r.chunk_ref, text=chunks_by_id[r.chunk_ref].text)
            for r in retrieved
        )
        triplets.append(
            InstructionTriplet(
                question=question,
                docs=docs,
                answer=record["answer"],
                source=source_from_context_ref(record["conversation_ref"]),
                overall_score=record["overall_score"],
                trace_ref=record["conversation_ref"],
            )
        )
    return triplets, audit


def render_instruction(triplet: InstructionTriplet, variant: str) -> str:
    """rag embeds the retrieved documents ahead of the question; plain drops them."""
    if variant == "rag":
        return render_references([d.text for d in triplet.docs]) + "\n\n" + triplet.question
    if variant == "plain":
        return triplet.question
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def training_text(instruction: str, output: str) -> tuple[str, int]:
    """Canonical concatenation and the character offset of the output span."""
    text = instruction + RESPONSE_SEPARATOR + output
    return text, len(instruction) + len(RESPONSE_SEPARATOR)


def triplet_to_record(triplet: InstructionTriplet, variant: str) -> dict:
    instruction = render_instruction(triplet, variant)
    _, output_start = training_text(instruction, triplet.answer)
    return {
        "id": "ex-" + sha256_text(f"{variant}\n{instruction}\n{triplet.answer}")[:16],
        "instruction": instruction,
        "output": triplet.answer,
        "loss_mask": {"output_start_char": output_start},
        "meta": {
            "source": triplet.source,
            "overall_score": triplet.overall_score,
            "trace_ref": triplet.trace_ref,
            "question": triplet.question,
            "docs": [{"chunk_ref": d.chunk_ref, "text": d.text} for d in triplet.docs],
        },
    }


def triplet_from_record(record: dict) -> InstructionTriplet:
    meta = record["meta"]
    return InstructionTriplet(
        question=meta["question"],
        docs=tuple(TripletDoc(d["chunk_ref"], d["text"]) for d in meta["docs"]),
        answer=record["output"],
        source=meta["source"],
        overall_score=meta["overall_score"],
        trace_ref=meta["trace_ref"],
    )


def emit_dataset(triplets: Sequence[InstructionTriplet], variant: str, path: Path | str) -> Path:
    """Write the records file for one variant, ending in a checksum trailer."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if not triplets:
        raise ValueError("refusing to emit an empty dataset")
    return write_jsonl(path, (triplet_to_record(t, variant) for t in triplets), checksum_trailer=True)


def load_dataset(path: Path | str) -> list[dict]:
    return list(read_jsonl(path, verify_checksum=True))


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


def _token_len(text: str) -> int:
    return len(text.split())


def _length_stats(lengths: Sequence[int]) -> tuple[float, float]:
    return statistics.fmean(lengths), statistics.pstdev(lengths)


def stats(records_path: Path | str) -> DatasetStats:
    """Whitespace-token length statistics, population std, per-source split."""
    records = list(read_jsonl(records_path))
    if not records:
        raise StatsError(f"records file {records_path} is empty")
    instr = [_token_len(r["instruction"]) for r in records]
    out = [_token_len(r["output"]) for r in records]
    instr_mean, instr_std = _length_stats(instr)
    out_mean, out_std = _length_stats(out)

    per_source: dict[str, SourceStats] = {}
    by_source: dict[str, list[dict]] = {}
    for record in records:
        by_source.setdefault(record["meta"].get("source", "unknown"), []).append(record)
    for source in sorted(by_source):
        group = by_source[source]
        gi = [_token_len(r["instruction"]) for r in group]
        go = [_token_len(r["output"]) for r in group]
        gim, gis = _length_stats(gi)
        gom, gos = _length_stats(go)
        per_source[source] = SourceStats(len(group), gim, gis, gom, gos)

    return DatasetStats(
        num_examples=len(records),
        instr_len_mean=instr_mean,
        instr_len_std=instr_std,
        out_len_mean=out_mean,
        out_len_std=out_std,
        per_source=per_source,
    )


def format_mean_std(mean: float, std: float) -> str:
    """Report cell in the conventional "18±6" shape (integer rounding)."""
    return f"{round(mean)}±{round(std)}"


def render_stats_table(dataset_stats: DatasetStats, name: str = "dataset") -> str:
    """Aligned text table: # Examples / Instruction Length / Output Length."""
    header = ("", "# Examples", "Instruction Length", "Output Length")
    rows = [header, (
        name,
        str(dataset_stats.num_examples),
        format_mean_std(dataset_stats.instr_len_mean, dataset_stats.instr_len_std),
        format_mean_std(dataset_stats.out_len_mean, dataset_stats.out_len_std),
    )]
    for source, group in dataset_stats.per_source.items():
        rows.append((
            f"  {source}",
            str(group.num_examples),
            format_mean_std(group.instr_len_mean, group.instr_len_std),
            format_mean_std(group.out_len_mean, group.out_len_std),
        ))
    widths = [max(len(row[col]) for row in rows) for col in range(len(header))]
    return "\n".join("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip() for row in rows)


def stats_to_csv_rows(dataset_stats: DatasetStats, name: str = "dataset") -> list[list[str]]:
    rows = [["name", "num_examples", "instr_len_mean", "instr_len_std", "out_len_mean", "out_len_std"]]
    rows.append([
        name, str(dataset_stats.num_examples),
        f"{dataset_stats.instr_len_mean:.6f}", f"{dataset_stats.instr_len_std:.6f}",
        f"{dataset_stats.out_len_mean:.6f}", f"{dataset_stats.out_len_std:.6f}",
    ])
    for source, group in dataset_stats.per_source.items():
        rows.append([
            source, str(group.num_examples),
            f"{group.instr_len_mean:.6f}", f"{group.instr_len_std:.6f}",
            f"{group.out_len_mean:.6f}", f"{group.out_len_std:.6f}",
        ])
    return rows


# ---------------------------------------------------------------------------
# Leading verb / object report
# ---------------------------------------------------------------------------


def load_verb_lexicon() -> frozenset[str]:
    return frozenset(
        line.strip() for line in _LEXICON_PATH.read_text(encoding="utf-8").splitlines() if line.strip()
    )


def extract_verb_object(question: str, lexicon: frozenset[str]) -> tuple[str, str] | None:
    """Heuristic (verb, object) extraction.

    A lexicon verb counts at sentence-initial position, or anywhere in the
    first few tokens after a wh/aux opener ("how do I create ..."). The
    object is the first following content word. No dependency parsing; this
    is a documented approximation.
    """
    tokens = [t for t in re.findall(r"[a-z]+(?:'[a-z]+)?", question.lower())]
    if not tokens:
        return None
    verb_index: int | None = None
    if tokens[0] in lexicon:
        verb_index = 0
    elif tokens[0] in _WH_STARTERS:
        for i in range(1, min(len(tokens), 8)):
            if tokens[i] in _FUNCTION_WORDS:
                continue
            if tokens[i] in lexicon:
                verb_index = i
            break
    if verb_index is None:
        return None
    for token in tokens[verb_index + 1:]:
        if token in _FUNCTION_WORDS or token in lexicon:
            continue
        if len(token) >= 2:
            return tokens[verb_index], token
    return None


def verb_object_report(
    questions: Iterable[str],
    top_verbs: int = 10,
    top_objects: int = 3,
) -> tuple[list[tuple[str, str, int]], int]:
    """Ranked (verb, object, count) table plus the unmatched "other" tally."""
    questions = list(questions)
    if not questions:
        raise ValueError("verb_object_report needs at least one question")
    lexicon = load_verb_lexicon()
    counts: Counter[tuple[str, str]] = Counter()
    other = 0
    for question in questions:
        extracted = extract_verb_object(question, lexicon)
        if extracted is None:
            other += 1
        else:
            counts[extracted] += 1

    verb_totals: Counter[str] = Counter()
    for (verb, _), n in counts.items():
        verb_totals[verb] += n
    ranked: list[tuple[str, str, int]] = []
    for verb, _ in verb_totals.most_common(top_verbs):
        objects = [(obj, n) for (v, obj), n in counts.items() if v == verb]
        objects.sort(key=lambda item: (-item[1], item[0]))
        for obj, n in objects[:top_objects]:
            ranked.append((verb, obj, n))
    return ranked, other
