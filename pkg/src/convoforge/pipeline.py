"""File-based pipeline stages with run manifests and checksum-skip resume.

Each stage reads only prior-stage files plus the config, writes its
artifacts under ``out/<run_id>/``, and records a manifest (config
fingerprint, input/output checksums, item counts, timing). Re-running a
stage whose fingerprint and checksums all match is a no-op, so a finished
run is skipped wholesale; deleting one stage's outputs reproduces them
byte-identically under mock backends.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

from . import conversation as conv
from . import corpus as corpus_mod
from . import dataset as dataset_mod
from . import evaluation as eval_mod
from . import refinement as refine_mod
from . import seeds as seeds_mod
from ._io import load_jsonl, sha256_file, write_jsonl
from .config import (
    PipelineConfig,
    build_embedding_backend,
    build_generation_gateway,
    build_judge_gateway,
)
from .errors import StageError
from .formatting import render_history
from .gateway import validate_templates
from .retrieval import VectorIndex

STAGE_ORDER = ("ingest", "seed", "converse", "refine", "emit", "stats", "evaluate")

# file name -> producing subcommand, for actionable missing-input errors
_PRODUCERS = {
    "documents.jsonl": "ingest",
    "chunks.jsonl": "ingest",
    "vectors.bin": "ingest",
    "exemplars.jsonl": "seed",
    "seeds.jsonl": "seed",
    "seed_failures.jsonl": "seed",
    "conversations.jsonl": "converse",
    "refined.jsonl": "refine",
    "traces.jsonl": "refine",
    "audit.jsonl": "refine",
    "train_rag.jsonl": "emit",
    "train_plain.jsonl": "emit",
}


@dataclass(frozen=True)
class RunPaths:
    root: Path

    @property
    def chunks(self) -> Path:
        return self.root / "chunks"

    @property
    def seeds(self) -> Path:
        return self.root / "seeds"

    @property
    def conversations(self) -> Path:
        return self.root / "conversations"

    @property
    def refined(self) -> Path:
        return self.root / "refined"

    @property
    def dataset(self) -> Path:
        return self.root / "dataset"

    @property
    def eval(self) -> Path:
        return self.root / "eval"

    @property
    def manifest(self) -> Path:
        return self.root / "manifest"


@dataclass(frozen=True)
class StageResult:
    stage: str
    skipped: bool
    counts: dict
    duration_s: float


def _write_csv(path: Path, rows: Iterable[Sequence[str]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    return path


class Pipeline:
    """Owns one run directory and lazily built backends."""

    def __init__(self, config: PipelineConfig):
        validate_templates()
        self.config = config
        self.paths = RunPaths(root=config.output_dir / config.run_id)
        self._embedding = None
        self._gateway = None
        self._judge_gateway = None

    # -- lazy shared dependencies ------------------------------------------

    @property
    def embedding(self):
        if self._embedding is None:
            self._embedding = build_embedding_backend(self.config)
        return self._embedding

    @property
    def gateway(self):
        if self._gateway is None:
            self._gateway = build_generation_gateway(self.config)
        return self._gateway

    @property
    def judge_gateway(self):
        if self._judge_gateway is None:
            self._judge_gateway = build_judge_gateway(self.config)
        return self._judge_gateway

    def _load_index(self) -> tuple[VectorIndex, dict]:
        chunks = corpus_mod.read_chunk_manifest(self.paths.chunks / "chunks.jsonl")
        index = VectorIndex.load(self.paths.chunks / "vectors.bin", self.embedding)
        return index, {c.chunk_id: c for c in chunks}

    def _map(self, fn: Callable, items: Sequence) -> list:
        """Run independent work items under the jobs bound, keeping order."""
        if self.config.jobs <= 1 or len(items) <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.config.jobs) as pool:
            return list(pool.map(fn, items))

    # -- manifest machinery -------------------------------------------------

    def _rel(self, path: Path) -> str:
        try:
            return path.resolve().relative_to(self.paths.root.resolve()).as_posix()
        except ValueError:
            return str(path)

    def _hash_files(self, paths: Sequence[Path]) -> dict[str, str]:
        return {self._rel(p): sha256_file(p) for p in sorted(paths)}

    def _input_files(self, declared: Sequence[Path]) -> list[Path]:
        """Expand directories (corpus input) into their document files."""
        expanded: list[Path] = []
        for path in declared:
            if path.is_dir():
                expanded.extend(sorted(p for p in path.iterdir() if p.suffix.lower() in (".txt", ".md")))
            else:
                expanded.append(path)
        return expanded

    def _check_inputs(self, declared: Sequence[Path]) -> None:
        for path in declared:
            if not path.exists():
                producer = _PRODUCERS.get(path.name)
                hint = f"; run `convoforge {producer}` first" if producer else ""
                raise StageError(f"missing input {path}{hint}")

    def _drain_call_logs(self) -> None:
        records = []
        for gw in (self._gateway, self._judge_gateway):
            if gw is not None:
                records.extend(gw.drain_log())
        if not records:
            return
        self.paths.manifest.mkdir(parents=True, exist_ok=True)
        with open(self.paths.manifest / "call_log.jsonl", "a", encoding="utf-8") as fh:
            for r in records:
                fh.write(json.dumps(r.__dict__, sort_keys=True) + "\n")

    def _run_stage(
        self,
        name: str,
        inputs: Sequence[Path],
        outputs: Sequence[Path],
        fn: Callable[[], dict],
        force: bool = False,
    ) -> StageResult:
        self._check_inputs(inputs)
        input_files = self._input_files(inputs)
        fingerprint = self.config.fingerprint()
        manifest_path = self.paths.manifest / f"{name}.json"

        current_inputs = self._hash_files(input_files)
        if not force and manifest_path.is_file():
            recorded = json.loads(manifest_path.read_text(encoding="utf-8"))
            outputs_fresh = all(p.exists() for p in outputs) and (
                self._hash_files(list(outputs)) == recorded.get("outputs")
            )
            if (
                recorded.get("config_fingerprint") == fingerprint
                and recorded.get("inputs") == current_inputs
                and outputs_fresh
            ):
                return StageResult(stage=name, skipped=True, counts=recorded.get("counts", {}), duration_s=0.0)

        start = time.perf_counter()
        counts = fn()
        duration = time.perf_counter() - start
        self._drain_call_logs()

        missing = [p for p in outputs if not p.exists()]
        if missing:
            raise StageError(f"stage {name} did not produce: {missing}")
        manifest = {
            "stage": name,
            "run_id": self.config.run_id,
            "config_fingerprint": fingerprint,
            "inputs": current_inputs,
            "outputs": self._hash_files(list(outputs)),
            "counts": counts,
            "duration_s": duration,
        }
        self.paths.manifest.mkdir(parents=True, exist_ok=True)
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        config_echo = self.paths.manifest / "config.json"
        config_echo.write_text(json.dumps(self.config.echo(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return StageResult(stage=name, skipped=False, counts=counts, duration_s=duration)

    # -- stages --------------------------------------------------------------

    def ingest(self, force: bool = False) -> StageResult:
        cfg = self.config
        source = Path(cfg["corpus"]["input"])
        out = self.paths.chunks
        outputs = [out / "documents.jsonl", out / "chunks.jsonl", out / "vectors.bin",
                   out / "ingest_warnings.jsonl"]

        def work() -> dict:
            raws = corpus_mod.load_raw_documents(source)
            result = corpus_mod.ingest(raws)
            chunks = corpus_mod.chunk_corpus(
                result.documents, size=cfg["chunking"]["size"], overlap=cfg["chunking"]["overlap"]
            )
            corpus_mod.write_documents_file(result.documents, out / "documents.jsonl")
            corpus_mod.write_chunk_manifest(chunks, out / "chunks.jsonl")
            write_jsonl(out / "ingest_warnings.jsonl",
                        ({"source_id": w.source_id, "reason": w.reason} for w in result.warnings))
            index = VectorIndex.build([c.chunk_id for c in chunks], [c.text for c in chunks], self.embedding)
            index.save(out / "vectors.bin")
            return {"documents": len(result.documents), "chunks": len(chunks),
                    "warnings": len(result.warnings)}

        return self._run_stage("ingest", [source], outputs, work, force=force)

    def seed(self, force: bool = False) -> StageResult:
        cfg = self.config
        questions_path = Path(cfg["corpus"]["user_questions"])
        out = self.paths.seeds
        inputs = [self.paths.chunks / "chunks.jsonl", questions_path]
        outputs = [out / "exemplars.jsonl", out / "seeds.jsonl", out / "seed_failures.jsonl"]

        def work() -> dict:
            chunks = corpus_mod.read_chunk_manifest(self.paths.chunks / "chunks.jsonl")
            questions = seeds_mod.load_user_questions(questions_path)
            exemplars = seeds_mod.sample_exemplars(
                questions, n=cfg["seeds"]["n_exemplars"], seed=cfg.seed
            )
            write_jsonl(out / "exemplars.jsonl",
                        ({"question": e.question, "sampled_at": e.sampled_at} for e in exemplars))
            params = cfg.generation_params()

            def per_chunk(chunk):
                return seeds_mod.generate_seed_qas(
                    chunk, exemplars, self.gateway, params,
                    grounding_min_overlap=cfg["seeds"]["grounding_min_overlap"],
                )

            results = self._map(per_chunk, chunks)
            seed_rows, failures = [], []
            for seed_list, failure in results:
                seed_rows.extend(
                    {"question": s.question, "answer": s.answer, "chunk_id": s.chunk_id,
                     "exemplar_set_hash": s.exemplar_set_hash}
                    for s in seed_list
                )
                if failure is not None:
                    failures.append({"chunk_id": failure.chunk_id, "reason": failure.reason})
            write_jsonl(out / "seeds.jsonl", seed_rows)
            write_jsonl(out / "seed_failures.jsonl", failures)
            return {"chunks": len(chunks), "seeds": len(seed_rows), "failures": len(failures)}

        return self._run_stage("seed", inputs, outputs, work, force=force)

    def converse(self, force: bool = False) -> StageResult:
        cfg = self.config
        out = self.paths.conversations
        inputs = [self.paths.seeds / "seeds.jsonl", self.paths.seeds / "exemplars.jsonl",
                  self.paths.chunks / "chunks.jsonl", self.paths.chunks / "vectors.bin"]
        outputs = [out / "conversations.jsonl"]

        def work() -> dict:
            index, chunks_by_id = self._load_index()
            exemplars = [
                seeds_mod.StyleExemplar(r["question"], r["sampled_at"])
                for r in load_jsonl(self.paths.seeds / "exemplars.jsonl")
            ]
            seed_rows = load_jsonl(self.paths.seeds / "seeds.jsonl")
            engine = conv.ConversationEngine(
                gateway=self.gateway,
                index=index,
                chunks_by_id=chunks_by_id,
                exemplars=exemplars,
                k=cfg["retrieval"]["k"],
                n_suggestions=cfg["conversation"]["n_suggestions"],
                max_turns=cfg["conversation"]["max_turns"],
                assistant_params=cfg.generation_params(),
                inquirer_params=cfg.generation_params(),
            )

            def per_seed(item):
                row_index, row = item
                seed = seeds_mod.SeedQA(
                    question=row["question"], answer=row["answer"],
                    chunk_id=row["chunk_id"], exemplar_set_hash=row["exemplar_set_hash"],
                )
                return engine.run(seed, seed_ref=f"seed-{row_index:05d}")

            conversations = self._map(per_seed, list(enumerate(seed_rows)))
            write_jsonl(out / "conversations.jsonl",
                        (conv.conversation_to_record(c) for c in conversations))
            terminations: dict[str, int] = {}
            for c in conversations:
                terminations[c.termination] = terminations.get(c.termination, 0) + 1
            return {"conversations": len(conversations),
                    "turns": sum(len(c.turns) for c in conversations),
                    **{f"termination_{k}": v for k, v in sorted(terminations.items())}}

        return self._run_stage("converse", inputs, outputs, work, force=force)

    def refine(self, force: bool = False) -> StageResult:
        cfg = self.config
        out = self.paths.refined
        inputs = [self.paths.conversations / "conversations.jsonl",
                  self.paths.chunks / "chunks.jsonl", self.paths.chunks / "vectors.bin"]
        outputs = [out / "refined.jsonl", out / "traces.jsonl", out / "audit.jsonl"]

        def work() -> dict:
            index, chunks_by_id = self._load_index()
            conversations = [conv.conversation_from_record(r)
                             for r in load_jsonl(self.paths.conversations / "conversations.jsonl")]
            k = cfg["retrieval"]["k"]
            refiner_params = cfg.generation_params()
            judge_params = cfg.judge_params()

            work_items = []
            for conv_index, conversation in enumerate(conversations):
                context_text = render_history([(t.question, t.answer) for t in conversation.turns])
                for turn in conversation.turns:
                    work_items.append((conv_index, conversation, context_text, turn))

            def per_turn(item):
                conv_index, conversation, context_text, turn = item
                docs = index.top_k(turn.question, k=k)
                doc_texts = [chunks_by_id[d.chunk_ref].text for d in docs]
                return refine_mod.refine_turn(
                    question=turn.question,
                    answer=turn.answer,
                    conversation_text=context_text,
                    doc_texts=doc_texts,
                    gateway=self.gateway,
                    context_ref=f"conv-{conv_index:05d}#turn{turn.turn_index}",
                    rounds=cfg["cdr"]["rounds"],
                    threshold=cfg["cdr"]["threshold"],
                    refiner_params=refiner_params,
                    judge_params=judge_params,
                )

            traces = self._map(per_turn, work_items)
            refined_rows, audit_rows = [], []
            for trace in traces:
                if trace.selected is not None:
                    score = trace.scores[trace.selected]
                    assert score is not None
                    refined_rows.append({
                        "question": trace.question,
                        "answer": trace.candidates[trace.selected],
                        "overall_score": score.overall,
                        "candidate_count": len(trace.candidates),
                        "conversation_ref": trace.context_ref,
                    })
                else:
                    audit_rows.append({
                        "question": trace.question,
                        "scores": [s.overall if s else None for s in trace.scores],
                        "reason": "no candidate above threshold",
                    })
            write_jsonl(out / "refined.jsonl", refined_rows)
            write_jsonl(out / "traces.jsonl", (refine_mod.trace_to_record(t) for t in traces))
            write_jsonl(out / "audit.jsonl", audit_rows)
            return {"turns": len(traces), "selected": len(refined_rows), "dropped": len(audit_rows)}

        return self._run_stage("refine", inputs, outputs, work, force=force)

    def emit(self, force: bool = False) -> StageResult:
        cfg = self.config
        out = self.paths.dataset
        inputs = [self.paths.refined / "refined.jsonl",
                  self.paths.chunks / "chunks.jsonl", self.paths.chunks / "vectors.bin"]
        outputs = [out / "train_rag.jsonl", out / "train_plain.jsonl", out / "dedup_audit.jsonl"]

        def work() -> dict:
            index, chunks_by_id = self._load_index()
            refined_rows = load_jsonl(self.paths.refined / "refined.jsonl")
            if not refined_rows:
                raise StageError("no refined records to emit; refinement dropped everything")
            triplets, audit = dataset_mod.build_triplets(
                refined_rows, index, chunks_by_id, k=cfg["retrieval"]["k"]
            )
            dataset_mod.emit_dataset(triplets, "rag", out / "train_rag.jsonl")
            dataset_mod.emit_dataset(triplets, "plain", out / "train_plain.jsonl")
            write_jsonl(out / "dedup_audit.jsonl", audit)
            return {"triplets": len(triplets), "audited": len(audit)}

        return self._run_stage("emit", inputs, outputs, work, force=force)

    def stats(self, force: bool = False) -> StageResult:
        out = self.paths.dataset
        inputs = [out / "train_rag.jsonl", out / "train_plain.jsonl"]
        outputs = [out / "stats_rag.csv", out / "stats_plain.csv", out / "stats_report.txt",
                   out / "verb_object.csv"]

        def work() -> dict:
            tables = []
            for variant in ("rag", "plain"):
                variant_stats = dataset_mod.stats(out / f"train_{variant}.jsonl")
                _write_csv(out / f"stats_{variant}.csv",
                           dataset_mod.stats_to_csv_rows(variant_stats, name=variant))
                tables.append(dataset_mod.render_stats_table(variant_stats, name=variant))
            (out / "stats_report.txt").write_text("\n\n".join(tables) + "\n", encoding="utf-8")

            records = dataset_mod.load_dataset(out / "train_rag.jsonl")
            questions = [r["meta"]["question"] for r in records]
            ranked, other = dataset_mod.verb_object_report(questions)
            rows = [["verb", "object", "count"]]
            rows += [[v, o, str(n)] for v, o, n in ranked]
            rows.append(["(other)", "", str(other)])
            _write_csv(out / "verb_object.csv", rows)
            return {"examples": len(records), "verb_object_rows": len(ranked), "unmatched": other}

        return self._run_stage("stats", inputs, outputs, work, force=force)

    def evaluate(self, force: bool = False) -> StageResult:
        cfg = self.config
        out = self.paths.eval
        inputs = [self.paths.dataset / "train_rag.jsonl", self.paths.refined / "traces.jsonl"]
        outputs = [out / "judged.jsonl", out / "dimension_summary.csv", out / "histogram.csv",
                   out / "refined_vs_original.csv"]

        def work() -> dict:
            records = dataset_mod.load_dataset(self.paths.dataset / "train_rag.jsonl")
            judge_params = cfg.judge_params()

            def per_record(record):
                meta = record["meta"]
                doc_texts = [d["text"] for d in meta["docs"]]
                try:
                    scores = eval_mod.judge_answer(
                        meta["question"], record["output"], doc_texts, self.judge_gateway, judge_params
                    )
                except refine_mod.AssessmentError:
                    return None
                return eval_mod.JudgedAnswer(
                    question=meta["question"], answer=record["output"],
                    doc_refs=tuple(d["chunk_ref"] for d in meta["docs"]), scores=scores,
                )

            judged = [j for j in self._map(per_record, records) if j is not None]
            write_jsonl(out / "judged.jsonl", (
                {
                    "question": j.question,
                    "answer": j.answer,
                    "doc_refs": list(j.doc_refs),
                    "scores": refine_mod.scores_to_record(j.scores),
                }
                for j in judged
            ))
            _write_csv(out / "dimension_summary.csv", eval_mod.dimension_summary_rows(judged))
            if judged:
                histogram = eval_mod.score_distribution([j.scores for j in judged])
                _write_csv(out / "histogram.csv", eval_mod.histogram_rows(histogram))
            else:
                _write_csv(out / "histogram.csv", [["dimension", "score", "count", "fraction"]])

            traces = [refine_mod.trace_from_record(r)
                      for r in load_jsonl(self.paths.refined / "traces.jsonl")]
            paired = [
                (t.scores[0].overall, t.scores[t.selected].overall)  # type: ignore[union-attr]
                for t in traces
                if t.selected is not None and t.scores[0] is not None and t.scores[t.selected] is not None
            ]
            rows = [["metric", "value"]]
            if paired:
                mean_original = sum(p[0] for p in paired) / len(paired)
                mean_selected = sum(p[1] for p in paired) / len(paired)
                rows += [
                    ["pairs", str(len(paired))],
                    ["mean_overall_original", f"{mean_original:.4f}"],
                    ["mean_overall_selected", f"{mean_selected:.4f}"],
                    ["delta", f"{mean_selected - mean_original:.4f}"],
                ]
            _write_csv(out / "refined_vs_original.csv", rows)
            return {"judged": len(judged), "failed": len(records) - len(judged),
                    "comparison_pairs": len(paired)}

        return self._run_stage("evaluate", inputs, outputs, work, force=force)

    def run_all(self, force: bool = False) -> list[StageResult]:
        results = [self.ingest(force=force)]
        results.append(self.seed(force=force))
        results.append(self.converse(force=force))
        results.append(self.refine(force=force))
        results.append(self.emit(force=force))
        results.append(self.stats(force=force))
        results.append(self.evaluate(force=force))
        return results

    # -- ad-hoc evaluation over user-supplied files ---------------------------

    def evaluate_pairs_file(self, pairs_path: Path | str) -> Path:
        """WinRate over a records file {question, answer_A, answer_B}."""
        rows = load_jsonl(pairs_path)
        pairs = [(r["question"], r["answer_A"], r["answer_B"]) for r in rows]
        result = eval_mod.winrate(pairs, self.judge_gateway, self.config.judge_params())
        out = self.paths.eval / "winrate.csv"
        _write_csv(out, eval_mod.winrate_summary_rows(result))
        self._drain_call_logs()
        return out

    def evaluate_answers_file(self, answers_path: Path | str) -> Path:
        """Judge a records file {question, answer} against top-k docs."""
        index, chunks_by_id = self._load_index()
        rows = load_jsonl(answers_path)
        params = self.config.judge_params()
        k = self.config["retrieval"]["k"]

        def per_row(row):
            docs = index.top_k(row["question"], k=k)
            doc_texts = [chunks_by_id[d.chunk_ref].text for d in docs]
            try:
                scores = eval_mod.judge_answer(row["question"], row["answer"], doc_texts,
                                               self.judge_gateway, params)
            except refine_mod.AssessmentError:
                return None
            return eval_mod.JudgedAnswer(row["question"], row["answer"],
                                         tuple(d.chunk_ref for d in docs), scores)

        judged = [j for j in self._map(per_row, rows) if j is not None]
        out = self.paths.eval / "answers_summary.csv"
        _write_csv(out, eval_mod.dimension_summary_rows(judged))
        self._drain_call_logs()
        return out

    def similarity_report(self, imitation_path, synthesis_path, real_path) -> Path:
        report = eval_mod.imitation_similarity_report(
            seeds_mod.load_user_questions(imitation_path),
            seeds_mod.load_user_questions(synthesis_path),
            seeds_mod.load_user_questions(real_path),
            self.embedding,
        )
        out = self.paths.eval / "similarity.csv"
        _write_csv(out, [
            ["sim_imitation", "sim_synthesis", "closer"],
            [f"{report['sim_imitation']:.6f}", f"{report['sim_synthesis']:.6f}", report["closer"]],
        ])
        return out
