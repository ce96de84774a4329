from __future__ import annotations

import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from convoforge.cli import main as cli_main
from convoforge.config import DEFAULTS, load_config
from convoforge.dataset import load_dataset
from convoforge.errors import ConfigError, StageError
from convoforge.pipeline import Pipeline
from tests.conftest import config_overrides


def make_pipeline(tiny_corpus, **extra) -> Pipeline:
    return Pipeline(load_config(overrides=config_overrides(tiny_corpus, **extra)))


class TestConfig:
    def test_defaults_match_reference_operating_point(self):
        config = load_config()
        assert config["chunking"] == {"size": 512, "overlap": 32}
        assert config["retrieval"]["k"] == 3
        assert config["seeds"]["n_exemplars"] == 15
        assert config["conversation"]["max_turns"] == 3
        assert config["cdr"] == {"rounds": 3, "threshold": 4.0}
        assert config["generation"]["temperature"] == 0.7

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="secret_knob"):
            load_config(overrides={"secret_knob": 1})

    def test_nested_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            load_config(overrides={"chunking": {"size": 512, "stride": 3}})

    def test_overlap_must_be_smaller_than_size(self):
        with pytest.raises(ConfigError, match="overlap"):
            load_config(overrides={"chunking": {"size": 100, "overlap": 100}})

    def test_yaml_file_merge(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text("seed: 42\ncdr:\n  threshold: 4.5\n", encoding="utf-8")
        config = load_config(path)
        assert config.seed == 42
        assert config["cdr"]["threshold"] == 4.5
        assert config["cdr"]["rounds"] == 3  # untouched default

    def test_run_id_ignores_output_dir(self):
        a = load_config(overrides={"output": {"dir": "x"}})
        b = load_config(overrides={"output": {"dir": "y"}})
        assert a.run_id == b.run_id

    def test_run_id_changes_with_seed(self):
        a = load_config(overrides={"seed": 1})
        b = load_config(overrides={"seed": 2})
        assert a.run_id != b.run_id

    def test_defaults_tree_is_schema_valid(self):
        load_config(overrides={})
        assert DEFAULTS["chunking"]["size"] == 512


class TestStages:
    def test_run_all_produces_full_artifact_tree(self, tiny_corpus):
        pipeline = make_pipeline(tiny_corpus)
        results = pipeline.run_all()
        assert [r.stage for r in results] == [
            "ingest", "seed", "converse", "refine", "emit", "stats", "evaluate",
        ]
        assert not any(r.skipped for r in results)
        root = pipeline.paths.root
        for rel in (
            "chunks/documents.jsonl", "chunks/chunks.jsonl", "chunks/vectors.bin",
            "seeds/seeds.jsonl", "seeds/exemplars.jsonl",
            "conversations/conversations.jsonl",
            "refined/refined.jsonl", "refined/traces.jsonl", "refined/audit.jsonl",
            "dataset/train_rag.jsonl", "dataset/train_plain.jsonl",
            "dataset/stats_report.txt", "dataset/verb_object.csv",
            "eval/judged.jsonl", "eval/dimension_summary.csv", "eval/histogram.csv",
            "manifest/ingest.json", "manifest/config.json",
        ):
            assert (root / rel).exists(), rel

    def test_second_run_is_full_checksum_skip(self, tiny_corpus):
        make_pipeline(tiny_corpus).run_all()
        results = make_pipeline(tiny_corpus).run_all()
        assert all(r.skipped for r in results)

    def test_stage_out_of_order_names_producer(self, tiny_corpus):
        pipeline = make_pipeline(tiny_corpus)
        with pytest.raises(StageError, match="run `convoforge ingest` first"):
            pipeline.seed()
        pipeline.ingest()
        pipeline.seed()
        pipeline.converse()
        with pytest.raises(StageError, match="run `convoforge refine` first"):
            pipeline.emit()

    def test_stage_isolation_reproduces_deleted_output(self, tiny_corpus):
        pipeline = make_pipeline(tiny_corpus)
        pipeline.run_all()
        target = pipeline.paths.conversations / "conversations.jsonl"
        original = target.read_bytes()
        target.unlink()
        fresh = make_pipeline(tiny_corpus)
        result = fresh.converse()
        assert not result.skipped
        assert target.read_bytes() == original

    def test_config_change_invalidates_downstream(self, tiny_corpus):
        make_pipeline(tiny_corpus).run_all()
        changed = make_pipeline(tiny_corpus, seed=8)
        results = changed.run_all()
        assert not any(r.skipped for r in results)

    def test_emitted_dataset_has_checksum_and_valid_masks(self, tiny_corpus):
        pipeline = make_pipeline(tiny_corpus)
        pipeline.run_all()
        records = load_dataset(pipeline.paths.dataset / "train_rag.jsonl")
        assert records
        for record in records:
            start = record["loss_mask"]["output_start_char"]
            assert start > len(record["instruction"])
            assert record["meta"]["source"].startswith(("seed", "conversation_turn_"))

    def test_refined_records_schema(self, tiny_corpus):
        pipeline = make_pipeline(tiny_corpus)
        pipeline.run_all()
        rows = [json.loads(line) for line in
                (pipeline.paths.refined / "refined.jsonl").read_text(encoding="utf-8").splitlines()]
        assert rows
        assert set(rows[0]) == {"question", "answer", "overall_score", "candidate_count",
                                "conversation_ref"}

    def test_every_chunk_yields_seeds_or_a_failure_record(self, tiny_corpus):
        pipeline = make_pipeline(tiny_corpus)
        pipeline.ingest()
        result = pipeline.seed()
        counts = result.counts
        assert counts["seeds"] + counts["failures"] >= counts["chunks"]
        seeds = [json.loads(line) for line in
                 (pipeline.paths.seeds / "seeds.jsonl").read_text(encoding="utf-8").splitlines()]
        chunk_ids = {json.loads(line)["chunk_id"] for line in
                     (pipeline.paths.chunks / "chunks.jsonl").read_text(encoding="utf-8").splitlines()}
        assert all(s["chunk_id"] in chunk_ids for s in seeds)  # traceability

    def test_manifest_records_checksums_and_counts(self, tiny_corpus):
        pipeline = make_pipeline(tiny_corpus)
        pipeline.run_all()
        manifest = json.loads((pipeline.paths.manifest / "ingest.json").read_text(encoding="utf-8"))
        assert manifest["stage"] == "ingest"
        assert manifest["counts"]["documents"] == 4
        assert all(len(h) == 64 for h in manifest["outputs"].values())
        assert manifest["duration_s"] >= 0


class TestCli:
    def _args(self, tiny_corpus, *extra) -> list[str]:
        return [
            "--mock", "--seed", "7", "--out", str(tiny_corpus["out"]), *extra,
        ]

    def _write_config(self, tiny_corpus) -> str:
        path = tiny_corpus["out"].parent / "cli.yaml"
        overrides = config_overrides(tiny_corpus)
        import yaml

        path.write_text(yaml.safe_dump(overrides), encoding="utf-8")
        return str(path)

    def test_run_all_exits_zero(self, tiny_corpus):
        runner = CliRunner()
        config = self._write_config(tiny_corpus)
        result = runner.invoke(cli_main, ["--config", config, *self._args(tiny_corpus), "run-all"])
        assert result.exit_code == 0, result.output
        assert "[evaluate]" in result.output

    def test_out_of_order_stage_fails_with_hint(self, tiny_corpus):
        runner = CliRunner()
        config = self._write_config(tiny_corpus)
        result = runner.invoke(cli_main, ["--config", config, *self._args(tiny_corpus), "refine"])
        assert result.exit_code != 0
        assert "run `convoforge converse` first" in result.output

    def test_transcript_rendering_option(self, tiny_corpus):
        runner = CliRunner()
        config = self._write_config(tiny_corpus)
        assert runner.invoke(cli_main, ["--config", config, *self._args(tiny_corpus), "ingest"]).exit_code == 0
        assert runner.invoke(cli_main, ["--config", config, *self._args(tiny_corpus), "seed"]).exit_code == 0
        result = runner.invoke(
            cli_main,
            ["--config", config, *self._args(tiny_corpus), "converse", "--show-transcripts", "1"],
        )
        assert result.exit_code == 0, result.output
        assert "[turn 1] User:" in result.output

    def test_evaluate_with_pairs_and_similarity(self, tiny_corpus, tmp_path):
        runner = CliRunner()
        config = self._write_config(tiny_corpus)
        assert runner.invoke(cli_main, ["--config", config, *self._args(tiny_corpus), "run-all"]).exit_code == 0

        pairs = tmp_path / "pairs.jsonl"
        pairs.write_text(
            "\n".join(
                json.dumps({"question": f"q{i}", "answer_A": f"alpha {i}", "answer_B": f"beta {i}"})
                for i in range(4)
            ) + "\n",
            encoding="utf-8",
        )
        imitation = tmp_path / "imit.txt"
        synthesis = tmp_path / "synth.txt"
        real = tmp_path / "real.txt"
        imitation.write_text("how do budgets work?\nwhere is my invoice?\n", encoding="utf-8")
        synthesis.write_text("describe the budget system\nenumerate invoice fields\n", encoding="utf-8")
        real.write_text("how do I change my budget?\nwhere can I download my invoice?\n", encoding="utf-8")

        result = runner.invoke(cli_main, [
            "--config", config, *self._args(tiny_corpus), "evaluate",
            "--pairs", str(pairs),
            "--similarity", str(imitation), str(synthesis), str(real),
        ])
        assert result.exit_code == 0, result.output
        out_dir = Path(tiny_corpus["out"])
        run_dir = next(out_dir.iterdir())
        assert (run_dir / "eval" / "winrate.csv").is_file()
        assert (run_dir / "eval" / "similarity.csv").is_file()
