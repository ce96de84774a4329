"""Command-line entry points: one subcommand per pipeline stage."""

from __future__ import annotations

import sys
from pathlib import Path

import click

from ._io import load_jsonl
from .config import load_config
from .conversation import conversation_from_record, render_transcript
from .errors import ConvoForgeError
from .pipeline import Pipeline, StageResult


def _build_pipeline(ctx: click.Context) -> Pipeline:
    config_path, overrides = ctx.obj["config_path"], ctx.obj["overrides"]
    try:
        config = load_config(config_path, overrides)
        return Pipeline(config)
    except ConvoForgeError as exc:
        raise click.ClickException(str(exc))


def _report(result: StageResult) -> None:
    state = "skipped (checksums match)" if result.skipped else f"done in {result.duration_s:.2f}s"
    counts = ", ".join(f"{k}={v}" for k, v in result.counts.items())
    click.echo(f"[{result.stage}] {state}  {counts}")


def _run(ctx: click.Context, stage_name: str) -> StageResult:
    pipeline = _build_pipeline(ctx)
    force = ctx.obj["force"]
    try:
        result: StageResult = getattr(pipeline, stage_name)(force=force)
    except ConvoForgeError as exc:
        raise click.ClickException(str(exc))
    _report(result)
    return result


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="YAML config file; defaults apply for anything omitted.")
@click.option("--jobs", type=int, default=None, help="Parallel worker bound (gateway cap).")
@click.option("--seed", type=int, default=None, help="Global random seed.")
@click.option("--mock", is_flag=True, help="Force deterministic mock backends everywhere.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory root.")
@click.option("--force", is_flag=True, help="Re-run stages even when checksums match.")
@click.pass_context
def main(ctx, config_path, jobs, seed, mock, out, force):
    """Conversation-grounded instruction data synthesis pipeline."""
    overrides: dict = {}
    if jobs is not None:
        overrides["concurrency"] = {"jobs": jobs}
    if seed is not None:
        overrides["seed"] = seed
    if mock:
        overrides.setdefault("generation", {})["backend"] = "mock"
        overrides.setdefault("retrieval", {})["embedding"] = {"backend": "mock"}
        overrides.setdefault("judge", {})["backend"] = "mock"
    if out is not None:
        overrides["output"] = {"dir": out}
    ctx.obj = {"config_path": config_path, "overrides": overrides, "force": force}


@main.command()
@click.pass_context
def ingest(ctx):
    """Read raw documents, chunk them, and build the vector index."""
    _run(ctx, "ingest")


@main.command()
@click.pass_context
def seed(ctx):
    """Generate style-imitating seed QA pairs for every chunk."""
    _run(ctx, "seed")


@main.command()
@click.option("--show-transcripts", type=int, default=0,
              help="Print the first N rendered transcripts after the stage.")
@click.pass_context
def converse(ctx, show_transcripts):
    """Simulate inquirer/assistant dialogues over the seed questions."""
    pipeline = _build_pipeline(ctx)
    try:
        result = pipeline.converse(force=ctx.obj["force"])
    except ConvoForgeError as exc:
        raise click.ClickException(str(exc))
    _report(result)
    if show_transcripts > 0:
        records = load_jsonl(pipeline.paths.conversations / "conversations.jsonl")
        for record in records[:show_transcripts]:
            click.echo(render_transcript(conversation_from_record(record)))
            click.echo()


@main.command()
@click.pass_context
def refine(ctx):
    """Refine every turn's answer with judge feedback and select the best."""
    _run(ctx, "refine")


@main.command()
@click.pass_context
def emit(ctx):
    """Assemble training triplets and write the rag/plain dataset files."""
    _run(ctx, "emit")


@main.command()
@click.pass_context
def stats(ctx):
    """Compute dataset length statistics and the verb/object report."""
    _run(ctx, "stats")


@main.command()
@click.option("--pairs", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Records file {question, answer_A, answer_B}: compute WinRate.")
@click.option("--answers", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Records file {question, answer}: judge against retrieved docs.")
@click.option("--similarity", nargs=3, type=click.Path(exists=True, dir_okay=False), default=None,
              help="Three question files (imitation, synthesis, real): centroid report.")
@click.pass_context
def evaluate(ctx, pairs, answers, similarity):
    """Judge the emitted dataset; optionally run WinRate/similarity reports."""
    pipeline = _build_pipeline(ctx)
    try:
        result = pipeline.evaluate(force=ctx.obj["force"])
        _report(result)
        if pairs:
            click.echo(f"winrate report: {pipeline.evaluate_pairs_file(pairs)}")
        if answers:
            click.echo(f"answers report: {pipeline.evaluate_answers_file(answers)}")
        if similarity:
            click.echo(f"similarity report: {pipeline.similarity_report(*similarity)}")
    except ConvoForgeError as exc:
        raise click.ClickException(str(exc))


@main.command(name="run-all")
@click.pass_context
def run_all(ctx):
    """Run every stage in order: ingest, seed, converse, refine, emit, stats, evaluate."""
    pipeline = _build_pipeline(ctx)
    try:
        results = pipeline.run_all(force=ctx.obj["force"])
    except ConvoForgeError as exc:
        raise click.ClickException(str(exc))
    for result in results:
        _report(result)
    click.echo(f"artifacts: {pipeline.paths.root}")


if __name__ == "__main__":
    sys.exit(main())
