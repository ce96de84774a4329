"""Trainer command line."""

from __future__ import annotations

import click

from .data import DatasetIntegrityError, MaskAlignmentError
from .train import LoraConfig, TrainConfig, smoothed, train


@click.group()
def main():
    """LoRA fine-tuning on convoforge dataset files (output-token loss only)."""


@main.command(name="make-base")
@click.option("--dataset", "datasets", required=True, multiple=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Records file(s) whose vocabulary the base model should cover.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--steps", default=1200, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
def make_base_cmd(datasets, out, steps, seed):
    """Pretrain a local tiny base checkpoint with context-copying ability."""
    from .pretrain import pretrain_base

    try:
        path = pretrain_base(list(datasets), out, steps=steps, seed=seed)
    except (DatasetIntegrityError, MaskAlignmentError, ValueError) as exc:
        raise click.ClickException(str(exc))
    click.echo(f"base checkpoint: {path}")


@main.command(name="train")
@click.option("--dataset", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Records file emitted by the data pipeline (rag or plain variant).")
@click.option("--steps", required=True, type=int, help="Number of optimizer steps.")
@click.option("--base-model", default="tiny", show_default=True,
              help="'tiny' for a fresh decoder, or a local base checkpoint path.")
@click.option("--out", default="trainer_out", type=click.Path(file_okay=False))
@click.option("--lr", default=2e-5, show_default=True, type=float)
@click.option("--warmup-ratio", default=0.03, show_default=True, type=float)
@click.option("--batch-size", default=1, show_default=True, type=int)
@click.option("--lora-rank", default=64, show_default=True, type=int)
@click.option("--lora-alpha", default=16.0, show_default=True, type=float)
@click.option("--lora-dropout", default=0.05, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
def train_cmd(dataset, steps, base_model, out, lr, warmup_ratio, batch_size, lora_rank,
              lora_alpha, lora_dropout, seed):
    """Run the fine-tune and report first/last smoothed loss."""
    config = TrainConfig(
        dataset_path=dataset,
        max_steps=steps,
        base_model=base_model,
        out_dir=out,
        lr=lr,
        warmup_ratio=warmup_ratio,
        batch_size=batch_size,
        lora=LoraConfig(rank=lora_rank, alpha=lora_alpha, dropout=lora_dropout),
        seed=seed,
    )
    try:
        result = train(config)
    except (DatasetIntegrityError, MaskAlignmentError, ValueError) as exc:
        raise click.ClickException(str(exc))
    window = max(1, min(10, len(result.losses) // 3))
    curve = smoothed(result.losses, window=window)
    click.echo(f"steps={len(result.losses)}  smoothed first={curve[0]:.4f} last={curve[-1]:.4f}")
    click.echo(f"checkpoint: {result.checkpoint_path}")
    click.echo(f"loss curve: {result.loss_csv_path}")


if __name__ == "__main__":
    main()
