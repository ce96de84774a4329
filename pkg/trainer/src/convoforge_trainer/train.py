"""LoRA supervised fine-tuning with loss on output tokens only.

The objective is the negative log-likelihood of the answer tokens given
the full (instruction, answer) sequence. Supervision is a weighted
cross entropy: labels cover every position but the loss mask zeroes out
instruction and padding positions, so only the output span contributes.
Keeping the mask separate from the labels makes the isolation property
directly testable: perturbing labels at masked positions must not change
the loss at all.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import nn

from .data import PAD_ID, EncodedExample, WhitespaceTokenizer, encode_record, load_records
from .lora import apply_lora, trainable_parameters
from .model import TinyDecoder, TinyDecoderConfig


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 64
    alpha: float = 16.0
    dropout: float = 0.05


@dataclass(frozen=True)
class TrainConfig:
    dataset_path: str
    max_steps: int  # no reference default: always set explicitly
    out_dir: str = "trainer_out"
    base_model: str = "tiny"  # the built-in offline decoder
    lr: float = 2e-5
    warmup_ratio: float = 0.03
    batch_size: int = 1
    lora: LoraConfig = field(default_factory=LoraConfig)
    seed: int = 0
    max_seq: int = 256
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2


@dataclass(frozen=True)
class TrainResult:
    checkpoint_path: Path
    loss_csv_path: Path
    losses: list[float]


def masked_lm_loss(logits: torch.Tensor, labels: torch.Tensor, loss_mask: torch.Tensor) -> torch.Tensor:
    """Mean next-token NLL over positions where the mask is 1."""
    log_probs = torch.log_softmax(logits[:, :-1], dim=-1)
    targets = labels[:, 1:]
    mask = loss_mask[:, 1:].to(log_probs.dtype)
    nll = -log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    total = mask.sum()
    if total.item() == 0:
        raise ValueError("loss mask selects no positions")
    return (nll * mask).sum() / total


def collate(
    batch: list[EncodedExample], device: torch.device
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Right-pad a batch; returns (input_ids, labels, loss_mask, pad_mask)."""
    width = max(len(ex.input_ids) for ex in batch)
    input_ids = torch.full((len(batch), width), PAD_ID, dtype=torch.long, device=device)
    loss_mask = torch.zeros((len(batch), width), dtype=torch.long, device=device)
    for row, ex in enumerate(batch):
        input_ids[row, : len(ex.input_ids)] = torch.tensor(ex.input_ids, device=device)
        loss_mask[row, : len(ex.loss_mask)] = torch.tensor(ex.loss_mask, device=device)
    labels = input_ids.clone()
    pad_mask = input_ids == PAD_ID
    return input_ids, labels, loss_mask, pad_mask


def resolve_base(config: TrainConfig, records) -> tuple[TinyDecoder, WhitespaceTokenizer]:
    """Build the base model to fine-tune.

    ``base_model`` is either the literal "tiny" (a fresh in-repo decoder,
    vocabulary built from the records) or a path to a locally saved base
    checkpoint, whose stored vocabulary and dimensions are reused.
    """
    if config.base_model == "tiny":
        tokenizer = WhitespaceTokenizer(records)
        model_config = TinyDecoderConfig(
            vocab_size=len(tokenizer),
            d_model=config.d_model,
            n_heads=config.n_heads,
            n_layers=config.n_layers,
            max_seq=config.max_seq,
        )
        return TinyDecoder(model_config), tokenizer
    base_path = Path(config.base_model)
    if not base_path.is_file():
        raise ValueError(
            f"base model {config.base_model!r} not found; use 'tiny' or a local checkpoint "
            f"path (this trainer has no model-hub access)"
        )
    checkpoint = torch.load(base_path, map_location="cpu", weights_only=False)
    tokenizer = WhitespaceTokenizer.from_vocab(checkpoint["vocab"])
    model = TinyDecoder(TinyDecoderConfig(**checkpoint["model_config"]))
    model.load_state_dict(checkpoint["model_state"])
    return model, tokenizer


def _lr_at(step: int, config: TrainConfig) -> float:
    warmup = max(1, math.ceil(config.warmup_ratio * config.max_steps))
    if step < warmup:
        return config.lr * (step + 1) / warmup
    return config.lr


def load_examples(config: TrainConfig) -> tuple[list[EncodedExample], WhitespaceTokenizer, TinyDecoder]:
    records = load_records(config.dataset_path)
    model, tokenizer = resolve_base(config, records)
    examples = [encode_record(r, tokenizer, config.max_seq) for r in records]
    return examples, tokenizer, model


def train(config: TrainConfig) -> TrainResult:
    """Fine-tune on one records file; writes a checkpoint and a loss CSV."""
    torch.manual_seed(config.seed)
    device = torch.device("cuda" if torch.cuda.is_available() else "cpu")

    examples, tokenizer, model = load_examples(config)
    model = model.to(device)
    wrapped = apply_lora(model, rank=config.lora.rank, alpha=config.lora.alpha,
                         dropout=config.lora.dropout)
    optimizer = torch.optim.AdamW(trainable_parameters(model), lr=config.lr)

    generator = torch.Generator().manual_seed(config.seed)
    losses: list[float] = []
    model.train()
    for step in range(config.max_steps):
        picks = torch.randint(0, len(examples), (config.batch_size,), generator=generator)
        batch = [examples[i] for i in picks.tolist()]
        input_ids, labels, loss_mask, pad_mask = collate(batch, device)
        loss = masked_lm_loss(model(input_ids, pad_mask), labels, loss_mask)
        optimizer.zero_grad()
        loss.backward()
        for group in optimizer.param_groups:
            group["lr"] = _lr_at(step, config)
        optimizer.step()
        losses.append(float(loss.detach()))

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    loss_csv = out_dir / "loss.csv"
    with open(loss_csv, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"])
        writer.writerows((i, f"{loss_value:.6f}") for i, loss_value in enumerate(losses))

    checkpoint = out_dir / "checkpoint.pt"
    torch.save({"model_state": model.state_dict(), "vocab": tokenizer.vocab,
                "wrapped_modules": wrapped}, checkpoint)
    (out_dir / "train_config.json").write_text(
        json.dumps(asdict(config), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return TrainResult(checkpoint_path=checkpoint, loss_csv_path=loss_csv, losses=losses)


def smoothed(losses: list[float], window: int = 10) -> list[float]:
    """Non-overlapping trailing-window means over the loss history."""
    if window < 1 or window > len(losses):
        raise ValueError("window must be within the loss history")
    return [sum(losses[i: i + window]) / window for i in range(0, len(losses) - window + 1, window)]


def single_step_loss(config: TrainConfig, perturb_masked_labels_seed: int | None = None) -> float:
    """Loss of one fixed batch at fixed parameters (no optimizer step).

    With ``perturb_masked_labels_seed`` set, the labels at masked
    (instruction and padding) positions are replaced with random token ids
    before the loss is computed. A correct mask makes this a perfect no-op,
    which is the mask-correctness acceptance check.
    """
    torch.manual_seed(config.seed)
    examples, tokenizer, model = load_examples(config)
    apply_lora(model, rank=config.lora.rank, alpha=config.lora.alpha, dropout=0.0)
    model.eval()
    batch = examples[: max(1, config.batch_size)]
    input_ids, labels, loss_mask, pad_mask = collate(batch, torch.device("cpu"))
    if perturb_masked_labels_seed is not None:
        noise = torch.Generator().manual_seed(perturb_masked_labels_seed)
        random_ids = torch.randint(0, len(tokenizer), labels.shape, generator=noise)
        labels = torch.where(loss_mask.bool(), labels, random_ids)
    with torch.no_grad():
        return float(masked_lm_loss(model(input_ids, pad_mask), labels, loss_mask))
