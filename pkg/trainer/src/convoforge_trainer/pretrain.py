"""Build a local tiny base model that knows how to use its context.

The fine-tune comparisons assume what any pretrained checkpoint has: a
model whose answer loss drops when the answer material is present in the
context. At this scale full induction heads do not form within a sane
budget, but a weaker circuit does, quickly and reliably: predicting
sequences drawn from a small per-sequence token pool teaches the model to
concentrate probability on tokens it can see in its context. That is
exactly the capability that separates the rag variant (answer text present
in the instruction) from the plain variant (absent).

The vocabulary is taken from the dataset files the base will later be
tuned on; the pretraining sequences themselves are random, so no
question/answer mapping leaks into the base.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import torch

from .data import WhitespaceTokenizer, load_records
from .model import TinyDecoder, TinyDecoderConfig
from .train import masked_lm_loss

_N_SPECIALS = 3  # PAD/BOS/UNK are never sampled


def build_vocab(dataset_paths: Sequence[Path | str]) -> dict[str, int]:
    records = []
    for path in dataset_paths:
        records.extend(load_records(path))
    return WhitespaceTokenizer(records).vocab


def _pool_batch(
    batch_size: int,
    vocab_size: int,
    gen: torch.Generator,
    min_pool: int = 5,
    max_pool: int = 20,
    min_seq: int = 30,
    max_seq: int = 70,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Sequences over a small random per-sequence pool; loss after a warm-up
    prefix, so the only way down is to notice which tokens the context uses."""
    rows = []
    for _ in range(batch_size):
        pool_size = int(torch.randint(min_pool, max_pool, (1,), generator=gen))
        seq_len = int(torch.randint(min_seq, max_seq, (1,), generator=gen))
        pool = torch.randint(_N_SPECIALS, vocab_size, (pool_size,), generator=gen)
        rows.append(pool[torch.randint(0, pool_size, (seq_len,), generator=gen)])
    width = max(len(r) for r in rows)
    ids = torch.zeros(batch_size, width, dtype=torch.long)
    mask = torch.zeros(batch_size, width, dtype=torch.long)
    for i, row in enumerate(rows):
        ids[i, : len(row)] = row
        mask[i, len(row) // 4: len(row)] = 1
    return ids, mask


def pretrain_base(
    dataset_paths: Sequence[Path | str],
    out_path: Path | str,
    steps: int = 800,
    batch_size: int = 16,
    lr: float = 1e-3,
    seed: int = 0,
    d_model: int = 96,
    n_heads: int = 4,
    n_layers: int = 2,
    max_seq: int = 256,
) -> Path:
    """Pretrain and save a base checkpoint loadable via TrainConfig.base_model."""
    vocab = build_vocab(dataset_paths)
    model_config = TinyDecoderConfig(
        vocab_size=len(vocab), d_model=d_model, n_heads=n_heads, n_layers=n_layers,
        d_ff=2 * d_model, max_seq=max_seq,
    )
    torch.manual_seed(seed)
    device = torch.device("cuda" if torch.cuda.is_available() else "cpu")
    model = TinyDecoder(model_config).to(device)
    optimizer = torch.optim.AdamW(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)

    model.train()
    for _step in range(steps):
        ids, mask = _pool_batch(batch_size, len(vocab), gen)
        ids, mask = ids.to(device), mask.to(device)
        pad = ids == 0
        loss = masked_lm_loss(model(ids, pad), ids, mask)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "model_state": model.to("cpu").state_dict(),
            "vocab": vocab,
            "model_config": model_config.__dict__,
            "pretrain_steps": steps,
        },
        out_path,
    )
    return out_path
