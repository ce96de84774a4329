"""Reader for convoforge dataset files and the whitespace tokenizer.

The file contract (documented by the data pipeline) is JSONL with fields
{id, instruction, output, loss_mask: {output_start_char}, meta}, terminated
by a ``#sha256:<hex>`` trailer over the record bytes. The canonical
training text is ``instruction + "\\n\\n### Response:\\n" + output`` and
``output_start_char`` must equal ``len(instruction) + len(separator)``;
any mismatch is a hard error naming the record, because a silently shifted
mask would corrupt the supervision span.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

RESPONSE_SEPARATOR = "\n\n### Response:\n"
CHECKSUM_PREFIX = "#sha256:"

PAD_ID = 0
BOS_ID = 1
UNK_ID = 2
_SPECIALS = ("[PAD]", "[BOS]", "[UNK]")


class DatasetIntegrityError(Exception):
    """Records file is corrupt: bad checksum trailer or missing fields."""


class MaskAlignmentError(Exception):
    """A record's loss mask does not line up with its text or tokens."""


@dataclass(frozen=True)
class TrainRecord:
    record_id: str
    prompt: str  # instruction + separator; receives no loss
    output: str


def load_records(path: Path | str) -> list[TrainRecord]:
    """Parse and verify a records file; every record's mask is checked."""
    path = Path(path)
    hasher = hashlib.sha256()
    trailer: str | None = None
    records: list[TrainRecord] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith(CHECKSUM_PREFIX):
                trailer = line.strip()[len(CHECKSUM_PREFIX):]
                continue
            if trailer is not None:
                raise DatasetIntegrityError(f"{path}: records after checksum trailer")
            hasher.update(line.encode("utf-8"))
            raw = json.loads(line)
            records.append(_to_record(raw))
    if trailer is None:
        raise DatasetIntegrityError(f"{path}: missing checksum trailer")
    if trailer != hasher.hexdigest():
        raise DatasetIntegrityError(f"{path}: checksum mismatch, file corrupt or truncated")
    if not records:
        raise DatasetIntegrityError(f"{path}: no records")
    return records


def _to_record(raw: dict) -> TrainRecord:
    record_id = raw.get("id", "<missing id>")
    try:
        instruction = raw["instruction"]
        output = raw["output"]
        start = raw["loss_mask"]["output_start_char"]
    except KeyError as exc:
        raise DatasetIntegrityError(f"record {record_id}: missing field {exc}") from exc
    expected = len(instruction) + len(RESPONSE_SEPARATOR)
    if start != expected:
        raise MaskAlignmentError(
            f"record {record_id}: output_start_char={start} but instruction+separator ends at {expected}"
        )
    full = instruction + RESPONSE_SEPARATOR + output
    if full[start:] != output:
        raise MaskAlignmentError(f"record {record_id}: mask span does not reproduce the output")
    return TrainRecord(record_id=record_id, prompt=full[:start], output=output)


class WhitespaceTokenizer:
    """Deterministic word-level tokenizer built from the training records."""

    def __init__(self, records: list[TrainRecord]):
        vocab: dict[str, int] = {tok: i for i, tok in enumerate(_SPECIALS)}
        for record in records:
            for word in (record.prompt + " " + record.output).split():
                if word not in vocab:
                    vocab[word] = len(vocab)
        self.vocab = vocab

    @classmethod
    def from_vocab(cls, vocab: dict[str, int]) -> "WhitespaceTokenizer":
        tokenizer = cls.__new__(cls)
        tokenizer.vocab = dict(vocab)
        return tokenizer

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        return [self.vocab.get(word, UNK_ID) for word in text.split()]


@dataclass(frozen=True)
class EncodedExample:
    record_id: str
    input_ids: list[int]
    loss_mask: list[int]  # 1 on output tokens, 0 on prompt tokens


def encode_record(record: TrainRecord, tokenizer: WhitespaceTokenizer, max_seq: int) -> EncodedExample:
    """Tokenize one record with loss restricted to the output span.

    The prompt+output tokenization must agree with tokenizing the full text
    in one pass, otherwise the character mask cannot be mapped to a token
    mask and the record is rejected.
    """
    prompt_ids = tokenizer.encode(record.prompt)
    output_ids = tokenizer.encode(record.output)
    full_ids = tokenizer.encode(record.prompt + " " + record.output)
    if prompt_ids + output_ids != full_ids:
        raise MaskAlignmentError(
            f"record {record.record_id}: prompt/output tokenization does not compose"
        )
    if len(output_ids) + 1 >= max_seq:
        raise MaskAlignmentError(
            f"record {record.record_id}: output alone exceeds max_seq={max_seq}"
        )
    # keep the output intact; drop prompt tokens from the left if too long
    budget = max_seq - 1 - len(output_ids)
    prompt_ids = prompt_ids[-budget:]
    input_ids = [BOS_ID] + prompt_ids + output_ids
    loss_mask = [0] * (1 + len(prompt_ids)) + [1] * len(output_ids)
    return EncodedExample(record_id=record.record_id, input_ids=input_ids, loss_mask=loss_mask)
