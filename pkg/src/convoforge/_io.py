"""JSONL and checksum helpers used by every stage.

All files are UTF-8, one JSON object per line, keys sorted, so identical
inputs always serialize to identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Iterable, Iterator

CHECKSUM_PREFIX = "#sha256:"


def dumps(obj: Any) -> str:
    """Canonical single-line JSON used for all on-disk records."""
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path: Path | str, chunk_size: int = 1 << 20) -> str:
    """Streaming SHA-256 of a file."""
    hasher = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(chunk_size), b""):
            hasher.update(block)
    return hasher.hexdigest()


def write_jsonl(path: Path | str, records: Iterable[Any], checksum_trailer: bool = False) -> Path:
    """Atomically write records as JSONL.

    The file is written to a sibling temp file and renamed into place; the
    temp file is removed on failure so a crash never leaves a partial
    artifact. With ``checksum_trailer`` a final ``#sha256:<hex>`` line over
    the record bytes is appended (the dataset-file contract).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    hasher = hashlib.sha256()
    try:
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            for record in records:
                line = dumps(record) + "\n"
                hasher.update(line.encode("utf-8"))
                fh.write(line)
            if checksum_trailer:
                fh.write(f"{CHECKSUM_PREFIX}{hasher.hexdigest()}\n")
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    return path


def read_jsonl(path: Path | str, verify_checksum: bool = False) -> Iterator[dict]:
    """Yield records from a JSONL file, optionally verifying the trailer.

    With ``verify_checksum`` the file must end in a ``#sha256:`` trailer that
    matches the preceding record bytes; a mismatch or missing trailer raises
    ``ValueError``.
    """
    path = Path(path)
    hasher = hashlib.sha256()
    trailer: str | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.startswith(CHECKSUM_PREFIX):
                trailer = line.strip()[len(CHECKSUM_PREFIX):]
                continue
            if trailer is not None:
                raise ValueError(f"{path}: records found after checksum trailer")
            hasher.update(line.encode("utf-8"))
            yield json.loads(line)
    if verify_checksum:
        if trailer is None:
            raise ValueError(f"{path}: missing checksum trailer")
        if trailer != hasher.hexdigest():
            raise ValueError(f"{path}: checksum mismatch (file corrupt or truncated)")


def load_jsonl(path: Path | str, verify_checksum: bool = False) -> list[dict]:
    return list(read_jsonl(path, verify_checksum=verify_checksum))
