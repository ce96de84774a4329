"""Corpus ingestion and fixed-size overlapping chunking.

Documents are normalized, deduplicated by body hash, and split into
character-offset windows (default 512 chars with 32 overlap). Chunk
boundaries count Unicode scalar values, not bytes, so the split is
encoding-stable.
"""

from __future__ import annotations

import datetime as _dt
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from ._io import sha256_text, write_jsonl
from .errors import ConfigError

DEFAULT_CHUNK_SIZE = 512
DEFAULT_CHUNK_OVERLAP = 32

EPOCH_ISO = "1970-01-01T00:00:00Z"


@dataclass(frozen=True)
class RawDocument:
    """Unprocessed input text plus whatever metadata the source had."""

    text: str
    title: str = ""
    source_id: str = ""
    mtime: str = EPOCH_ISO


@dataclass(frozen=True)
class SourceDocument:
    doc_id: str
    title: str
    body: str
    ingested_at: str


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    start: int
    length: int
    text: str


@dataclass(frozen=True)
class IngestWarning:
    source_id: str
    reason: str


@dataclass(frozen=True)
class IngestResult:
    documents: list[SourceDocument]
    warnings: list[IngestWarning]


def normalize_text(text: str) -> str:
    """Collapse runs of spaces/tabs, normalize line endings, trim the ends.

    Newlines are preserved so chunk offsets stay meaningful for prose.
    """
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    text = re.sub(r"[ \t]+", " ", text)
    return text.strip()


def ingest(raw_documents: Iterable[RawDocument]) -> IngestResult:
    """Normalize raw inputs into deduplicated SourceDocuments.

    Doc ids are content hashes, so the same bytes always produce the same
    corpus. Empty documents are skipped with a warning record; an empty
    corpus overall is a fatal configuration error.
    """
    documents: list[SourceDocument] = []
    warnings: list[IngestWarning] = []
    seen: set[str] = set()
    total = 0
    for raw in raw_documents:
        total += 1
        body = normalize_text(raw.text)
        if not body:
            warnings.append(IngestWarning(source_id=raw.source_id, reason="empty after normalization"))
            continue
        doc_id = "doc-" + sha256_text(body)[:16]
        if doc_id in seen:
            continue
        seen.add(doc_id)
        documents.append(
            SourceDocument(doc_id=doc_id, title=raw.title, body=body, ingested_at=raw.mtime)
        )
    if total == 0 or not documents:
        raise ConfigError("corpus is empty: no non-empty documents to ingest")
    return IngestResult(documents=documents, warnings=warnings)


def chunk(
    document: SourceDocument,
    size: int = DEFAULT_CHUNK_SIZE,
    overlap: int = DEFAULT_CHUNK_OVERLAP,
) -> list[Chunk]:
    """Split a document body into overlapping fixed-size character windows.

    Consecutive chunks start ``size - overlap`` apart. The final chunk is
    re-anchored backward so it ends exactly at the document end and keeps
    full size when the body allows it; this avoids tiny tail fragments that
    retrieve poorly.
    """
    if overlap < 0 or overlap >= size:
        raise ValueError(f"overlap must satisfy 0 <= overlap < size, got overlap={overlap} size={size}")
    body = document.body
    if not body:
        raise ValueError(f"document {document.doc_id} has an empty body")

    n = len(body)
    step = size - overlap
    if n <= size:
        starts = [0]
    else:
        count = math.ceil((n - size) / step) + 1
        starts = [i * step for i in range(count - 1)]
        starts.append(max(n - size, 0))

    chunks = []
    for start in starts:
        text = body[start : start + size]
        chunks.append(
            Chunk(
                chunk_id=f"{document.doc_id}-{start:06d}",
                doc_id=document.doc_id,
                start=start,
                length=len(text),
                text=text,
            )
        )
    return chunks


def chunk_corpus(
    documents: Sequence[SourceDocument],
    size: int = DEFAULT_CHUNK_SIZE,
    overlap: int = DEFAULT_CHUNK_OVERLAP,
) -> list[Chunk]:
    out: list[Chunk] = []
    for document in documents:
        out.extend(chunk(document, size=size, overlap=overlap))
    return out


def _mtime_iso(path: Path) -> str:
    ts = path.stat().st_mtime
    return _dt.datetime.fromtimestamp(ts, tz=_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def load_raw_documents(source: Path | str) -> list[RawDocument]:
    """Read pipeline input: a directory of .txt/.md files, or a JSONL records
    file with fields {id, title, body}."""
    source = Path(source)
    if source.is_dir():
        paths = sorted(p for p in source.iterdir() if p.suffix.lower() in (".txt", ".md"))
        if not paths:
            raise ConfigError(f"no .txt or .md files found in {source}")
        return [
            RawDocument(
                text=p.read_text(encoding="utf-8"),
                title=p.stem,
                source_id=p.name,
                mtime=_mtime_iso(p),
            )
            for p in paths
        ]
    if source.is_file():
        import json

        raws = []
        with open(source, encoding="utf-8") as fh:
            for i, line in enumerate(fh):
                if not line.strip():
                    continue
                rec = json.loads(line)
                raws.append(
                    RawDocument(
                        text=rec.get("body", ""),
                        title=rec.get("title", ""),
                        source_id=str(rec.get("id", f"line-{i + 1}")),
                        mtime=rec.get("ingested_at", EPOCH_ISO),
                    )
                )
        if not raws:
            raise ConfigError(f"records file {source} contains no documents")
        return raws
    raise ConfigError(f"corpus input not found: {source}")


def write_documents_file(documents: Sequence[SourceDocument], path: Path | str) -> Path:
    return write_jsonl(
        path,
        (
            {"doc_id": d.doc_id, "title": d.title, "body": d.body, "ingested_at": d.ingested_at}
            for d in documents
        ),
    )


def write_chunk_manifest(chunks: Sequence[Chunk], path: Path | str) -> Path:
    """Persist the chunk manifest: {chunk_id, doc_id, start, length, text}."""
    return write_jsonl(
        path,
        (
            {"chunk_id": c.chunk_id, "doc_id": c.doc_id, "start": c.start, "length": c.length, "text": c.text}
            for c in chunks
        ),
    )


def read_chunk_manifest(path: Path | str) -> list[Chunk]:
    from ._io import read_jsonl

    return [
        Chunk(
            chunk_id=r["chunk_id"],
            doc_id=r["doc_id"],
            start=r["start"],
            length=r["length"],
            text=r["text"],
        )
        for r in read_jsonl(path)
    ]
