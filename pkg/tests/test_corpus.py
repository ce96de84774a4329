from __future__ import annotations

import hashlib
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convoforge.corpus import (
    Chunk,
    IngestResult,
    RawDocument,
    SourceDocument,
    chunk,
    ingest,
    load_raw_documents,
    normalize_text,
    read_chunk_manifest,
    write_chunk_manifest,
)
from convoforge.errors import ConfigError


def _doc(body: str, doc_id: str = "doc-test") -> SourceDocument:
    return SourceDocument(doc_id=doc_id, title="t", body=body, ingested_at="1970-01-01T00:00:00Z")


def _expected_id(body: str) -> str:
    return "doc-" + hashlib.sha256(normalize_text(body).encode("utf-8")).hexdigest()[:16]


def _oracle_starts(n: int, size: int, overlap: int) -> list[int]:
    # Independent re-derivation of the window arithmetic.
    step = size - overlap
    if n <= size:
        return [0]
    count = math.ceil((n - size) / step) + 1
    return [i * step for i in range(count - 1)] + [n - size]


def _assert_reconstructs(body: str, chunks: list[Chunk]) -> None:
    buf: list[str | None] = [None] * len(body)
    for c in chunks:
        assert body[c.start : c.start + c.length] == c.text
        for i, ch in enumerate(c.text):
            pos = c.start + i
            assert buf[pos] in (None, ch)
            buf[pos] = ch
    assert None not in buf
    assert "".join(buf) == body  # type: ignore[arg-type]


class TestIngest:
    def test_single_document_gets_deterministic_id(self):
        result = ingest([RawDocument(text="hello world")])
        assert len(result.documents) == 1
        assert result.documents[0].doc_id == _expected_id("hello world")
        again = ingest([RawDocument(text="hello world")])
        assert again.documents[0].doc_id == result.documents[0].doc_id

    def test_identical_bodies_collapse(self):
        result = ingest([RawDocument(text="a"), RawDocument(text="a")])
        assert len(result.documents) == 1

    def test_three_distinct_docs_have_pairwise_distinct_ids(self):
        bodies = ["alpha body text", "beta body text", "gamma body text"]
        result = ingest([RawDocument(text=b) for b in bodies])
        got = [d.doc_id for d in result.documents]
        assert got == [_expected_id(b) for b in bodies]
        assert len(set(got)) == 3

    def test_empty_corpus_is_fatal(self):
        with pytest.raises(ConfigError):
            ingest([])

    def test_single_empty_document_skipped_with_warning(self):
        result = ingest([RawDocument(text="  \t "), RawDocument(text="real content")])
        assert len(result.documents) == 1
        assert len(result.warnings) == 1
        assert "empty" in result.warnings[0].reason

    def test_all_empty_documents_is_fatal(self):
        with pytest.raises(ConfigError):
            ingest([RawDocument(text="   ")])


class TestNormalize:
    def test_collapses_spaces_and_tabs_preserves_newlines(self):
        assert normalize_text("a  \t b\ncc   d") == "a b\ncc d"

    def test_normalizes_line_endings(self):
        assert normalize_text("a\r\nb\rc") == "a\nb\nc"


class TestChunk:
    def test_body_smaller_than_window_yields_one_chunk(self):
        body = "x" * 400
        chunks = chunk(_doc(body), size=512, overlap=32)
        assert len(chunks) == 1
        assert chunks[0].start == 0
        assert chunks[0].length == 400
        assert chunks[0].text == body

    def test_len_1024_worked_example_matches_arithmetic_oracle(self):
        rng = random.Random(1024)
        body = "".join(chr(rng.randrange(32, 0x2FF)) for _ in range(1024))
        chunks = chunk(_doc(body), size=512, overlap=32)
        assert [c.start for c in chunks] == [0, 480, 512]
        assert [c.start for c in chunks] == _oracle_starts(1024, 512, 32)
        assert all(c.length == 512 for c in chunks)
        assert chunks[-1].start + chunks[-1].length == 1024
        _assert_reconstructs(body, chunks)

    def test_overlap_equal_to_size_rejected(self):
        with pytest.raises(ValueError):
            chunk(_doc("abc" * 300), size=512, overlap=512)

    def test_chunk_count_formula(self):
        for n in (1, 511, 512, 513, 1000, 1024, 4999):
            body = "a" * n
            got = len(chunk(_doc(body), size=512, overlap=32))
            expect = 1 if n <= 512 else math.ceil((n - 512) / 480) + 1
            assert got == expect, n

    def test_all_but_last_are_full_size_and_steps_are_regular(self):
        body = "b" * 2500
        chunks = chunk(_doc(body), size=512, overlap=32)
        for prev, nxt in zip(chunks, chunks[1:-1]):
            assert nxt.start - prev.start == 480
        assert all(c.length == 512 for c in chunks[:-1])
        assert chunks[-1].start == 2500 - 512

    def test_concatenation_identity_when_final_chunk_not_reanchored(self):
        # len - size divisible by step: the last window lands exactly on the end.
        n = 512 + 480 * 3
        body = "".join(chr(97 + (i % 26)) for i in range(n))
        chunks = chunk(_doc(body), size=512, overlap=32)
        rebuilt = "".join(c.text[:480] for c in chunks[:-1]) + chunks[-1].text
        assert rebuilt == body

    @settings(max_examples=60, deadline=None)
    @given(st.text(min_size=1, max_size=3000), st.integers(0, 2**32 - 1))
    def test_coverage_offsets_and_determinism_hold_for_random_text(self, body: str, seed: int):
        doc = _doc(body)
        first = chunk(doc, size=64, overlap=16)
        second = chunk(doc, size=64, overlap=16)
        assert first == second
        _assert_reconstructs(body, first)
        assert [c.start for c in first] == _oracle_starts(len(body), 64, 16)


class TestManifestIO:
    def test_round_trip(self, tmp_path):
        result: IngestResult = ingest([RawDocument(text="hello world " * 100, title="t")])
        chunks = chunk(result.documents[0], size=128, overlap=16)
        path = tmp_path / "chunks.jsonl"
        write_chunk_manifest(chunks, path)
        assert read_chunk_manifest(path) == chunks

    def test_directory_loader_reads_sorted_text_files(self, tmp_path):
        (tmp_path / "b.md").write_text("second doc body", encoding="utf-8")
        (tmp_path / "a.txt").write_text("first doc body", encoding="utf-8")
        (tmp_path / "ignored.bin").write_text("junk", encoding="utf-8")
        raws = load_raw_documents(tmp_path)
        assert [r.source_id for r in raws] == ["a.txt", "b.md"]

    def test_records_file_loader(self, tmp_path):
        path = tmp_path / "docs.jsonl"
        path.write_text(
            '{"id": "d1", "title": "One", "body": "body one"}\n'
            '{"id": "d2", "title": "Two", "body": "body two"}\n',
            encoding="utf-8",
        )
        raws = load_raw_documents(path)
        assert [r.source_id for r in raws] == ["d1", "d2"]
        assert raws[0].text == "body one"

    def test_missing_input_is_config_error(self, tmp_path):
        with pytest.raises(ConfigError):
            load_raw_documents(tmp_path / "nope")
