"""Corpus ingestion: plain-text documents for LM pretraining and CoNLL data
for token classification.

Pretraining text is cleaned (empty lines and heading-markup lines dropped),
shuffled at document level, tokenized with one end-of-text id between
consecutive documents, and cut into fixed-length segments. Backward training
data is produced by reversing segments element-wise.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Literal, Sequence

from .tokenizer import Encoding, Vocab

Direction = Literal["forward", "backward"]


@dataclass(frozen=True)
class DocumentStore:
    """Cleaned documents in a seed-determined shuffled order."""

    docs: tuple[str, ...]
    order_seed: int


@dataclass(frozen=True)
class TokenSegment:
    ids: tuple[int, ...]
    direction: Direction = "forward"


@dataclass(frozen=True)
class LabeledSentence:
    """One sentence of word-level supervision plus its subword alignment."""

    words: tuple[str, ...]
    tags: tuple[str, ...]
    encoding: Encoding

    def __post_init__(self):
        if not (len(self.words) == len(self.tags) == len(self.encoding.word_starts)):
            raise ValueError(
                f"misaligned sentence: {len(self.words)} words, "
                f"{len(self.tags)} tags, {len(self.encoding.word_starts)} word starts"
            )


def _is_heading(line: str) -> bool:
    s = line.strip()
    return len(s) >= 2 and s.startswith("=") and s.endswith("=")


def _clean_documents(text: str) -> list[str]:
    docs = []
    current: list[str] = []
    for line in text.split("\n"):
        if not line.strip():
            if current:
                docs.append("\n".join(current))
                current = []
            continue
        if _is_heading(line):
            continue
        current.append(line)
    if current:
        docs.append("\n".join(current))
    return docs


def _fisher_yates(items: list, rng: random.Random) -> None:
    for i in range(len(items) - 1, 0, -1):
        j = rng.randrange(i + 1)
        items[i], items[j] = items[j], items[i]


def ingest_documents(paths: Sequence[str | Path], seed: int) -> DocumentStore:
    """Read blank-line-separated documents, clean them, shuffle by seed."""
    if not paths:
        raise ValueError("no input")
    docs: list[str] = []
    for path in paths:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise OSError(f"cannot read corpus file {path}: {e}") from e
        docs.extend(_clean_documents(text))
    _fisher_yates(docs, random.Random(seed))
    return DocumentStore(docs=tuple(docs), order_seed=seed)


def segment_stream(
    store: DocumentStore, vocab: Vocab, seg_len: int
) -> Iterator[TokenSegment]:
    """Cut the tokenized document stream into consecutive length-seg_len
    segments, one eot id between consecutive documents; the final short
    remainder is discarded."""
    if seg_len < 2:
        raise ValueError(f"segment length must be >= 2, got {seg_len}")
    buf: list[int] = []
    for i, doc in enumerate(store.docs):
        if i > 0:
            buf.append(vocab.eot_id)
        buf.extend(vocab.encode(doc).ids)
        while len(buf) >= seg_len:
            yield TokenSegment(ids=tuple(buf[:seg_len]))
            del buf[:seg_len]


def reverse_segment(seg: TokenSegment) -> TokenSegment:
    if seg.direction != "forward":
        raise ValueError("double reversal")
    return TokenSegment(ids=seg.ids[::-1], direction="backward")


def make_labeled_sentence(
    words: Sequence[str], tags: Sequence[str], vocab: Vocab
) -> LabeledSentence:
    """Attach a subword encoding (words joined by single spaces)."""
    return LabeledSentence(
        words=tuple(words), tags=tuple(tags), encoding=vocab.encode(" ".join(words))
    )


def _normalize_iob1(tags: list[str]) -> list[str]:
    """IOB1 -> IOB2: a span-initial I-X becomes B-X. Non-BIO tags untouched."""
    out = []
    prev_type = None  # type of an immediately preceding B-/I- tag
    for tag in tags:
        if tag.startswith("I-"):
            t = tag[2:]
            if prev_type != t:
                tag = "B-" + t
            prev_type = t
        elif tag.startswith("B-"):
            prev_type = tag[2:]
        else:
            prev_type = None
        out.append(tag)
    return out


def read_conll(
    path: str | Path, vocab: Vocab, tag_column: int
) -> list[LabeledSentence]:
    """Read a CoNLL-format file (words in column 0, tags in tag_column).

    -DOCSTART- rows are skipped; IOB1 tag sequences are normalized to IOB2.
    For CoNLL-2003: POS is column 1, chunk column 2, NER column 3.
    """
    sentences: list[LabeledSentence] = []
    words: list[str] = []
    tags: list[str] = []

    def flush():
        if words:
            sentences.append(
                make_labeled_sentence(words, _normalize_iob1(tags), vocab)
            )
            words.clear()
            tags.clear()

    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            cols = line.split()
            if not cols:
                flush()
                continue
            if cols[0] == "-DOCSTART-":
                flush()
                continue
            if len(cols) <= tag_column:
                raise ValueError(
                    f"{path}:{lineno}: ragged row, need column {tag_column} "
                    f"but found {len(cols)} columns"
                )
            words.append(cols[0])
            tags.append(cols[tag_column])
    flush()
    return sentences


# -- segment cache ------------------------------------------------------------

_SEGS_MAGIC = "SEGS v1"


def save_segments(path: str | Path, segments: Iterable[TokenSegment], seg_len: int) -> None:
    segs = list(segments)
    for s in segs:
        if len(s.ids) != seg_len:
            raise ValueError("segment length mismatch")
        if s.direction != "forward":
            raise ValueError("only forward segments are cached")
    with open(path, "wb") as f:
        f.write(f"{_SEGS_MAGIC} {seg_len} {len(segs)}\n".encode("ascii"))
        for s in segs:
            f.write(struct.pack(f"<{seg_len}I", *s.ids))


def load_segments(path: str | Path) -> list[TokenSegment]:
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").split()
        if header[:2] != _SEGS_MAGIC.split():
            raise ValueError(f"not a segment cache: {path}")
        seg_len, count = int(header[2]), int(header[3])
        out = []
        for _ in range(count):
            raw = f.read(4 * seg_len)
            if len(raw) != 4 * seg_len:
                raise ValueError(f"truncated segment cache: {path}")
            out.append(TokenSegment(ids=struct.unpack(f"<{seg_len}I", raw)))
        return out
