"""Byte-level BPE tokenizer shared by the forward and backward LMs.

The tokenizer operates on raw UTF-8 bytes, so every input is encodable and
encode/decode round-trips exactly. Text is split into *pieces* before merging:
a piece is either a word (an optional single leading space followed by a
non-whitespace run) or a residual whitespace run. Merges never cross piece
boundaries. Word pieces drive the word alignment used for token-level
classification later in the pipeline.
"""

from __future__ import annotations

import base64
import hashlib
import heapq
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

# Word piece = optional single leading space + non-space run. Multi-space /
# newline / tab runs become their own whitespace pieces, except the space
# directly before a word, which sticks to the word (GPT-2 convention).
_PIECE_RE = re.compile(rb" ?\S+|\s+(?!\S)|\s+")

N_BYTE_TOKENS = 256
EOT_ID = 256  # reserved separator; never produced by merging
N_RESERVED = 257  # byte tokens + eot

_VOCAB_MAGIC = "BPEVOCAB v1"


@dataclass(frozen=True)
class Encoding:
    """Token ids plus the id-index where each whitespace-delimited word starts."""

    ids: tuple[int, ...]
    word_starts: tuple[int, ...]


class Vocab:
    """Immutable byte-level BPE vocabulary (merge rules in training order).

    Ids are dense: 0-255 are the raw bytes, 256 is the end-of-text separator,
    and merge k produces id 257+k.
    """

    def __init__(self, merges: Iterable[tuple[bytes, bytes]]):
        self.merges: tuple[tuple[bytes, bytes], ...] = tuple(
            (bytes(a), bytes(b)) for a, b in merges
        )
        self.eot_id = EOT_ID
        # token id -> raw bytes (eot has none and decodes to b"")
        self._token_bytes: list[bytes] = [bytes([i]) for i in range(N_BYTE_TOKENS)]
        self._token_bytes.append(b"")
        self.id_of: dict[bytes, int] = {bytes([i]): i for i in range(N_BYTE_TOKENS)}
        self._ranks: dict[tuple[bytes, bytes], int] = {}
        for k, (a, b) in enumerate(self.merges):
            tok = a + b
            self._token_bytes.append(tok)
            self.id_of[tok] = N_RESERVED + k
            self._ranks[(a, b)] = k
        self._piece_cache: dict[bytes, tuple[int, ...]] = {}

    @property
    def size(self) -> int:
        return N_RESERVED + len(self.merges)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self.merges == other.merges

    def __repr__(self) -> str:
        return f"Vocab(size={self.size})"

    # -- encode / decode ------------------------------------------------------

    def _encode_piece(self, piece: bytes) -> tuple[int, ...]:
        cached = self._piece_cache.get(piece)
        if cached is not None:
            return cached
        parts = [piece[i : i + 1] for i in range(len(piece))]
        while len(parts) > 1:
            best = min(
                zip(parts, parts[1:]),
                key=lambda p: self._ranks.get(p, len(self._ranks)),
            )
            if best not in self._ranks:
                break
            parts = _merge_pair(parts, best[0], best[1])
        ids = tuple(self.id_of[p] for p in parts)
        self._piece_cache[piece] = ids
        return ids

    def encode(self, text: str | bytes) -> Encoding:
        """Tokenize text; never emits the eot id. Total on any input."""
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        ids: list[int] = []
        word_starts: list[int] = []
        for m in _PIECE_RE.finditer(data):
            piece = m.group()
            if not piece.isspace():
                word_starts.append(len(ids))
            ids.extend(self._encode_piece(piece))
        return Encoding(ids=tuple(ids), word_starts=tuple(word_starts))

    def decode_bytes(self, ids: Iterable[int]) -> bytes:
        out = []
        for i in ids:
            if not 0 <= i < self.size:
                raise ValueError(f"unknown id {i}")
            out.append(self._token_bytes[i])
        return b"".join(out)

    def decode(self, ids: Iterable[int]) -> str:
        """Inverse of encode on encode's outputs (exact for str inputs)."""
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    # -- persistence ----------------------------------------------------------

    def serialize(self) -> str:
        lines = [f"{_VOCAB_MAGIC} {self.size}", f"EOT {self.eot_id}"]
        for a, b in self.merges:
            lines.append(
                base64.b64encode(a).decode("ascii")
                + " "
                + base64.b64encode(b).decode("ascii")
            )
        return "\n".join(lines) + "\n"

    @property
    def hash(self) -> str:
        """sha256 of the canonical serialization; fusion requires equal hashes."""
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.serialize(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        lines = text.splitlines()
        if not lines or not lines[0].startswith(_VOCAB_MAGIC + " "):
            raise ValueError(f"not a vocab file: {path}")
        size = int(lines[0].split()[2])
        if len(lines) < 2 or not lines[1].startswith("EOT "):
            raise ValueError(f"vocab file missing EOT line: {path}")
        if int(lines[1].split()[1]) != EOT_ID:
            raise ValueError(f"unsupported eot id in {path}")
        merges = []
        for line in lines[2:]:
            if not line:
                continue
            a64, b64 = line.split(" ")
            merges.append((base64.b64decode(a64), base64.b64decode(b64)))
        vocab = cls(merges)
        if vocab.size != size:
            raise ValueError(
                f"vocab file corrupt: header says {size} ids, found {vocab.size}"
            )
        return vocab


def _merge_pair(parts: list[bytes], a: bytes, b: bytes) -> list[bytes]:
    """Merge all non-overlapping (a, b) occurrences, left to right."""
    out = []
    i = 0
    while i < len(parts):
        if i + 1 < len(parts) and parts[i] == a and parts[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(parts[i])
            i += 1
    return out


def _iter_pieces(corpus: str | bytes | Iterable[str]) -> Iterator[bytes]:
    if isinstance(corpus, (str, bytes)):
        chunks: Iterable[str | bytes] = [corpus]
    else:
        chunks = corpus
    for chunk in chunks:
        data = chunk.encode("utf-8") if isinstance(chunk, str) else bytes(chunk)
        for m in _PIECE_RE.finditer(data):
            yield m.group()


def train_bpe(corpus: str | bytes | Iterable[str], vocab_size: int, seed: int = 0) -> Vocab:
    """Train byte-level BPE merges on a text corpus.

    Greedy: each step merges the currently most frequent adjacent pair, ties
    broken by lexicographic byte order of the pair. Fully deterministic; the
    seed argument is accepted for interface uniformity but never consulted.
    """
    if vocab_size < N_RESERVED:
        raise ValueError("vocab too small")
    piece_counts = Counter(_iter_pieces(corpus))
    if not piece_counts:
        raise ValueError("empty corpus")

    words: list[list[bytes]] = []
    freqs: list[int] = []
    for piece, n in piece_counts.items():
        words.append([piece[i : i + 1] for i in range(len(piece))])
        freqs.append(n)

    pair_counts: Counter[tuple[bytes, bytes]] = Counter()
    pair_where: dict[tuple[bytes, bytes], set[int]] = defaultdict(set)
    for w, (toks, n) in enumerate(zip(words, freqs)):
        for pair in zip(toks, toks[1:]):
            pair_counts[pair] += n
            pair_where[pair].add(w)

    # Lazy max-heap: stale entries are dropped when popped.
    heap = [(-c, p) for p, c in pair_counts.items()]
    heapq.heapify(heap)

    merges: list[tuple[bytes, bytes]] = []
    n_merges = vocab_size - N_RESERVED
    while len(merges) < n_merges:
        best = None
        while heap:
            neg, pair = heapq.heappop(heap)
            if pair_counts.get(pair) == -neg:
                best = pair
                break
        if best is None:
            raise ValueError(
                f"corpus too small: only {N_RESERVED + len(merges)} of "
                f"{vocab_size} vocab entries are reachable"
            )
        a, b = best
        merges.append(best)
        touched: set[tuple[bytes, bytes]] = set()
        for w in sorted(pair_where[best]):
            toks = words[w]
            if (a, b) not in zip(toks, toks[1:]):
                continue  # stale membership
            n = freqs[w]
            for pair in zip(toks, toks[1:]):
                pair_counts[pair] -= n
                touched.add(pair)
            new_toks = _merge_pair(toks, a, b)
            words[w] = new_toks
            for pair in zip(new_toks, new_toks[1:]):
                pair_counts[pair] += n
                pair_where[pair].add(w)
                touched.add(pair)
        for pair in touched:
            c = pair_counts[pair]
            if c <= 0:
                del pair_counts[pair]
            else:
                heapq.heappush(heap, (-c, pair))
    return Vocab(merges)
