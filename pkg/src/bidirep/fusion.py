"""Per-token representation extraction and forward/backward fusion.

The backward model reads the reversed sequence; realignment maps its hidden
row at reversed position n-1-i back to original index i, so the realigned row
i summarizes ids[i..n-1]. Concatenating the forward and realigned backward
rows gives every token a view of the whole sequence: dimension is the sum of
the two hidden sizes, and the two LMs must share a vocabulary.

Forward representations may also be loaded from a dump file ("black-box"
mode) and fused with a locally-run backward model.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import model as M
from .tokenizer import Encoding
from .training import ModelCheckpoint

_REPS_MAGIC = "REPS v1"

Provenance = str  # forward | backward-aligned | fused | external


@dataclass(frozen=True)
class RepMatrix:
    """One representation row per token (or per word after pooling)."""

    values: torch.Tensor
    provenance: Provenance
    vocab_hash: str | None = None

    def __post_init__(self):
        if self.values.dim() != 2:
            raise ValueError(f"expected a matrix, got shape {tuple(self.values.shape)}")
        if not torch.isfinite(self.values).all():
            raise ValueError("non-finite representation")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def extract_forward(ckpt: ModelCheckpoint, ids: Sequence[int]) -> RepMatrix:
    """Final-block hidden states after the final layer norm; row i is a
    function of ids[0..i] only."""
    if ckpt.direction != "forward":
        raise ValueError(f"expected a forward checkpoint, got {ckpt.direction!r}")
    hidden = M.forward_hidden(ckpt.params, ids, ckpt.config, train_mode=False)
    return RepMatrix(
        values=M.final_norm(ckpt.params, hidden),
        provenance="forward",
        vocab_hash=ckpt.vocab_hash,
    )


def extract_backward(ckpt: ModelCheckpoint, ids: Sequence[int]) -> RepMatrix:
    """Run the backward model on reversed ids and realign rows to original
    order; row i is a function of ids[i..n-1] only."""
    if ckpt.direction != "backward":
        raise ValueError(f"expected a backward checkpoint, got {ckpt.direction!r}")
    rev = list(ids)[::-1]
    hidden = M.forward_hidden(ckpt.params, rev, ckpt.config, train_mode=False)
    aligned = M.final_norm(ckpt.params, hidden).flip(0)
    return RepMatrix(
        values=aligned, provenance="backward-aligned", vocab_hash=ckpt.vocab_hash
    )


def concat_reps(f: RepMatrix, b: RepMatrix) -> RepMatrix:
    """Row-wise concatenation, forward block first; requires a shared vocab."""
    if f.provenance not in ("forward", "external"):
        raise ValueError(f"left operand must be forward/external, got {f.provenance!r}")
    if b.provenance != "backward-aligned":
        raise ValueError(f"right operand must be backward-aligned, got {b.provenance!r}")
    if f.rows != b.rows:
        raise ValueError(f"row mismatch: {f.rows} vs {b.rows}")
    if (
        f.vocab_hash is not None
        and b.vocab_hash is not None
        and f.vocab_hash != b.vocab_hash
    ):
        raise ValueError("vocabulary not shared")
    return RepMatrix(
        values=torch.cat([f.values, b.values], dim=1),
        provenance="fused",
        vocab_hash=f.vocab_hash or b.vocab_hash,
    )


def word_pool(reps: RepMatrix, enc: Encoding, mode: str = "first") -> RepMatrix:
    """Pool subword rows to one row per word.

    mode="first" takes the row at each word's first subword; mode="mean"
    averages the word's subword rows.
    """
    if reps.rows != len(enc.ids):
        raise ValueError(
            f"representation rows ({reps.rows}) != token count ({len(enc.ids)})"
        )
    starts = list(enc.word_starts)
    for w in starts:
        if not 0 <= w < reps.rows:
            raise ValueError(f"word start {w} out of range")
    if not starts:
        values = reps.values[:0]
    elif mode == "first":
        values = reps.values[torch.tensor(starts, dtype=torch.long)]
    elif mode == "mean":
        ends = starts[1:] + [reps.rows]
        values = torch.stack(
            [reps.values[s:e].mean(dim=0) for s, e in zip(starts, ends)]
        )
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return RepMatrix(values=values, provenance=reps.provenance, vocab_hash=reps.vocab_hash)


def dump_reps(reps: RepMatrix, path: str | Path) -> None:
    arr = reps.values.detach().to(torch.float32).contiguous().numpy()
    with open(path, "wb") as f:
        f.write(f"{_REPS_MAGIC} {arr.shape[0]} {arr.shape[1]}\n".encode("ascii"))
        f.write(arr.astype("<f4").tobytes())


def load_reps(path: str | Path, provenance: Provenance = "external") -> RepMatrix:
    with open(path, "rb") as f:
        header = f.readline().decode("ascii", errors="replace").split()
        if header[:2] != _REPS_MAGIC.split() or len(header) != 4:
            raise ValueError(f"not a representation dump: {path}")
        rows, dim = int(header[2]), int(header[3])
        raw = f.read(4 * rows * dim + 1)
        if len(raw) != 4 * rows * dim:
            raise ValueError(f"corrupt representation dump (size mismatch): {path}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(rows, dim)
    if not np.isfinite(arr).all():
        raise ValueError("non-finite representation")
    return RepMatrix(values=torch.from_numpy(arr.copy()), provenance=provenance)


def load_external_reps(path: str | Path) -> RepMatrix:
    """Forward representations obtained elsewhere (e.g. via an API dump)."""
    return load_reps(path, provenance="external")
