"""Token-classification head over frozen representations.

Two linear layers: p = softmax(W2 ReLU(W1 h + b1) + b2), with the hidden
width equal to the input width. Only the head is ever trained; the LMs that
produced the representations are never touched.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .evaluation import select_best_epoch, span_f1
from .fusion import RepMatrix
from .tensorio import read_named_tensors, write_named_tensors
from .training import TrainConfig, OptState, adamw_step, init_opt_state, lr_at

_PROBE_MAGIC = b"PROBE v1\n"


@dataclass(frozen=True)
class ProbeParams:
    w1: torch.Tensor  # (d, d)
    b1: torch.Tensor  # (d,)
    w2: torch.Tensor  # (c, d)
    b2: torch.Tensor  # (c,)
    label_set: tuple[str, ...]
    dropout_rate: float = 0.1

    def __post_init__(self):
        d = self.w1.shape[1]
        c = len(self.label_set)
        if self.w1.shape != (d, d) or self.b1.shape != (d,):
            raise ValueError("hidden layer must be square (d x d) with a d bias")
        if self.w2.shape != (c, d) or self.b2.shape != (c,):
            raise ValueError(
                f"output layer shape {tuple(self.w2.shape)} does not match "
                f"{c} labels over dim {d}"
            )
        if len(set(self.label_set)) != c:
            raise ValueError("duplicate labels in label_set")

    @property
    def d(self) -> int:
        return self.w1.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.label_set)


def init_probe(
    d: int, label_set: Sequence[str], dropout_rate: float = 0.1, seed: int = 0
) -> ProbeParams:
    gen = torch.Generator().manual_seed(seed)
    c = len(label_set)
    return ProbeParams(
        w1=torch.empty(d, d).normal_(0.0, 0.02, generator=gen),
        b1=torch.zeros(d),
        w2=torch.empty(c, d).normal_(0.0, 0.02, generator=gen),
        b2=torch.zeros(c),
        label_set=tuple(label_set),
        dropout_rate=dropout_rate,
    )


def _dropout(x: torch.Tensor, p: float, gen: torch.Generator | None) -> torch.Tensor:
    if gen is None or p <= 0.0:
        return x
    keep = (torch.rand(x.shape, generator=gen) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


def probe_logits(
    pp: ProbeParams,
    h: torch.Tensor,
    train_mode: bool = False,
    seed: int = 0,
    w1: torch.Tensor | None = None,
    b1: torch.Tensor | None = None,
    w2: torch.Tensor | None = None,
    b2: torch.Tensor | None = None,
) -> torch.Tensor:
    """Class logits for (n, d) or (d,) inputs. Dropout hits the input and the
    hidden activation, train mode only. Tensor overrides exist so the training
    loop can differentiate through candidate weights."""
    if h.shape[-1] != pp.d:
        raise ValueError(f"input dim {h.shape[-1]} != probe dim {pp.d}")
    w1 = pp.w1 if w1 is None else w1
    b1 = pp.b1 if b1 is None else b1
    w2 = pp.w2 if w2 is None else w2
    b2 = pp.b2 if b2 is None else b2
    gen = torch.Generator().manual_seed(seed) if train_mode else None
    h = _dropout(h, pp.dropout_rate if train_mode else 0.0, gen)
    a = torch.relu(h @ w1.T.to(h.dtype) + b1)
    a = _dropout(a, pp.dropout_rate if train_mode else 0.0, gen)
    return a @ w2.T.to(a.dtype) + b2


def probe_forward(
    pp: ProbeParams, h: torch.Tensor, train_mode: bool = False, seed: int = 0
) -> torch.Tensor:
    """Class probabilities: softmax(W2 ReLU(W1 h + b1) + b2)."""
    logits = probe_logits(pp, h, train_mode=train_mode, seed=seed)
    m = logits.amax(dim=-1, keepdim=True)
    e = torch.exp(logits - m)
    return e / e.sum(dim=-1, keepdim=True)


def predict_tags(pp: ProbeParams, reps: RepMatrix) -> tuple[str, ...]:
    """Per-word argmax decoding; ties break to the lowest label index."""
    logits = probe_logits(pp, reps.values)
    idx = np.argmax(logits.detach().numpy(), axis=1)
    return tuple(pp.label_set[i] for i in idx)


def build_label_set(tag_seqs: Sequence[Sequence[str]]) -> tuple[str, ...]:
    return tuple(sorted({t for seq in tag_seqs for t in seq}))


def _stack_words(
    reps: Sequence[RepMatrix], labels: Sequence[Sequence[str]], label_set: Sequence[str]
) -> tuple[torch.Tensor, torch.Tensor]:
    index = {t: i for i, t in enumerate(label_set)}
    xs, ys = [], []
    for rm, tags in zip(reps, labels):
        if rm.rows != len(tags):
            raise ValueError(f"{rm.rows} representation rows for {len(tags)} tags")
        for t in tags:
            if t not in index:
                raise ValueError(f"label outside label_set: {t!r}")
            ys.append(index[t])
        xs.append(rm.values)
    return torch.cat(xs, dim=0), torch.tensor(ys, dtype=torch.long)


def _xent(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    lse = torch.logsumexp(logits, dim=-1)
    picked = logits.gather(1, y.unsqueeze(1)).squeeze(1)
    return (lse - picked).mean()


def train_probe(
    reps: Sequence[RepMatrix],
    labels: Sequence[Sequence[str]],
    cfg: TrainConfig,
    epochs: int = 30,
    dev_reps: Sequence[RepMatrix] | None = None,
    dev_labels: Sequence[Sequence[str]] | None = None,
    dev_scorer: Callable[[Sequence[Sequence[str]], Sequence[Sequence[str]]], float] = span_f1,
    label_set: Sequence[str] | None = None,
    dropout_rate: float = 0.1,
) -> tuple[ProbeParams, list[tuple[int, float]]]:
    """Mini-batch AdamW on word-level cross-entropy over frozen reps.

    The learning rate follows cfg.schedule stretched over all epochs. With a
    dev set, every epoch is scored with dev_scorer (span micro-F1 by default)
    and the parameters from the best epoch are returned, ties to the earliest;
    otherwise the final epoch wins. Returns (params, per-epoch dev history).
    """
    if label_set is None:
        label_set = build_label_set(labels)
    X, y = _stack_words(reps, labels, label_set)
    d = X.shape[1]
    pp = init_probe(d, label_set, dropout_rate=dropout_rate, seed=cfg.seed)
    state = init_opt_state({"w1": pp.w1, "b1": pp.b1, "w2": pp.w2, "b2": pp.b2})
    n = X.shape[0]
    steps_per_epoch = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    sched = replace(cfg, total_steps=max(1, epochs * steps_per_epoch))
    if dev_reps is not None and dev_labels is not None:
        _stack_words(dev_reps, dev_labels, label_set)  # validate dev labels up front
    gen = torch.Generator().manual_seed(cfg.seed)

    history: list[tuple[int, float]] = []
    snapshots: dict[int, ProbeParams] = {}
    step = 0
    for epoch in range(epochs):
        order = torch.randperm(n, generator=gen)
        for k in range(steps_per_epoch):
            idx = order[k * cfg.batch_size : (k + 1) * cfg.batch_size]
            if len(idx) == 0:
                continue
            weights = {
                "w1": pp.w1.detach().requires_grad_(True),
                "b1": pp.b1.detach().requires_grad_(True),
                "w2": pp.w2.detach().requires_grad_(True),
                "b2": pp.b2.detach().requires_grad_(True),
            }
            logits = probe_logits(
                pp, X[idx], train_mode=True, seed=int(torch.randint(2**31 - 1, (1,), generator=gen)),
                **weights,
            )
            loss = _xent(logits, y[idx])
            grads = torch.autograd.grad(loss, list(weights.values()))
            new_weights, state = adamw_step(
                {k_: w.detach() for k_, w in weights.items()},
                dict(zip(weights.keys(), grads)),
                state,
                lr_at(step, sched),
                cfg,
            )
            pp = replace(pp, w1=new_weights["w1"], b1=new_weights["b1"],
                         w2=new_weights["w2"], b2=new_weights["b2"])
            step += 1
        if dev_reps is not None and dev_labels is not None:
            preds = [list(predict_tags(pp, rm)) for rm in dev_reps]
            score = dev_scorer([list(t) for t in dev_labels], preds)
            history.append((epoch, score))
            snapshots[epoch] = pp
    if history:
        pp = snapshots[select_best_epoch(history)]
    return pp, history


# -- persistence ----------------------------------------------------------------


def save_probe(pp: ProbeParams, path: str | Path) -> None:
    meta = {
        "d": pp.d,
        "c": pp.n_classes,
        "label_set": list(pp.label_set),
        "dropout": pp.dropout_rate,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_PROBE_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        write_named_tensors(f, {"w1": pp.w1, "b1": pp.b1, "w2": pp.w2, "b2": pp.b2})


def load_probe(path: str | Path) -> ProbeParams:
    with open(path, "rb") as f:
        if f.read(len(_PROBE_MAGIC)) != _PROBE_MAGIC:
            raise ValueError(f"not a probe file: {path}")
        raw = f.read(8)
        if len(raw) != 8:
            raise ValueError(f"corrupt probe file: {path}")
        (blob_len,) = struct.unpack("<Q", raw)
        blob = f.read(blob_len)
        if len(blob) != blob_len:
            raise ValueError(f"corrupt probe file: {path}")
        meta = json.loads(blob.decode("utf-8"))
        tensors = read_named_tensors(f, 4, what="probe file")
    return ProbeParams(
        w1=tensors["w1"],
        b1=tensors["b1"],
        w2=tensors["w2"],
        b2=tensors["b2"],
        label_set=tuple(meta["label_set"]),
        dropout_rate=meta["dropout"],
    )
