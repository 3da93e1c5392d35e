"""LM pretraining: reverse-mode gradients, AdamW, LR schedules, the training
loop for either direction, and checkpoint persistence."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import torch

from . import model as M
from .corpus import DocumentStore, TokenSegment, reverse_segment, segment_stream
from .model import Direction, ModelConfig, Parameters
from .tensorio import read_named_tensors, write_named_tensors
from .tokenizer import Vocab

_CKPT_MAGIC = b"BLMCKPT v1\n"


class DivergenceError(RuntimeError):
    """Raised when training hits a non-finite loss.

    Carries the last checkpoint taken before divergence (may be None if the
    very first step diverged)."""

    def __init__(self, step: int, last_good: "ModelCheckpoint | None"):
        super().__init__(f"divergence at step {step}")
        self.step = step
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    total_steps: int = 1000
    base_lr: float = 3e-4
    schedule: str = "cosine"  # cosine | linear_to_zero
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip_norm: float = 1.0
    seed: int = 0
    eval_every: int = 50
    warmup_steps: int = 0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.schedule not in ("cosine", "linear_to_zero"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


# Presets as reported for the paper-scale runs; the desk-scale defaults above
# are what the tests use.
PAPER_PRETRAIN = TrainConfig(batch_size=512, base_lr=2e-5, schedule="cosine")
PAPER_PROBE = TrainConfig(batch_size=32, base_lr=1e-3, schedule="linear_to_zero")


@dataclass(frozen=True)
class ModelCheckpoint:
    config: ModelConfig
    params: Parameters
    vocab_hash: str
    step: int
    direction: Direction

    def __post_init__(self):
        if self.direction != self.config.direction:
            raise ValueError(
                f"checkpoint direction {self.direction!r} does not match "
                f"config direction {self.config.direction!r}"
            )


def gradients(
    params: Parameters,
    cfg: ModelConfig,
    batch: Sequence[TokenSegment],
    train_mode: bool = False,
    seed: int = 0,
) -> tuple[dict[str, torch.Tensor], float]:
    """Gradient of the mean next-token loss over the batch w.r.t. every
    parameter tensor, plus the loss itself."""
    if not batch:
        raise ValueError("empty batch")
    lengths = {len(s.ids) for s in batch}
    if len(lengths) != 1:
        raise ValueError(f"segments of unequal length in batch: {sorted(lengths)}")
    ids = torch.tensor([s.ids for s in batch], dtype=torch.long)
    leaves = {k: v.detach().requires_grad_(True) for k, v in params.items()}
    loss = M.batch_loss(leaves, cfg, ids, train_mode=train_mode, seed=seed)
    if not torch.isfinite(loss):
        raise DivergenceError(step=-1, last_good=None)
    grads = torch.autograd.grad(loss, list(leaves.values()))
    return dict(zip(leaves.keys(), grads)), float(loss.detach())


@dataclass
class OptState:
    step: int
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]


def init_opt_state(params: Parameters) -> OptState:
    return OptState(
        step=0,
        m={k: torch.zeros_like(t) for k, t in params.items()},
        v={k: torch.zeros_like(t) for k, t in params.items()},
    )


def clip_global_norm(
    grads: dict[str, torch.Tensor], max_norm: float
) -> dict[str, torch.Tensor]:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


def adamw_step(
    params: Parameters,
    grads: dict[str, torch.Tensor],
    state: OptState,
    lr: float,
    cfg: TrainConfig,
) -> tuple[Parameters, OptState]:
    """One decoupled-weight-decay Adam step with bias correction.

    Weight decay is applied to the weights directly (w -= lr*wd*w), never
    through the gradients; global-norm clipping runs first when configured.
    """
    if set(grads) != set(params):
        raise ValueError("gradient names do not match parameter names")
    for k in params:
        if grads[k].shape != params[k].shape:
            raise ValueError(f"gradient shape mismatch for {k}")
    if cfg.grad_clip_norm > 0:
        grads = clip_global_norm(grads, cfg.grad_clip_norm)
    b1, b2 = cfg.betas
    t = state.step + 1
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params: Parameters = {}
    new_m: dict[str, torch.Tensor] = {}
    new_v: dict[str, torch.Tensor] = {}
    for k, w in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        update = (m / bc1) / (torch.sqrt(v / bc2) + cfg.eps)
        new_params[k] = w - lr * update - lr * cfg.weight_decay * w
        new_m[k] = m
        new_v[k] = v
    return new_params, OptState(step=t, m=new_m, v=new_v)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Scheduled learning rate; steps past total_steps clamp to the final value."""
    step = min(step, cfg.total_steps)
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    if cfg.schedule == "cosine":
        return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * step / cfg.total_steps))
    return cfg.base_lr * (1.0 - step / cfg.total_steps)


def _mix_seed(seed: int, step: int) -> int:
    return (seed * 1000003 + step) % (2**31 - 1)


def train_lm(
    direction: Direction,
    store: DocumentStore | None,
    vocab: Vocab,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seg_len: int = 128,
    segments: Sequence[TokenSegment] | None = None,
    log_path: str | Path | None = None,
    log_fn: Callable[[int, float, float], None] | None = None,
) -> ModelCheckpoint:
    """Pretrain one causal LM with the next-token objective.

    direction="backward" trains on element-wise reversed segments. Batches
    cycle through the seed-shuffled segment stream in order; loss and lr are
    logged every eval_every steps. A non-finite loss aborts with the last
    checkpoint taken at a logging boundary.

    `segments` may carry a pre-tokenized forward stream (e.g. from the segment
    cache) to skip re-tokenizing the store.
    """
    if segments is None:
        if store is None:
            raise ValueError("need either a document store or pre-cut segments")
        segments = list(segment_stream(store, vocab, seg_len))
    if len(segments) < train_cfg.batch_size:
        raise ValueError(
            f"not enough segments for one batch: {len(segments)} "
            f"< batch_size {train_cfg.batch_size}"
        )
    model_cfg = dataclasses.replace(model_cfg, direction=direction)
    if direction == "backward":
        segments = [reverse_segment(s) for s in segments]
    params = M.init_params(model_cfg, seed=_mix_seed(train_cfg.seed, 0xBEE))
    state = init_opt_state(params)
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None

    def snapshot(step: int) -> ModelCheckpoint:
        return ModelCheckpoint(
            config=model_cfg,
            params={k: t.clone() for k, t in params.items()},
            vocab_hash=vocab.hash,
            step=step,
            direction=direction,
        )

    last_good: ModelCheckpoint | None = None
    try:
        pos = 0
        train_mode = model_cfg.dropout_rate > 0
        for step in range(train_cfg.total_steps):
            batch = [
                segments[(pos + i) % len(segments)]
                for i in range(train_cfg.batch_size)
            ]
            pos = (pos + train_cfg.batch_size) % len(segments)
            try:
                grads, loss = gradients(
                    params,
                    model_cfg,
                    batch,
                    train_mode=train_mode,
                    seed=_mix_seed(train_cfg.seed, step),
                )
            except DivergenceError:
                raise DivergenceError(step=step, last_good=last_good) from None
            lr = lr_at(step, train_cfg)
            params, state = adamw_step(params, grads, state, lr, train_cfg)
            if step % train_cfg.eval_every == 0 or step == train_cfg.total_steps - 1:
                last_good = snapshot(step + 1)
                if log_file:
                    log_file.write(
                        json.dumps({"step": step, "loss": loss, "lr": lr}) + "\n"
                    )
                if log_fn:
                    log_fn(step, loss, lr)
    finally:
        if log_file:
            log_file.close()
    return snapshot(train_cfg.total_steps)


# -- checkpoint persistence ----------------------------------------------------


def save_checkpoint(ckpt: ModelCheckpoint, path: str | Path) -> None:
    meta = {
        "config": ckpt.config.to_dict(),
        "direction": ckpt.direction,
        "step": ckpt.step,
        "vocab_hash": ckpt.vocab_hash,
        "n_tensors": len(ckpt.params),
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        write_named_tensors(f, ckpt.params)


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    with open(path, "rb") as f:
        magic = f.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file (bad magic): {path}")
        raw = f.read(8)
        if len(raw) != 8:
            raise ValueError(f"corrupt checkpoint: {path}")
        (blob_len,) = struct.unpack("<Q", raw)
        blob = f.read(blob_len)
        if len(blob) != blob_len:
            raise ValueError(f"corrupt checkpoint: {path}")
        meta = json.loads(blob.decode("utf-8"))
        cfg = ModelConfig.from_dict(meta["config"])
        try:
            params = read_named_tensors(f, meta["n_tensors"], what="checkpoint")
        except ValueError as e:
            raise ValueError(f"corrupt checkpoint: {path}: {e}") from None
    expected = M.param_shapes(cfg)
    if set(params) != set(expected):
        raise ValueError(f"corrupt checkpoint: {path}: tensor names do not match config")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ValueError(f"corrupt checkpoint: {path}: bad shape for {name}")
    return ModelCheckpoint(
        config=cfg,
        params=params,
        vocab_hash=meta["vocab_hash"],
        step=meta["step"],
        direction=meta["direction"],
    )
