"""Decoder-only causal transformer, written functionally over a dict of named
parameter tensors.

GPT-2-style: learned absolute positions, pre-layer-norm blocks, GELU MLP, and
the output projection tied to the token embedding. The causal mask makes row i
of the hidden-state matrix a function of ids[0..i] only; the backward LM is the
same architecture run on reversed ids (see fusion for realignment).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import torch

Direction = Literal["forward", "backward"]

LN_EPS = 1e-5
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 256
    dropout_rate: float = 0.1
    direction: Direction = "forward"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "max_seq_len": self.max_seq_len,
            "dropout_rate": self.dropout_rate,
            "direction": self.direction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# The paper-scale preset (GPT-2 base shape); not used by the test suite.
GPT2_BASE = dict(d_model=768, n_layers=12, n_heads=12, d_ff=3072, max_seq_len=1024)

Parameters = dict[str, torch.Tensor]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Named tensor shapes, in canonical (serialization) order."""
    d, ff = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_seq_len, d),
    }
    for i in range(cfg.n_layers):
        p = f"h{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for name in ("wq", "wk", "wv", "wo"):
            shapes[p + "attn." + name] = (d, d)
        for name in ("bq", "bk", "bv", "bo"):
            shapes[p + "attn." + name] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "mlp.w_in"] = (ff, d)
        shapes[p + "mlp.b_in"] = (ff,)
        shapes[p + "mlp.w_out"] = (d, ff)
        shapes[p + "mlp.b_out"] = (d,)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> Parameters:
    """Normal(0, 0.02^2) weights, zero biases, unit layer-norm scales.

    Projections that write into the residual stream (attn.wo, mlp.w_out) are
    scaled down by 1/sqrt(2*n_layers).
    """
    gen = torch.Generator().manual_seed(seed)
    resid_scale = 1.0 / math.sqrt(2 * cfg.n_layers)
    params: Parameters = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("g",):
            t = torch.ones(shape)
        elif leaf.startswith("b") and len(shape) == 1:
            t = torch.zeros(shape)
        else:
            t = torch.empty(shape).normal_(0.0, INIT_STD, generator=gen)
            if leaf in ("wo", "w_out"):
                t = t * resid_scale
        params[name] = t
    return params


def _dropout(x: torch.Tensor, p: float, gen: torch.Generator | None) -> torch.Tensor:
    if gen is None or p <= 0.0:
        return x
    keep = (torch.rand(x.shape, generator=gen) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


def _layer_norm(x: torch.Tensor, g: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, keepdim=True, unbiased=False)
    return (x - mu) / torch.sqrt(var + LN_EPS) * g + b


def _gelu(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def _softmax_rows(scores: torch.Tensor) -> torch.Tensor:
    # max-subtraction keeps masked (-inf) entries at exactly zero weight
    m = scores.amax(dim=-1, keepdim=True)
    e = torch.exp(scores - m)
    return e / e.sum(dim=-1, keepdim=True)


def hidden_states_batch(
    params: Parameters,
    cfg: ModelConfig,
    ids: torch.Tensor,
    train_mode: bool = False,
    seed: int = 0,
) -> torch.Tensor:
    """Final-block hidden states (before the final layer norm) for a (B, L)
    batch of token ids. Row (b, i) depends on ids[b, 0..i] only."""
    if ids.dim() != 2:
        raise ValueError(f"expected (batch, length) ids, got shape {tuple(ids.shape)}")
    B, L = ids.shape
    if L > cfg.max_seq_len:
        raise ValueError(f"sequence too long: {L} > max_seq_len={cfg.max_seq_len}")
    if L > 0 and (ids.max() >= cfg.vocab_size or ids.min() < 0):
        raise ValueError("token id out of range")
    gen = torch.Generator().manual_seed(seed) if train_mode else None
    p = cfg.dropout_rate if train_mode else 0.0
    d, H = cfg.d_model, cfg.n_heads
    hd = d // H

    x = params["tok_emb"][ids] + params["pos_emb"][:L]
    x = _dropout(x, p, gen)
    mask = torch.full((L, L), float("-inf"), dtype=x.dtype).triu(1)
    for i in range(cfg.n_layers):
        pre = f"h{i}."
        h = _layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        q = h @ params[pre + "attn.wq"].T + params[pre + "attn.bq"]
        k = h @ params[pre + "attn.wk"].T + params[pre + "attn.bk"]
        v = h @ params[pre + "attn.wv"].T + params[pre + "attn.bv"]
        q = q.view(B, L, H, hd).transpose(1, 2)
        k = k.view(B, L, H, hd).transpose(1, 2)
        v = v.view(B, L, H, hd).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(hd) + mask
        att = _softmax_rows(scores)
        att = _dropout(att, p, gen)
        y = (att @ v).transpose(1, 2).reshape(B, L, d)
        y = y @ params[pre + "attn.wo"].T + params[pre + "attn.bo"]
        x = x + _dropout(y, p, gen)
        h = _layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        h = _gelu(h @ params[pre + "mlp.w_in"].T + params[pre + "mlp.b_in"])
        h = h @ params[pre + "mlp.w_out"].T + params[pre + "mlp.b_out"]
        x = x + _dropout(h, p, gen)
    return x


def forward_hidden(
    params: Parameters,
    ids: Sequence[int] | torch.Tensor,
    cfg: ModelConfig,
    train_mode: bool = False,
    seed: int = 0,
) -> torch.Tensor:
    """Per-position hidden states (n, d_model) for one id sequence."""
    t = torch.as_tensor(ids, dtype=torch.long).reshape(1, -1)
    return hidden_states_batch(params, cfg, t, train_mode=train_mode, seed=seed)[0]


def final_norm(params: Parameters, hidden: torch.Tensor) -> torch.Tensor:
    return _layer_norm(hidden, params["ln_f.g"], params["ln_f.b"])


def lm_logits(params: Parameters, hidden: torch.Tensor) -> torch.Tensor:
    """Next-token logits via the tied embedding: ln_f(hidden) @ tok_emb.T."""
    if hidden.shape[-1] != params["tok_emb"].shape[1]:
        raise ValueError(
            f"hidden dim {hidden.shape[-1]} != d_model {params['tok_emb'].shape[1]}"
        )
    return final_norm(params, hidden) @ params["tok_emb"].T.to(hidden.dtype)


def loss_next_token(
    logits: torch.Tensor, targets: Sequence[int] | torch.Tensor
) -> torch.Tensor:
    """Mean -log softmax(logits[i])[targets[i]] over positions 0..n-2.

    targets[i] must be the id at position i+1; the last logit row has no
    target and is excluded. Computed via log-sum-exp.
    """
    t = torch.as_tensor(targets, dtype=torch.long)
    if logits.dim() != 2 or t.dim() != 1:
        raise ValueError("expected (n, vocab) logits and flat targets")
    if len(t) != logits.shape[0] - 1:
        raise ValueError(
            f"length mismatch: {logits.shape[0]} logit rows need "
            f"{logits.shape[0] - 1} targets, got {len(t)}"
        )
    rows = logits[:-1]
    lse = torch.logsumexp(rows, dim=-1)
    picked = rows.gather(1, t.unsqueeze(1)).squeeze(1)
    return (lse - picked).mean()


def batch_loss(
    params: Parameters,
    cfg: ModelConfig,
    ids: torch.Tensor,
    train_mode: bool = False,
    seed: int = 0,
) -> torch.Tensor:
    """Mean next-token loss over a (B, L) batch (all B*(L-1) positions)."""
    hidden = hidden_states_batch(params, cfg, ids, train_mode=train_mode, seed=seed)
    logits = lm_logits(params, hidden)
    V = logits.shape[-1]
    rows = logits[:, :-1, :].reshape(-1, V)
    targets = ids[:, 1:].reshape(-1)
    lse = torch.logsumexp(rows, dim=-1)
    picked = rows.gather(1, targets.unsqueeze(1)).squeeze(1)
    return (lse - picked).mean()
