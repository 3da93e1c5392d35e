"""Central finite-difference gradient oracle (float64), independent of
autograd: perturbs every parameter entry one at a time."""

from __future__ import annotations

from typing import Callable

import torch


def central_diff_grads(
    loss_fn: Callable[[dict[str, torch.Tensor]], torch.Tensor],
    params: dict[str, torch.Tensor],
    h: float = 1e-4,
) -> dict[str, torch.Tensor]:
    fd: dict[str, torch.Tensor] = {}
    work = {k: v.clone() for k, v in params.items()}
    for name, tensor in work.items():
        grad = torch.zeros_like(tensor)
        flat = tensor.view(-1)
        gflat = grad.view(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            up = float(loss_fn(work))
            flat[i] = orig - h
            down = float(loss_fn(work))
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        fd[name] = grad
    return fd


def max_rel_error(
    analytic: dict[str, torch.Tensor], fd: dict[str, torch.Tensor]
) -> float:
    worst = 0.0
    for name in analytic:
        a = analytic[name].double()
        b = fd[name]
        denom = torch.maximum(a.abs() + b.abs(), torch.tensor(1e-6, dtype=torch.float64))
        worst = max(worst, float(((a - b).abs() / denom).max()))
    return worst
