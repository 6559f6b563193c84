"""AdamW with global-norm clipping, operating on Tensor leaves in place."""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from .errors import NonFiniteError
from .tensor import Tensor


def grad_global_norm(grads: Mapping[Tensor, np.ndarray] | Sequence[np.ndarray]) -> float:
    values = grads.values() if isinstance(grads, Mapping) else grads
    total = 0.0
    for g in values:
        g = np.asarray(g, dtype=np.float64)
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    return math.sqrt(total)


def clip_by_global_norm(
    grads: Mapping[Tensor, np.ndarray], max_norm: float
) -> tuple[dict[Tensor, np.ndarray], float]:
    """Returns (clipped grads, pre-clip norm). Grads under the threshold are passed through untouched."""
    norm = grad_global_norm(grads)
    if not math.isfinite(norm):
        raise NonFiniteError("gradient norm is not finite", norm=norm)
    if max_norm is None or max_norm <= 0 or norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {p: g * scale for p, g in grads.items()}, norm


class AdamW:
    """Decoupled weight decay (Loshchilov & Hutter), defaults as in torch.optim.AdamW."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.exp_avg = {id(p): np.zeros_like(p.data) for p in self.params}
        self.exp_avg_sq = {id(p): np.zeros_like(p.data) for p in self.params}

    def step(self, grads: Mapping[Tensor, np.ndarray]) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.step_count
        bias2 = 1.0 - b2**self.step_count
        for p in self.params:
            g = grads.get(p)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteError("NaN/Inf gradient", param=p.name)
            m = self.exp_avg[id(p)]
            v = self.exp_avg_sq[id(p)]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            # parameters are replaced, never mutated: older tapes may still reference them
            data = p.data * (1.0 - self.lr * self.weight_decay) if self.weight_decay else p.data
            denom = np.sqrt(v / bias2) + self.eps
            p.data = data - (self.lr / bias1) * m / denom
