"""AdamW with decoupled weight decay.

Defaults follow the training recipe used throughout the repo
(lr 1e-4, betas 0.9/0.999).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

MAX_STEPS = 2 ** 53  # float64 exactly representable; overflow is a bug


@dataclass
class AdamWState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def clone(self) -> "AdamWState":
        out = AdamWState(self.lr, self.beta1, self.beta2, self.eps,
                         self.weight_decay, self.step)
        out.m = {k: a.copy() for k, a in self.m.items()}
        out.v = {k: a.copy() for k, a in self.v.items()}
        return out


@dataclass
class EMAState:
    """Exponential moving average of parameters.

    Shadow values are kept in float32 so that a checkpoint round trip
    (stored as float32 blocks) resumes bit-exactly.
    """
    decay: float = 0.999
    shadow: dict = field(default_factory=dict)

    @classmethod
    def from_params(cls, params: dict[str, Tensor],
                    decay: float) -> "EMAState":
        return cls(decay=decay,
                   shadow={k: p.data.astype(np.float32, copy=True)
                           for k, p in params.items()})

    def update(self, params: dict[str, Tensor]) -> None:
        d = np.float32(self.decay)
        one_minus = np.float32(1.0) - d
        for k, p in params.items():
            self.shadow[k] = (d * self.shadow[k]
                              + one_minus * p.data.astype(np.float32))


def lr_at(step: int, total_steps: int, base_lr: float,
          warmup_steps: int = 0, schedule: str = "cosine") -> float:
    """Learning rate for a 0-based step: linear warmup then cosine decay
    to zero (or a constant rate after warmup)."""
    if schedule not in ("cosine", "constant"):
        raise ValueError(f"unknown lr schedule {schedule!r}")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if schedule == "constant":
        return base_lr
    span = max(1, total_steps - warmup_steps)
    frac = min(1.0, (step - warmup_steps) / span)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.

    Returns the pre-clip norm. max_norm <= 0 disables clipping.
    """
    gsq = sum(float((p.grad.astype(np.float64) ** 2).sum())
              for p in params.values() if p.grad is not None)
    gnorm = float(np.sqrt(gsq))
    if max_norm > 0 and gnorm > max_norm:
        scale = max_norm / gnorm
        for p in params.values():
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return gnorm


def adamw_step(params: dict[str, Tensor], state: AdamWState) -> None:
    """One bias-corrected Adam update plus decoupled weight decay, in place.

    Parameters without a gradient (never touched by the graph) are treated
    as having zero gradient: their moments decay but weight decay still
    applies.
    """
    assert state.step < MAX_STEPS, "AdamW step counter overflow"
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in params:
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        update = state.lr * mhat / (np.sqrt(vhat) + state.eps)
        if state.weight_decay != 0.0:
            update = update + state.lr * state.weight_decay * p.data
        p.data = (p.data - update).astype(p.data.dtype)
