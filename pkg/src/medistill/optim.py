"""AdamW with decoupled weight decay, a warmup/step-decay schedule and global-norm clipping."""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from medistill.autodiff import Tensor


class OptimConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(default=5e-4, gt=0)
    warmup_steps: int = Field(default=100, ge=0)
    decay_rate: float = Field(default=0.85, gt=0, le=1)
    # one "epoch" of the step decay, in optimizer steps
    decay_every: int = Field(default=200, gt=0)
    weight_decay: float = Field(default=0.02, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    clip_norm: Optional[float] = Field(default=1.0, gt=0)


def learning_rate(step: int, cfg: OptimConfig) -> float:
    """LR for 0-based ``step``: linear warmup to the peak, times ``decay_rate ** epoch``."""
    warm = min(1.0, (step + 1) / cfg.warmup_steps) if cfg.warmup_steps else 1.0
    return cfg.lr * warm * cfg.decay_rate ** (step // cfg.decay_every)


def decays(name: str, tensor: Tensor) -> bool:
    """Weight decay applies to matrices only; biases, norms and the temperature are exempt."""
    return tensor.ndim >= 2 and not name.endswith("temp")


class AdamW:
    """Bias-corrected Adam with decoupled weight decay ``p -= lr * wd * p``."""

    def __init__(self, named_params: Iterable[tuple[str, Tensor]], cfg: OptimConfig,
                 decay_filter: Callable[[str, Tensor], bool] = decays):
        self.cfg = cfg
        self.params = dict(named_params)
        self.decay = {n: decay_filter(n, p) for n, p in self.params.items()}
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            if self.decay[name] and cfg.weight_decay:
                p.data *= 1.0 - lr * cfg.weight_decay
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + cfg.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"t": np.array(self.t, dtype=np.int64)}
        for n in self.params:
            state[f"m.{n}"] = self.m[n].copy()
            state[f"v.{n}"] = self.v[n].copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"])
        for n in self.params:
            self.m[n] = state[f"m.{n}"].astype(self.params[n].data.dtype)
            self.v[n] = state[f"v.{n}"].astype(self.params[n].data.dtype)


def clip_grad_norm(params: Iterable[Tensor], max_norm: Optional[float]) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g *= scale
    return total
