"""First-order optimizers and learning-rate schedules.

Optimizers update a mapping of name -> ndarray in place. Schedules only
compute learning rates; the training loop copies them into the optimizer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .nn_core import ContractError

OPTIMIZERS = ("sgd", "adam", "adamax")
SCHEDULERS = ("constant", "onecycle", "plateau")

DEFAULT_LR = {"sgd": 0.01, "adam": 0.001, "adamax": 0.002}


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    u: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}; expected one of {OPTIMIZERS}")
        if self.lr is None:
            self.lr = DEFAULT_LR[self.kind]
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.momentum < 0:
            raise ValueError("momentum must be >= 0")


def _moment(store: dict, name: str, like: np.ndarray) -> np.ndarray:
    buf = store.get(name)
    if buf is None:
        buf = store[name] = np.zeros_like(like, dtype=np.float64)
    elif buf.shape != like.shape:
        raise ContractError(f"{name}: optimizer state shape {buf.shape} != parameter shape {like.shape}")
    return buf


def optimizer_step(state: OptimizerState, params: Mapping[str, np.ndarray],
                   grads: Mapping[str, np.ndarray]):
    """Apply one update to ``params`` in place and return ``(params, state)``."""
    for name, p in params.items():
        if name not in grads:
            raise ContractError(f"{name}: no gradient")
        if np.shape(grads[name]) != p.shape:
            raise ContractError(f"{name}: gradient shape {np.shape(grads[name])} != parameter shape {p.shape}")

    state.t += 1
    lr, b1, b2, eps = state.lr, state.beta1, state.beta2, state.eps
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if state.kind == "sgd":
            if state.momentum:
                buf = _moment(state.m, name, p)
                buf *= state.momentum
                buf += g
                p -= lr * buf
            else:
                p -= lr * g
        elif state.kind == "adam":
            m = _moment(state.m, name, p)
            v = _moment(state.v, name, p)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** state.t)
            v_hat = v / (1 - b2 ** state.t)
            p -= lr * m_hat / (np.sqrt(v_hat) + eps)
        else:
            m = _moment(state.m, name, p)
            u = _moment(state.u, name, p)
            m *= b1
            m += (1 - b1) * g
            np.maximum(b2 * u, np.abs(g), out=u)
            p -= (lr / (1 - b1 ** state.t)) * m / (u + eps)
    if hasattr(params, "touch"):
        params.touch()
    return params, state


@dataclass
class SchedulerState:
    kind: str = "constant"
    lr: float = 0.001
    # onecycle
    max_lr: float = 0.01
    total_steps: int = 1
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    # plateau
    factor: float = 0.1
    patience: int = 10
    mode: str = "min"
    threshold: float = 1e-4
    min_lr: float = 1e-12
    best_so_far: float | None = None
    bad_epochs: int = 0

    def __post_init__(self):
        if self.kind not in SCHEDULERS:
            raise ValueError(f"unknown scheduler {self.kind!r}; expected one of {SCHEDULERS}")
        if self.mode not in ("min", "max"):
            raise ValueError("mode must be 'min' or 'max'")
        if self.kind == "onecycle":
            if self.total_steps < 1 or not 0 <= self.pct_start <= 1:
                raise ValueError("onecycle needs total_steps >= 1 and pct_start in [0, 1]")
            if self.max_lr <= 0 or self.div_factor <= 0 or self.final_div_factor <= 0:
                raise ValueError("onecycle rates and factors must be positive")
            self.lr = self.max_lr / self.div_factor
        if self.kind == "plateau" and not 0 < self.factor < 1:
            raise ValueError("plateau factor must lie in (0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    @property
    def warmup_steps(self) -> float:
        return self.pct_start * self.total_steps


def onecycle_lr(state: SchedulerState, step: int) -> float:
    """Linear warm-up from max_lr/div_factor to max_lr, then cosine down to max_lr/final_div_factor."""
    if not 0 <= step < state.total_steps:
        raise IndexError(f"step {step} outside [0, {state.total_steps})")
    lo = state.max_lr / state.div_factor
    hi = state.max_lr
    end = state.max_lr / state.final_div_factor
    warm = state.warmup_steps
    if step <= warm:
        if warm == 0:
            return hi
        return lo + (hi - lo) * step / warm
    span = (state.total_steps - 1) - warm
    if span <= 0:
        return hi
    frac = (step - warm) / span
    return end + (hi - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


def onecycle_slope_bound(state: SchedulerState) -> float:
    """Largest possible |lr(s+1) - lr(s)| for a one-cycle schedule."""
    lo = state.max_lr / state.div_factor
    end = state.max_lr / state.final_div_factor
    bounds = [0.0]
    warm = state.warmup_steps
    if warm > 0:
        bounds.append((state.max_lr - lo) / warm)
    span = (state.total_steps - 1) - warm
    if span > 0:
        bounds.append((state.max_lr - end) * math.pi / (2 * span))
    return max(bounds)


def _improved(state: SchedulerState, metric: float) -> bool:
    best = state.best_so_far
    if best is None:
        return True
    rel = state.threshold * abs(best)
    if state.mode == "min":
        return metric < best - rel
    return metric > best + rel


def scheduler_step(state: SchedulerState, progress: float) -> float:
    """Advance the schedule and return the learning rate to use.

    ``progress`` is the step index for onecycle and the monitored metric for
    plateau; constant ignores it.
    """
    if state.kind == "onecycle":
        state.lr = onecycle_lr(state, int(progress))
    elif state.kind == "plateau":
        metric = float(progress)
        if _improved(state, metric):
            state.best_so_far = metric
            state.bad_epochs = 0
        else:
            state.bad_epochs += 1
            if state.bad_epochs > state.patience:
                state.lr = max(state.lr * state.factor, state.min_lr)
                state.bad_epochs = 0
    return state.lr
