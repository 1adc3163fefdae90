"""Mini-batch training loop shared by the CLI and the tests."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import metrics
from .nn_core import NetworkParams, NetworkSpec, backward, forward, init_network, predict_class
from .optim import OptimizerState, SchedulerState, optimizer_step, scheduler_step

log = logging.getLogger(__name__)

TASKS = ("classify", "va")


class NonFiniteLoss(FloatingPointError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    task: str = "classify"
    topology: str = "plain"
    hidden: tuple = (512, 256, 128)
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adam"
    lr: float | None = None
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    scheduler: str = "constant"
    max_lr: float = 0.01
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    plateau_factor: float = 0.1
    plateau_patience: int = 10
    plateau_mode: str = "min"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def network_spec(self, input_dim: int) -> NetworkSpec:
        head = "classifier7" if self.task == "classify" else "va2"
        return NetworkSpec(input_dim=input_dim, topology=self.topology, hidden=tuple(self.hidden), head=head)

    def make_optimizer(self) -> OptimizerState:
        return OptimizerState(kind=self.optimizer, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                              eps=self.eps, momentum=self.momentum)

    def make_scheduler(self, base_lr: float, steps_per_epoch: int) -> SchedulerState:
        return SchedulerState(kind=self.scheduler, lr=base_lr, max_lr=self.max_lr,
                              total_steps=self.epochs * steps_per_epoch, pct_start=self.pct_start,
                              div_factor=self.div_factor, final_div_factor=self.final_div_factor,
                              factor=self.plateau_factor, patience=self.plateau_patience,
                              mode=self.plateau_mode)


@dataclass
class TrainLogRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    val_macro_f1: float | None = None
    val_ccc_v: float | None = None
    val_ccc_a: float | None = None

    @property
    def score(self) -> float:
        """Model-selection metric: macro-F1, or the mean of the two CCCs."""
        if self.val_macro_f1 is not None:
            return self.val_macro_f1
        return 0.5 * (self.val_ccc_v + self.val_ccc_a)

    def as_dict(self) -> dict:
        return {k: v for k, v in vars(self).items() if v is not None}


@dataclass
class FitResult:
    spec: NetworkSpec
    params: NetworkParams
    best_epoch: int
    best_score: float
    history: list = field(default_factory=list)


def predict(params: NetworkParams, spec: NetworkSpec, x: np.ndarray, chunk: int = 4096) -> np.ndarray:
    outs = [forward(params, spec, x[i:i + chunk])[0] for i in range(0, len(x), chunk)]
    if not outs:
        return np.zeros((0, spec.output_dim))
    return np.concatenate(outs, axis=0)


def task_loss(task: str, out: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    if task == "classify":
        return metrics.cross_entropy(out, y)
    return metrics.mse_loss(out, y)


def evaluate(params: NetworkParams, spec: NetworkSpec, task: str, x: np.ndarray, y: np.ndarray):
    """Loss and metrics report on a labelled set."""
    out = predict(params, spec, x)
    loss, _ = task_loss(task, out, y)
    if task == "classify":
        report = metrics.confusion_and_f1(y, predict_class(out))
    else:
        report = metrics.va_report(out, y)
    return loss, report


def fit(cfg: TrainConfig, train_x, train_y, val_x, val_y,
        stop_when: Callable[[TrainLogRecord], bool] | None = None) -> FitResult:
    """Train a fresh network and keep the parameters with the best validation score.

    ``stop_when`` is called with each epoch's log record; training ends early
    once it returns True.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    val_x = np.asarray(val_x, dtype=np.float64)
    train_y, val_y = np.asarray(train_y), np.asarray(val_y)
    n = len(train_x)
    if n == 0 or len(val_x) == 0:
        raise ValueError("training and validation sets must be non-empty")

    spec = cfg.network_spec(train_x.shape[1])
    params = init_network(spec, cfg.seed)
    opt = cfg.make_optimizer()
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    sched = cfg.make_scheduler(opt.lr, steps_per_epoch)
    opt.lr = sched.lr

    result = FitResult(spec=spec, params=params.copy(), best_epoch=0, best_score=-math.inf)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            # divergence shows up as a non-finite loss below; numpy's warnings add nothing
            with np.errstate(over="ignore", invalid="ignore"):
                out, cache = forward(params, spec, train_x[idx])
                loss, grad = task_loss(cfg.task, out, train_y[idx])
            if not math.isfinite(loss):
                raise NonFiniteLoss(epoch, b, loss)
            total += loss * len(idx)
            # loss gradients are already batch means; backward averages again
            grads = backward(params, spec, cache, grad * len(idx))
            if sched.kind == "onecycle":
                opt.lr = scheduler_step(sched, step)
            optimizer_step(opt, params, grads)
            step += 1

        val_loss, report = evaluate(params, spec, cfg.task, val_x, val_y)
        rec = TrainLogRecord(epoch=epoch, train_loss=total / n, val_loss=val_loss, lr=opt.lr)
        if cfg.task == "classify":
            rec.val_macro_f1 = report.macro_f1
        else:
            rec.val_ccc_v, rec.val_ccc_a = report.ccc_valence, report.ccc_arousal
        result.history.append(rec)
        log.info("epoch %d: %s", epoch, rec.as_dict())

        if rec.score > result.best_score:
            result.best_score = rec.score
            result.best_epoch = epoch
            result.params = params.copy()
        if sched.kind == "plateau":
            opt.lr = scheduler_step(sched, val_loss if sched.mode == "min" else rec.score)
        if stop_when is not None and stop_when(rec):
            break
    return result
