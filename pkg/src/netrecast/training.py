"""Whole-network training, evaluation and batch-norm statistics refresh."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ops
from .data import BatchStream
from .errors import UsageError
from .losses import kd_loss
from .network import Network
from .optim import OptimizerConfig, ParamSet, optimizer_step
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)


def get_state(net: Network) -> dict[str, np.ndarray]:
    return {n: a.copy() for n, a in net.state_items()}


def set_state(net: Network, state: dict[str, np.ndarray]) -> None:
    for prefix, blk in net.all_blocks():
        for n, t in blk.params:
            t.data = state[f"{prefix}.{n}"].copy()
        for n in blk.buffers:
            blk.buffers[n] = state[f"{prefix}.{n}"].copy()


def predict_logits(net: Network, stream: BatchStream) -> np.ndarray:
    out = []
    with no_grad():
        for x, _ in stream.eval_view().epoch(0):
            out.append(net(Tensor(x), "eval").data)
    return np.concatenate(out)


def evaluate(net: Network, stream: BatchStream) -> float:
    """Top-1 accuracy in eval mode over the whole stream (no augmentation)."""
    logits = predict_logits(net, stream)
    return float((logits.argmax(axis=1) == stream.dataset.labels).mean())


def refresh_bn_stats(net: Network, stream: BatchStream, prefixes=None) -> None:
    """Recompute running BN statistics of the selected blocks with one clean pass.

    The selected blocks run with batch statistics and a cumulative average;
    every other block runs in eval mode.  ``prefixes`` defaults to all blocks.
    """
    chosen = {p for p, _ in net.all_blocks()} if prefixes is None else set(prefixes)
    named = net.all_blocks()
    for p, blk in named:
        if p in chosen:
            blk.reset_bn_stats()
    saved = {p: blk.bn_momentum for p, blk in named}
    try:
        with no_grad():
            for k, (x, _) in enumerate(stream.eval_view().epoch(0)):
                h = net.prepare_input(Tensor(x))
                for p, blk in named:
                    if p in chosen:
                        blk.bn_momentum = 1.0 / (k + 1)
                    h = blk(h, p in chosen)
    finally:
        for p, blk in named:
            blk.bn_momentum = saved[p]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float
    lr: float

    def csv(self) -> str:
        return f"{self.epoch},{self.train_loss:.6f},{self.val_acc:.6f},{self.lr:.8g}"


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = 0.0

    def metrics_csv(self) -> str:
        return "epoch,train_loss,val_acc,lr\n" + "".join(r.csv() + "\n" for r in self.history)


def fit(
    net: Network,
    train: BatchStream,
    val: BatchStream | None,
    epochs: int,
    opt: OptimizerConfig,
    loss_fn: Callable[[Tensor, np.ndarray, np.ndarray], Tensor] | None = None,
    params: ParamSet | None = None,
    keep_best: bool = True,
    include_initial: bool = False,
    epoch_offset: int = 0,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Generic minibatch loop.

    ``loss_fn(logits, x, y)`` defaults to cross-entropy.  With ``keep_best`` the
    network ends holding the parameters of the best validation epoch
    (``include_initial`` lets the untrained starting point compete).
    """
    if epochs < 0:
        raise UsageError("epochs must be non-negative")
    loss_fn = loss_fn or (lambda logits, x, y: ops.cross_entropy(logits, y))
    params = params if params is not None else net.params()
    result = TrainResult()
    best_state = None
    if include_initial and val is not None:
        acc = evaluate(net, val)
        result.history.append(EpochRecord(0, float("nan"), acc, 0.0))
        result.best_epoch, result.best_val_acc = 0, acc
        best_state = get_state(net) if keep_best else None
    for epoch in range(epochs):
        lr = opt.lr_at(epoch)
        total, count = 0.0, 0
        for x, y in train.epoch(epoch + epoch_offset):
            params.zero_grad()
            logits = net(Tensor(x), "train")
            loss = loss_fn(logits, x, y)
            backward(loss)
            optimizer_step(params, opt, epoch)
            total += float(loss.data) * len(y)
            count += len(y)
        acc = evaluate(net, val) if val is not None else float("nan")
        rec = EpochRecord(epoch + 1, total / max(count, 1), acc, lr)
        result.history.append(rec)
        log.info("epoch %d loss %.4f val_acc %.4f lr %.3g", rec.epoch, rec.train_loss, acc, lr)
        if on_epoch:
            on_epoch(rec)
        if val is not None and (best_state is None or acc > result.best_val_acc):
            result.best_epoch, result.best_val_acc = rec.epoch, acc
            if keep_best:
                best_state = get_state(net)
    if keep_best and best_state is not None:
        set_state(net, best_state)
    return result


def teacher_optimizer(lr: float = 0.1, epochs: int = 10, weight_decay: float = 5e-4) -> OptimizerConfig:
    """SGD-Nesterov with lr divided by 10 at 50% and 75% of training."""
    sched = sorted({(max(1, int(epochs * 0.5)), 10.0), (max(2, int(epochs * 0.75)), 10.0)})
    return OptimizerConfig(kind="sgd-nesterov", lr=lr, momentum=0.9, weight_decay=weight_decay, schedule=sched)


def train_backprop(net: Network, train: BatchStream, val: BatchStream | None, epochs: int,
                   opt: OptimizerConfig | None = None) -> TrainResult:
    """Train from the current weights on ground-truth cross-entropy only."""
    return fit(net, train, val, epochs, opt or teacher_optimizer(epochs=epochs))


def train_kd(teacher: Network, student: Network, train: BatchStream, val: BatchStream | None, epochs: int,
             opt: OptimizerConfig | None = None, mse_weight: float = 1.0, include_initial: bool = False) -> TrainResult:
    """Train ``student`` on the distillation objective against a frozen ``teacher``."""
    if teacher.num_classes != student.num_classes:
        raise UsageError(f"teacher has {teacher.num_classes} classes, student {student.num_classes}")

    def loss_fn(logits, x, y):
        with no_grad():
            t_logits = teacher(Tensor(x), "eval")
        return kd_loss(logits, t_logits, y, mse_weight)

    return fit(student, train, val, epochs, opt or teacher_optimizer(epochs=epochs), loss_fn,
               include_initial=include_initial)
