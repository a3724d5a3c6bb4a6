"""Parameter collections and the two optimizers used for training.

SGD uses the Nesterov formulation common to deep-learning frameworks::

    v <- momentum * v + g
    w <- w - lr * (g + momentum * v)

Adam is the bias-corrected update of Kingma & Ba.  Weight decay is added to
the gradient (L2) for both.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ConfigError, UsageError
from .tensor import Tensor


class ParamSet:
    """Named parameter tensors with per-parameter optimizer state.

    Iteration follows insertion order, so two identically built networks give
    identical update sequences.
    """

    def __init__(self, params=None):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self.state: dict[str, dict] = {}
        if params:
            items = params.items() if hasattr(params, "items") else params
            for name, t in items:
                self.add(name, t)

    def add(self, name: str, tensor: Tensor) -> None:
        if name in self._params:
            raise UsageError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        tensor.name = tensor.name or name
        self._params[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_elements(self) -> int:
        return int(sum(t.size for t in self._params.values()))


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 5e-4
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    # (epoch, divisor): from that epoch on the lr is divided by divisor (cumulative)
    schedule: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd-nesterov", "sgd", "adam"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError(f"Adam betas must be in (0, 1), got {self.beta1}, {self.beta2}")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be non-negative")
        self.schedule = sorted((int(e), float(d)) for e, d in self.schedule)
        for e, d in self.schedule:
            if d <= 0:
                raise ConfigError(f"schedule divisor must be positive, got {d} at epoch {e}")

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for milestone, divisor in self.schedule:
            if epoch >= milestone:
                lr /= divisor
        return lr

    @classmethod
    def step_every(cls, every: int, divisor: float, epochs: int, **kw) -> "OptimizerConfig":
        """Config whose lr is divided by ``divisor`` every ``every`` epochs up to ``epochs``."""
        sched = [(e, divisor) for e in range(every, max(epochs, every) + 1, every)] if every > 0 else []
        return cls(schedule=sched, **kw)


def optimizer_step(params: ParamSet, config: OptimizerConfig, epoch: int = 0) -> ParamSet:
    """Apply one update to every parameter in ``params`` using its ``.grad``."""
    lr = config.lr_at(epoch)
    for name, p in params:
        if p.grad is None:
            raise UsageError(f"parameter {name!r} has no gradient")
        g = p.grad
        if config.weight_decay:
            g = g + config.weight_decay * p.data
        st = params.state.setdefault(name, {})
        if config.kind in ("sgd-nesterov", "sgd"):
            if config.momentum:
                buf = st.get("momentum")
                buf = g.copy() if buf is None else config.momentum * buf + g
                st["momentum"] = buf
                step = g + config.momentum * buf if config.kind == "sgd-nesterov" else buf
            else:
                step = g
            p.data = (p.data - lr * step).astype(p.dtype, copy=False)
        else:
            t = st.get("t", 0) + 1
            m = st.get("m")
            v = st.get("v")
            m = (1 - config.beta1) * g if m is None else config.beta1 * m + (1 - config.beta1) * g
            v = (1 - config.beta2) * g * g if v is None else config.beta2 * v + (1 - config.beta2) * g * g
            st["t"], st["m"], st["v"] = t, m, v
            mhat = m / (1 - config.beta1 ** t)
            vhat = v / (1 - config.beta2 ** t)
            p.data = (p.data - lr * mhat / (np.sqrt(vhat) + config.eps)).astype(p.dtype, copy=False)
    return params
