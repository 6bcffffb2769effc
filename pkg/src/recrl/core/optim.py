from __future__ import annotations

from typing import Sequence

import numpy as np

from recrl.core.tensor import Tensor
from recrl.errors import ConfigError, ContractViolation, NumericError


class Optimizer:
    kind = "base"

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3):
        if not lr > 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.step_count = 0

    def _grads(self) -> list[np.ndarray]:
        out = []
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractViolation(f"parameter #{i} ({p.name or p.shape}) has no gradient")
            out.append(p.grad)
        return out

    def step(self) -> None:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class SGD(Optimizer):
    kind = "sgd"

    def step(self) -> None:
        for p, g in zip(self.params, self._grads()):
            p.data = p.data - self.lr * g
            _finite(p)
        self.step_count += 1


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = self._grads()
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            _finite(p)


def _finite(p: Tensor) -> None:
    if not np.all(np.isfinite(p.data)):
        raise NumericError("optimizer produced non-finite parameters")


def make_optimizer(kind: str, params, lr: float) -> Optimizer:
    kind = kind.lower()
    if kind == "adam":
        return Adam(params, lr)
    if kind == "sgd":
        return SGD(params, lr)
    raise ConfigError(f"unknown optimizer {kind!r}")


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None)))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total
