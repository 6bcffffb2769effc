"""Parameter containers and the handful of layers the trackers and heads use."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from recrl.core import tensor as T
from recrl.core.tensor import Tensor
from recrl.errors import ContractViolation


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Module:
    """Registers Tensor attributes and child modules in assignment order.

    ``named_parameters`` yields dotted names, which are what checkpoints store.
    """

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ContractViolation(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ContractViolation(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()

    def copy_from(self, other: "Module") -> None:
        self.load_state_dict(other.state_dict())

    def soft_update(self, other: "Module", tau: float) -> None:
        """Polyak averaging: self <- (1 - tau) * self + tau * other."""
        for (_, p), (_, q) in zip(self.named_parameters(), other.named_parameters()):
            p.data = (1.0 - tau) * p.data + tau * q.data

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        self.weight = uniform_init(rng, (n_in, n_out), n_in)
        self.bias = zeros_param((n_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.table = uniform_init(rng, (n, dim), dim)

    def __call__(self, idx) -> Tensor:
        return T.gather_rows(self.table, idx)


class MLP(Module):
    """Linear -> ReLU -> Linear, or a single Linear when ``hidden`` is 0."""

    def __init__(self, n_in: int, n_out: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.hidden = hidden
        if hidden > 0:
            self.fc1 = Linear(n_in, hidden, rng)
            self.fc2 = Linear(hidden, n_out, rng)
        else:
            self.fc = Linear(n_in, n_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if self.hidden > 0:
            return self.fc2(T.relu(self.fc1(x)))
        return self.fc(x)


class GRUCellParams(Module):
    """Weights of one GRU cell; gate order in the stacked matrices is (reset, update, candidate)."""

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator):
        super().__init__()
        self.n_in, self.n_hidden = n_in, n_hidden
        self.w_x = uniform_init(rng, (n_in, 3 * n_hidden), n_hidden)
        self.w_h = uniform_init(rng, (n_hidden, 3 * n_hidden), n_hidden)
        self.b_x = zeros_param((3 * n_hidden,))
        self.b_h = zeros_param((3 * n_hidden,))


def gru_cell(x: Tensor, h: Tensor, p: GRUCellParams) -> Tensor:
    """One GRU step (PyTorch gate convention).

    r = sig(x Wr + h Ur), z = sig(x Wz + h Uz), n = tanh(x Wn + r * (h Un)),
    h' = (1 - z) * n + z * h.
    """
    if x.shape[-1] != p.n_in or h.shape[-1] != p.n_hidden:
        raise ContractViolation(f"gru_cell: x {x.shape}, h {h.shape} vs params ({p.n_in}, {p.n_hidden})")
    H = p.n_hidden
    gx = T.add(T.matmul(x, p.w_x), p.b_x)
    gh = T.add(T.matmul(h, p.w_h), p.b_h)
    r = T.sigmoid(T.add(gx[..., :H], gh[..., :H]))
    z = T.sigmoid(T.add(gx[..., H : 2 * H], gh[..., H : 2 * H]))
    n = T.tanh(T.add(gx[..., 2 * H :], T.mul(r, gh[..., 2 * H :])))
    return T.add(T.mul(T.sub(1.0, z), n), T.mul(z, h))
