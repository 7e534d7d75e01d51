"""Named trainable parameters, seeded initialisers and the Adam optimiser."""

from __future__ import annotations

from collections.abc import Iterator, Mapping

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class NamedParamSet(Mapping[str, Tensor]):
    """Dotted path -> trainable tensor, iterated in lexicographic path order."""

    def __init__(self, items: Mapping[str, Tensor] | None = None):
        self._items: dict[str, Tensor] = {}
        for path, t in (items or {}).items():
            self.add(path, t)

    def add(self, path: str, tensor: Tensor) -> Tensor:
        if path in self._items:
            raise ContractError(f"duplicate parameter path {path!r}")
        tensor.requires_grad = True
        self._items[path] = tensor
        return tensor

    def __getitem__(self, path: str) -> Tensor:
        return self._items[path]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._items))

    def __len__(self) -> int:
        return len(self._items)

    def group(self, prefix: str) -> dict[str, Tensor]:
        p = prefix.rstrip(".") + "."
        return {k: self._items[k] for k in self if k.startswith(p)}

    def count(self) -> int:
        """Total number of scalar parameters."""
        return int(sum(t.size for t in self._items.values()))

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: self._items[k].data.copy() for k in self}


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class LinearParams:
    """Weight [out, in] and bias [out] registered under ``prefix``."""

    def __init__(self, params: NamedParamSet, prefix: str, n_in: int, n_out: int,
                 rng: np.random.Generator, bias: bool = True):
        self.weight = params.add(f"{prefix}.weight",
                                 Tensor(uniform_init(rng, (n_out, n_in), n_in)))
        self.bias = (params.add(f"{prefix}.bias", Tensor(uniform_init(rng, (n_out,), n_in)))
                     if bias else None)

    def __call__(self, x):
        from .tensor import linear
        return linear(x, self.weight, self.bias)


class MLP:
    """Two-layer map: linear -> ReLU -> linear."""

    def __init__(self, params: NamedParamSet, prefix: str, n_in: int, n_hidden: int,
                 n_out: int, rng: np.random.Generator):
        self.fc1 = LinearParams(params, f"{prefix}.fc1", n_in, n_hidden, rng)
        self.fc2 = LinearParams(params, f"{prefix}.fc2", n_hidden, n_out, rng)

    def __call__(self, x):
        return self.fc2(self.fc1(x).relu())


class Adam:
    """Adam with bias correction. Zeroes gradients after every step."""

    def __init__(self, params: NamedParamSet, lr: float = 2e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(params[k].data) for k in params}
        self.v = {k: np.zeros_like(params[k].data) for k in params}

    def step(self) -> None:
        missing = [k for k in self.params if self.params[k].grad is None]
        if len(missing) == len(self.params):
            raise ContractError("adam_step called with no populated gradients")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k in self.params:
            p = self.params[k]
            # parameters outside this step's graph (e.g. unrouted experts) see a zero gradient
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            mhat = self.m[k] / c1
            vhat = self.v[k] / c2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        self.params.zero_grad()

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


def adam_step(opt: Adam) -> None:
    opt.step()
