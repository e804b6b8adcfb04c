"""Parameter containers and layers built on ndiff."""
from __future__ import annotations

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import ndiff as nd
from .errors import ShapeError, StateError
from .ndiff import Tensor


class Module:
    """Walks attributes to find parameters; names are dotted attribute paths."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise StateError(f"missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero: bool = False):
        if zero:
            w, b = np.zeros((d_in, d_out)), np.zeros(d_out)
        else:
            bound = 1.0 / np.sqrt(d_in)
            w = rng.uniform(-bound, bound, size=(d_in, d_out))
            b = rng.uniform(-bound, bound, size=d_out)
        self.weight = nd.parameter(w)
        self.bias = nd.parameter(b)

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x) -> Tensor:
        return nd.matmul(x, self.weight) + self.bias


class MLP(Module):
    """ReLU stack; with ``skip`` set, the input is re-concatenated before that layer."""

    def __init__(self, d_in: int, depth: int, width: int, rng: np.random.Generator,
                 skip: Optional[int] = None):
        self.skip = skip
        self.layers = []
        for i in range(depth):
            fan_in = d_in if i == 0 else width
            if skip is not None and i == skip and i > 0:
                fan_in += d_in
            self.layers.append(Linear(fan_in, width, rng))

    def __call__(self, x) -> Tensor:
        x = nd.as_tensor(x)
        h = x
        for i, layer in enumerate(self.layers):
            if self.skip is not None and i == self.skip and i > 0:
                h = nd.concat([x, h], axis=-1)
            h = nd.relu(layer(h))
        return h


class GRUCell(Module):
    """Standard GRU cell, gate order (reset, update, candidate).

    Weights draw from U(-1/sqrt(H), 1/sqrt(H)); biases start at zero so
    h=0, x=0 is a fixed point.
    """

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(hidden)
        self.hidden = hidden
        self.w_x = nd.parameter(rng.uniform(-bound, bound, size=(d_in, 3 * hidden)))
        self.w_h = nd.parameter(rng.uniform(-bound, bound, size=(hidden, 3 * hidden)))
        self.b_x = nd.parameter(np.zeros(3 * hidden))
        self.b_h = nd.parameter(np.zeros(3 * hidden))

    def __call__(self, x, h) -> Tensor:
        H = self.hidden
        gx = nd.matmul(x, self.w_x) + self.b_x
        gh = nd.matmul(h, self.w_h) + self.b_h
        r = nd.sigmoid(gx[:, :H] + gh[:, :H])
        z = nd.sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
        cand = nd.tanh(gx[:, 2 * H:] + r * gh[:, 2 * H:])
        return (1.0 - z) * cand + z * h

    def run(self, seq: List[Tensor]) -> Tensor:
        if not seq:
            raise ShapeError("GRU needs a non-empty sequence")
        h = nd.as_tensor(np.zeros((seq[0].shape[0], self.hidden)))
        for x in seq:
            h = self(x, h)
        return h
