"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

from .tensor import Tensor, backward, no_grad

Inputs = Union[Tensor, Sequence[Tensor]]


def finite_diff_check(f: Callable[[Inputs], Tensor], x: Inputs, eps: float = 1e-5,
                      samples: Optional[int] = None, seed: int = 0) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``x`` is a tensor or a list of tensors, and ``f`` receives it unchanged.
    With ``samples`` set, only that many randomly chosen coordinates per
    tensor are perturbed, which keeps checks on wide networks affordable.

    Returns ``max |g_ad - g_fd| / max(1, |g_fd|)`` over checked coordinates.
    """
    tensors = [x] if isinstance(x, Tensor) else list(x)
    saved = [(t.requires_grad, t.grad) for t in tensors]
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    try:
        loss = f(x)
        backward(loss, inputs=tensors)
        analytic = [t.grad.copy() for t in tensors]
        rng = np.random.default_rng(seed)
        worst = 0.0
        for t, g_ad in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if samples is not None and samples < flat.size:
                coords = rng.choice(flat.size, size=samples, replace=False)
            for i in coords:
                orig = flat[i]
                with no_grad():
                    flat[i] = orig + eps
                    fp = float(f(x).data)
                    flat[i] = orig - eps
                    fm = float(f(x).data)
                flat[i] = orig
                g_fd = (fp - fm) / (2.0 * eps)
                err = abs(g_ad.reshape(-1)[i] - g_fd) / max(1.0, abs(g_fd))
                worst = max(worst, err)
        return worst
    finally:
        for t, (rg, g) in zip(tensors, saved):
            t.requires_grad = rg
            t.grad = g
