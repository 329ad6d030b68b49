"""Plain SGD with heavy-ball momentum and L2 weight decay."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Parameter


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """Update every parameter in place and clear its gradient.

    ``v <- momentum * v + grad + weight_decay * value``;
    ``value <- value - lr * v``.
    """
    params = list(params)
    missing = [p.name for p in params if p.value.grad is None]
    if missing:
        raise ValueError(f"sgd_step: no gradient for parameter(s) {missing[:5]}{'...' if len(missing) > 5 else ''}")
    for p in params:
        value = p.value.data
        step = p.value.grad.astype(value.dtype, copy=False)
        if weight_decay:
            step = step + weight_decay * value
        if momentum:
            if p.momentum_buffer is None:
                p.momentum_buffer = np.zeros_like(value)
            p.momentum_buffer *= momentum
            p.momentum_buffer += step
            step = p.momentum_buffer
        if lr:
            value -= (lr * step).astype(value.dtype, copy=False)
        p.value.grad = None
