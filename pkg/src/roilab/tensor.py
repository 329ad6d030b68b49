"""Dense tensors with reverse-mode automatic differentiation.

Every primitive the model zoo needs lives here as a plain function that
takes and returns :class:`Tensor` objects.  Each result remembers the
tensors it was computed from plus a closure that maps the gradient of the
result onto gradients of those inputs; :func:`backward` walks that graph in
reverse topological order.

Arrays keep whatever floating dtype they were created with, so the same
code runs in float32 for training and float64 for gradient checking.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "BatchNormState",
    "ShapeError",
    "as_tensor",
    "conv2d",
    "relu",
    "batchnorm2d",
    "global_avg_pool",
    "linear",
    "add",
    "elementwise_merge",
    "expand_channels",
    "softmax_cross_entropy",
    "tensor_sum",
    "square",
    "area_resize",
    "backward",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """An n-dimensional array with an optional gradient slot.

    ``op`` names the primitive that produced the tensor ("leaf" for inputs
    and parameters), ``parents`` are its inputs and ``backward_fn`` maps the
    output gradient to a tuple of input gradients (``None`` for inputs that
    do not need one).
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "backward_fn")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: Sequence["Tensor"] = (),
        backward_fn: Optional[Callable[[np.ndarray], tuple]] = None,
    ):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"


@dataclass
class Parameter:
    """A named trainable tensor; ``name`` is a slash-delimited path."""

    name: str
    value: Tensor
    momentum_buffer: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.value.requires_grad = True


@dataclass
class BatchNormState:
    """Running statistics of one normalization layer (not trained)."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, op, parents, backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents, backward_fn=backward_fn)


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix of shape (N*H'*W', kh*kw*C) from a padded NHWC array."""
    n, c = xp.shape[0], xp.shape[3]
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    for a in range(kh):
        for b in range(kw):
            cols[:, :, :, a, b, :] = xp[:, a:a + stride * ho:stride, b:b + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over an NCHW batch with an OIKhKw kernel."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if c != i:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {weight.shape} larger than padded input {x.shape} (padding={padding})")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ShapeError(
            f"conv2d output size not exact: input {x.shape}, weight {weight.shape}, stride={stride}, padding={padding}"
        )
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xp = np.zeros((n, hp, wp, c), dtype=x.dtype)
    xp[:, padding:padding + h, padding:padding + w, :] = x.data.transpose(0, 2, 3, 1)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    del xp
    # rows ordered (kh, kw, c) to match the patch layout
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros((n, hp, wp, c), dtype=g.dtype)
            for a in range(kh):
                for b in range(kw):
                    gxp[:, a:a + stride * ho:stride, b:b + stride * wo:stride, :] += dcols[:, :, :, a, b, :]
            gx = np.ascontiguousarray(gxp[:, padding:padding + h, padding:padding + w, :].transpose(0, 3, 1, 2))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _result(out, "conv2d", parents, backward_fn)


# ---------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.maximum(x.data, 0), "relu", (x,), lambda g: (g * mask,))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Same-shape addition, used for residual connections."""
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def elementwise_merge(a: Tensor, b: Tensor, mode: str) -> Tensor:
    """Combine a feature map with an attention map of identical shape.

    ``mode`` is ``"add"`` or ``"mul"``.  No broadcasting is performed; use
    :func:`expand_channels` first to spread a one-channel map.
    """
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_merge shape mismatch: {a.shape} vs {b.shape}")
    if mode == "add":
        return _result(a.data + b.data, "merge_add", (a, b), lambda g: (g, g))
    if mode == "mul":
        ad, bd = a.data, b.data
        return _result(ad * bd, "merge_mul", (a, b), lambda g: (g * bd, g * ad))
    raise ValueError(f"unknown merge mode {mode!r}; expected 'add' or 'mul'")


def expand_channels(x: Tensor, channels: int) -> Tensor:
    """Repeat a one-channel NCHW tensor along the channel axis."""
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"expand_channels expects N x 1 x H x W, got {x.shape}")
    out = np.repeat(x.data, channels, axis=1)
    return _result(out, "expand", (x,), lambda g: (g.sum(axis=1, keepdims=True),))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _result(xd * xd, "square", (x,), lambda g: (2 * xd * g,))


def tensor_sum(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype
    return _result(np.asarray(x.data.sum(), dtype=dtype), "sum", (x,), lambda g: (np.full(shape, g, dtype=dtype),))


# ---------------------------------------------------------------------------
# normalization, pooling, dense


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization of an NCHW tensor.

    In training mode the batch statistics are used and ``state`` is updated
    in place by an exponential moving average (unbiased variance); in eval
    mode the stored statistics are used and the map is affine in ``x``.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    shp = (1, c, 1, 1)
    if train:
        m = n * h * w
        if m < 2:
            raise ValueError(f"batchnorm2d in train mode needs N*H*W >= 2, got input {x.shape}")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.running_mean[...] = (1 - momentum) * state.running_mean + momentum * mean
        state.running_var[...] = (1 - momentum) * state.running_var + momentum * var * (m / (m - 1))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean.reshape(shp)) * inv.reshape(shp)
        out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

        def backward_fn(g):
            gg = g.sum(axis=(0, 2, 3))
            gxhat_sum = (g * xhat).sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                gx = (gamma.data * inv / m).reshape(shp) * (
                    m * g - gg.reshape(shp) - xhat * gxhat_sum.reshape(shp)
                )
            return gx, gxhat_sum, gg

    else:
        inv = 1.0 / np.sqrt(state.running_var.astype(x.dtype) + eps)
        scale = gamma.data * inv
        shift = beta.data - state.running_mean.astype(x.dtype) * scale
        xhat = (x.data - state.running_mean.astype(x.dtype).reshape(shp)) * inv.reshape(shp)
        out = x.data * scale.reshape(shp) + shift.reshape(shp)

        def backward_fn(g):
            return g * scale.reshape(shp), (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _result(out.astype(x.dtype, copy=False), "batchnorm2d", (x, gamma, beta), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return _result(
        x.data.mean(axis=(2, 3)),
        "global_avg_pool",
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(g.dtype),),
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (N, F) and weight (K, F)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    return _result(
        xd @ wd.T + bias.data,
        "linear",
        (x, weight, bias),
        lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)),
    )


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward_fn(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1
        return (grad * (g / n),)

    return _result(np.asarray(loss, dtype=logits.dtype), "softmax_cross_entropy", (logits,), backward_fn)


# ---------------------------------------------------------------------------
# masks


def area_resize(mask, target_h: int, target_w: int) -> Tensor:
    """Block-mean downsampling of an N x 1 x H x W mask.

    Masks carry no gradient, so the result is always a constant tensor.
    """
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if m.ndim != 4:
        raise ShapeError(f"area_resize expects N x 1 x H x W, got {m.shape}")
    n, c, h, w = m.shape
    if target_h < 1 or target_w < 1 or h % target_h or w % target_w:
        raise ShapeError(f"area_resize: source size {h}x{w} not divisible by target size {target_h}x{target_w}")
    if (h, w) == (target_h, target_w):
        return Tensor(m.copy())
    bh, bw = h // target_h, w // target_w
    out = m.reshape(n, c, target_h, bh, target_w, bw).mean(axis=(3, 5))
    return Tensor(out.astype(m.dtype if np.issubdtype(m.dtype, np.floating) else np.float32))


# ---------------------------------------------------------------------------
# backward pass


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Intermediate gradients are kept in a local table, so calling this twice
    on the same graph adds the leaf gradients twice and nothing else.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
