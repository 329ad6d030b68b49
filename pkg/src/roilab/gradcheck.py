"""Finite-difference verification of the analytic backward rules.

:func:`grad_check` compares ``backward`` against central differences in
float64 for one scalar function.  :func:`run_suite` applies it to every
differentiable primitive and to a small end-to-end model over several
seeds; :func:`fault_injection` temporarily corrupts one primitive's
backward rule so the suite can be shown to catch it.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_EPS = 1e-3
DEFAULT_THRESHOLD = 1e-4


@contextlib.contextmanager
def _relu_patterns(log: list) -> Iterator[None]:
    original = T.relu

    def recording(x):
        log.append(x.data > 0)
        return original(x)

    T.relu = recording
    try:
        yield
    finally:
        T.relu = original


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped: int


def grad_check_report(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = DEFAULT_EPS,
    max_coords: Optional[int] = 20,
    rng: Optional[np.random.Generator] = None,
    skip_kinks: bool = False,
) -> GradCheckReport:
    """Like :func:`grad_check` but also counts checked and skipped coordinates.

    With ``skip_kinks`` every ReLU activation pattern is recorded, and a
    coordinate whose +eps or -eps evaluation flips any activation is
    skipped: the function is not differentiable across that step, so the
    central difference is not a valid oracle there.  Skipped coordinates are
    replaced by further samples until ``max_coords`` have been checked.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    base: list = []
    with _relu_patterns(base):
        out = fn(*tensors)
    T.backward(out)

    def evaluate():
        log: list = []
        with _relu_patterns(log):
            value = fn(*[Tensor(a) for a in arrays]).item()
        return value, log

    worst, checked, skipped = 0.0, 0, 0
    for k, arr in enumerate(arrays):
        analytic = tensors[k].grad if tensors[k].grad is not None else np.zeros_like(arr)
        flat = arr.reshape(-1)
        order = rng.permutation(flat.size) if max_coords is not None else np.arange(flat.size)
        done = 0
        for i in order:
            if max_coords is not None and done >= max_coords:
                break
            orig = flat[i]
            flat[i] = orig + eps
            plus, plus_log = evaluate()
            flat[i] = orig - eps
            minus, minus_log = evaluate()
            flat[i] = orig
            if skip_kinks and not (_same_pattern(base, plus_log) and _same_pattern(base, minus_log)):
                skipped += 1
                continue
            numeric = (plus - minus) / (2 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1e-8, abs(a) + abs(numeric)))
            done += 1
        checked += done
    return GradCheckReport(float(worst), checked, skipped)


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = DEFAULT_EPS,
    max_coords: Optional[int] = 20,
    rng: Optional[np.random.Generator] = None,
    skip_kinks: bool = False,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps tensors (one per entry of ``inputs``) to a scalar tensor and
    is evaluated in float64.  Up to ``max_coords`` coordinates of each input
    are sampled (all of them when ``None``).  The error at a coordinate is
    ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    return grad_check_report(fn, inputs, eps, max_coords, rng, skip_kinks).max_rel_error


def _projected(out: Tensor, rng: np.random.Generator) -> Tensor:
    # random projection so every output coordinate matters (a plain sum of a
    # normalized output would have zero gradient)
    weights = Tensor(rng.standard_normal(out.shape))
    return T.tensor_sum(T.elementwise_merge(out, weights, "mul"))


@contextlib.contextmanager
def fault_injection(op_name: str = "relu", scale: float = 1.5) -> Iterator[None]:
    """Within the block, ``tensor.<op_name>`` returns gradients scaled by ``scale``."""
    original = getattr(T, op_name)

    def corrupted(*args, **kwargs):
        out = original(*args, **kwargs)
        if out.backward_fn is not None:
            rule = out.backward_fn
            out.backward_fn = lambda g: tuple(None if r is None else r * scale for r in rule(g))
        return out

    setattr(T, op_name, corrupted)
    try:
        yield
    finally:
        setattr(T, op_name, original)


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seeds: int
    checked: int = 0
    skipped: int = 0

    def passed(self, threshold: float = DEFAULT_THRESHOLD) -> bool:
        return self.max_rel_error < threshold


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + rng.random(shape)), x)


def _primitive_cases():
    """(name, builder) pairs; each builder maps an rng to (fn, inputs)."""

    def conv(stride, padding, shape, k, bias=True):
        def build(rng):
            n, c, h, w = shape
            o = int(rng.integers(1, 4))
            inputs = [rng.standard_normal(shape), rng.standard_normal((o, c, k, k))]
            if bias:
                inputs.append(rng.standard_normal(o))
            seed = int(rng.integers(1 << 31))

            def fn(x, wt, b=None):
                return _projected(T.conv2d(x, wt, b, stride=stride, padding=padding), np.random.default_rng(seed))

            return fn, inputs

        return build

    def unary(op, shape_fn, gen=None):
        def build(rng):
            shape = shape_fn(rng)
            x = gen(rng, shape) if gen else rng.standard_normal(shape)
            seed = int(rng.integers(1 << 31))
            return (lambda t: _projected(op(t), np.random.default_rng(seed))), [x]

        return build

    def bn(train):
        def build(rng):
            c = int(rng.integers(1, 4))
            shape = (int(rng.integers(2, 4)), c, 3, 3)
            state = T.BatchNormState(rng.standard_normal(c), rng.random(c) + 0.5)
            seed = int(rng.integers(1 << 31))

            def fn(x, g, b):
                s = T.BatchNormState(state.running_mean.copy(), state.running_var.copy())
                return _projected(T.batchnorm2d(x, g, b, s, train), np.random.default_rng(seed))

            return fn, [rng.standard_normal(shape) * 2 + 1, rng.standard_normal(c), rng.standard_normal(c)]

        return build

    def binary(op):
        def build(rng):
            shape = tuple(int(s) for s in rng.integers(1, 4, size=4))
            seed = int(rng.integers(1 << 31))
            return (lambda a, b: _projected(op(a, b), np.random.default_rng(seed))), [
                rng.standard_normal(shape),
                rng.standard_normal(shape),
            ]

        return build

    def linear(rng):
        n, f, k = (int(v) for v in rng.integers(1, 5, size=3))
        seed = int(rng.integers(1 << 31))
        fn = lambda x, w, b: _projected(T.linear(x, w, b), np.random.default_rng(seed))
        return fn, [rng.standard_normal((n, f)), rng.standard_normal((k, f)), rng.standard_normal(k)]

    def xent(rng):
        n, k = int(rng.integers(1, 6)), int(rng.integers(2, 6))
        labels = rng.integers(0, k, size=n)
        return (lambda z: T.softmax_cross_entropy(z, labels)), [rng.standard_normal((n, k)) * 3]

    def expand(rng):
        n, c = int(rng.integers(1, 3)), int(rng.integers(1, 5))
        seed = int(rng.integers(1 << 31))
        return (lambda x: _projected(T.expand_channels(x, c), np.random.default_rng(seed))), [rng.standard_normal((n, 1, 3, 4))]

    def shape4(rng):
        return tuple(int(s) for s in rng.integers(1, 5, size=4))

    return [
        ("conv2d[s1,p1]", conv(1, 1, (2, 3, 5, 5), 3)),
        ("conv2d[s1,p0]", conv(1, 0, (2, 3, 5, 5), 3, bias=False)),
        ("conv2d[s2,p1,k4]", conv(2, 1, (2, 2, 6, 6), 4, bias=False)),
        ("conv2d[s2,p0,k2]", conv(2, 0, (1, 3, 4, 4), 2)),
        ("relu", unary(lambda t: T.relu(t), shape4, _away_from_zero)),
        ("batchnorm2d[train]", bn(True)),
        ("batchnorm2d[eval]", bn(False)),
        ("global_avg_pool", unary(lambda t: T.global_avg_pool(t), shape4)),
        ("linear", linear),
        ("elementwise_merge[add]", binary(lambda a, b: T.elementwise_merge(a, b, "add"))),
        ("elementwise_merge[mul]", binary(lambda a, b: T.elementwise_merge(a, b, "mul"))),
        ("add", binary(lambda a, b: T.add(a, b))),
        ("expand_channels", expand),
        ("softmax_cross_entropy", xent),
    ]


def _model_case(variant_id: str):
    from .models import BackboneConfig, build_model, model_forward

    def build(rng):
        cfg = BackboneConfig(num_classes=8, input_size=8, stem_channels=3, stage_channels=(3, 4, 4), blocks_per_stage=1)
        model = build_model(variant_id, cfg, seed=int(rng.integers(1 << 31)), dtype=np.float64)
        # move every parameter off its special initial value so all paths carry gradient
        for p in model.parameters():
            p.value.data += 0.3 * rng.standard_normal(p.value.shape)
        n = 4
        images = rng.random((n, 3, 8, 8))
        masks = (rng.random((n, 1, 8, 8)) > 0.5).astype(np.float64)
        labels = rng.integers(0, 8, size=n)
        # one train-mode pass fills the running statistics; the check itself
        # runs in eval mode, where a batch of 4 does not dominate the curvature
        model_forward(model, images, masks, train=True)
        names = list(model.params)

        def fn(*values):
            for name, v in zip(names, values):
                model.params[name].value = v
            return T.softmax_cross_entropy(model_forward(model, images, masks, train=False), labels)

        return fn, [model.params[n].value.data.copy() for n in names]

    return build


def model_cases(variants: Sequence[str] = ("plain", "soft:first:add", "soft:third:mul", "soft:all:mul", "hard:image", "hard:feature")):
    return [(f"model[{v}]", _model_case(v)) for v in variants]


def run_suite(
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    eps: float = DEFAULT_EPS,
    include_model: bool = True,
    max_coords: int = 20,
) -> List[CheckResult]:
    """Max relative error per primitive (and per small model) over ``seeds``."""
    cases = _primitive_cases() + (model_cases() if include_model else [])
    results = []
    for name, build in cases:
        worst, checked, skipped = 0.0, 0, 0
        is_model = name.startswith("model")
        for seed in seeds:
            rng = np.random.default_rng(seed)
            fn, inputs = build(rng)
            # model cases sample a handful of coordinates per parameter tensor
            rep = grad_check_report(
                fn, inputs, eps=eps, max_coords=3 if is_model else max_coords, rng=rng, skip_kinks=is_model
            )
            worst = max(worst, rep.max_rel_error)
            checked += rep.checked
            skipped += rep.skipped
        results.append(CheckResult(name, worst, len(seeds), checked, skipped))
    return results
