"""Finite-difference cases, one per autodiff primitive."""

import numpy as np

from csasr.autodiff import Tensor, finite_difference_check, ops

SEEDS = range(5)
TOL = 1e-4


def weighted(out: Tensor, seed: int) -> Tensor:
    w = np.random.default_rng(1000 + seed).normal(size=out.shape)
    return ops.sum(ops.mul(out, w))


def check_all_inputs(fn, inputs, seed):
    """Gradcheck ``sum(w * fn(*inputs))`` w.r.t. each input in turn."""
    worst = 0.0
    for k in range(len(inputs)):
        def f(x, k=k):
            args = list(inputs)
            args[k] = x
            return weighted(fn(*args), seed)

        worst = max(worst, finite_difference_check(f, inputs[k]))
    return worst


def t(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


# one builder per primitive: seed -> (fn, inputs)
CASES = {
    "add": lambda r: (ops.add, [t(r, 3, 4), t(r, 4)]),
    "sub": lambda r: (ops.sub, [t(r, 2, 3), t(r, 2, 1)]),
    "neg": lambda r: (ops.neg, [t(r, 5)]),
    "mul": lambda r: (ops.mul, [t(r, 3, 4), t(r, 3, 4)]),
    "matmul": lambda r: (ops.matmul, [t(r, 2, 3, 4), t(r, 4, 5)]),
    "softmax": lambda r: (ops.softmax, [t(r, 3, 6)]),
    "log_softmax": lambda r: (ops.log_softmax, [t(r, 2, 6)]),
    "layer_norm": lambda r: (ops.layer_norm, [t(r, 4, 8), t(r, 8), t(r, 8)]),
    "swish": lambda r: (ops.swish, [t(r, 3, 5)]),
    "relu": lambda r: (ops.relu, [Tensor(r.uniform(0.1, 1, (3, 4)) * r.choice([-1, 1], (3, 4)), requires_grad=True)]),
    "glu": lambda r: (ops.glu, [t(r, 3, 6)]),
    "dropout": lambda r: (
        lambda x: ops.dropout(x, 0.3, np.random.default_rng(7), True),
        [t(r, 4, 5)],
    ),
    "masked_fill": lambda r: (
        lambda x: ops.softmax(ops.masked_fill(x, np.array([[False, True, False, False]] * 3))),
        [t(r, 3, 4)],
    ),
    "scale_grad": lambda r: (lambda x: ops.scale_grad(x, 1.0), [t(r, 3, 3)]),
    "transpose": lambda r: (lambda x: ops.transpose(x, (1, 0, 2)), [t(r, 2, 3, 4)]),
    "reshape": lambda r: (lambda x: ops.reshape(x, (6, 2)), [t(r, 3, 4)]),
    "slice": lambda r: (lambda x: ops.slice(x, (slice(None), slice(1, 3))), [t(r, 3, 4)]),
    "concat": lambda r: (lambda a, b: ops.concat([a, b], axis=-1), [t(r, 2, 3), t(r, 2, 4)]),
    "sum": lambda r: (lambda x: ops.sum(x, axis=1, keepdims=True), [t(r, 3, 4)]),
    "mean": lambda r: (lambda x: ops.mean(x, axis=0), [t(r, 3, 4)]),
    "embedding": lambda r: (lambda w: ops.embedding(w, np.array([[0, 2, 2], [4, 1, 0]])), [t(r, 5, 3)]),
    "depthwise_conv1d": lambda r: (ops.depthwise_conv1d, [t(r, 2, 7, 3), t(r, 3, 3), t(r, 3)]),
    "conv2d": lambda r: (
        lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1),
        [t(r, 2, 2, 7, 6), t(r, 3, 2, 3, 3), t(r, 3)],
    ),
}


# stop_gradient deliberately breaks agreement with finite differences; its
# backward contract is checked exactly below
EXACT_ONLY = {"stop_gradient"}
