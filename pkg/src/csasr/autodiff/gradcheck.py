"""Central finite-difference oracle for backward rules."""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from .tensor import Tensor, backward


def _numeric_grad(f: Callable[[], Tensor], x: Tensor, eps: float, indices: Iterable) -> dict:
    out = {}
    flat = x.data.reshape(-1)
    for i in indices:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f().data)
        flat[i] = orig - eps
        fm = float(f().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * eps)
    return out


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor). The floor keeps gradients that are zero
    up to finite-difference rounding from producing arbitrary ratios."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    indices: Optional[Iterable[int]] = None,
) -> float:
    """Max relative error between the analytic gradient of ``f`` at ``x`` and
    a central difference, over the flat ``indices`` (all elements by default).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not np.all(np.isfinite(x.data)):
        raise ValueError("finite_difference_check: input contains NaN or inf")
    x.requires_grad = True
    x.grad = None
    loss = f(x)
    backward(loss)
    analytic = x.grad.reshape(-1) if x.grad is not None else np.zeros(x.data.size)
    idx = list(range(x.data.size)) if indices is None else list(indices)
    numeric = _numeric_grad(lambda: f(x), x, eps, idx)
    num = np.array([numeric[i] for i in idx])
    if not idx:
        return 0.0
    return float(relative_errors(analytic[idx], num).max())


def parameter_gradients(
    loss_fn: Callable[[], Tensor],
    params: dict,
    eps: float = 1e-5,
    max_per_param: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> dict:
    """``name -> (analytic, numeric)`` flat gradient samples of ``loss_fn``
    for every named parameter. ``max_per_param`` subsamples coordinates of
    large tensors."""
    for p in params.values():
        p.grad = np.zeros_like(p.data)
    backward(loss_fn())
    rng = rng or np.random.default_rng(0)
    out = {}
    for name, p in params.items():
        n = p.data.size
        if max_per_param is not None and n > max_per_param:
            idx = sorted(rng.choice(n, size=max_per_param, replace=False).tolist())
        else:
            idx = list(range(n))
        numeric = _numeric_grad(loss_fn, p, eps, idx)
        out[name] = (p.grad.reshape(-1)[idx].copy(), np.array([numeric[i] for i in idx]))
    return out


def check_parameters(
    loss_fn: Callable[[], Tensor],
    params: dict,
    eps: float = 1e-5,
    max_per_param: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-8,
) -> dict:
    """Finite-difference check of ``loss_fn`` w.r.t. every named parameter;
    returns ``name -> max relative error``."""
    pairs = parameter_gradients(loss_fn, params, eps, max_per_param, rng)
    return {name: float(relative_errors(a, n, floor).max()) for name, (a, n) in pairs.items()}
