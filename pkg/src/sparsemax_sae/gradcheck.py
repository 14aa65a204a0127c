"""Finite-difference checks for the hand-written backward passes."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .models import Forward, Sae


def numerical_grad(f: Callable[[], float], param: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``param`` (perturbed in place)."""
    grad = np.zeros_like(param)
    for idx in np.ndindex(param.shape):
        orig = param[idx]
        param[idx] = orig + step
        hi = f()
        param[idx] = orig - step
        lo = f()
        param[idx] = orig
        grad[idx] = (hi - lo) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Max entrywise ``|a - b| / max(|a|, |b|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def kink_margin(model: Sae, fwd: Forward) -> float:
    """Distance of the forward pass from the nearest non-differentiable point.

    Finite differences are only meaningful when this is well above the step.
    """
    c = fwd.cache
    if model.activation == "gated":
        return float(min(np.min(np.abs(c["gate_pre"])), np.min(np.abs(c["mag_pre"]))))
    ctx = c["ctx"]
    pre = ctx.pre
    if ctx.kind == "softmax":
        return np.inf
    if ctx.kind == "relu":
        return float(np.min(np.abs(pre)))
    if ctx.kind == "jumprelu":
        theta = model.params["theta"]
        return float(np.min(np.abs(pre - theta)))
    if ctx.kind == "sparsemax":
        return float(np.min(np.abs(pre - ctx.tau[:, None])))
    if ctx.kind in ("topk", "batch_topk"):
        k = model.k if ctx.kind == "topk" else model.k * pre.shape[0]
        r = np.maximum(pre, 0.0)
        rows = r if ctx.kind == "topk" else r.reshape(1, -1)
        s = -np.sort(-rows, axis=-1)
        gap = np.min(s[:, k - 1] - s[:, k]) if k < s.shape[1] else np.inf
        return float(min(gap, np.min(np.abs(pre))))
    raise ValueError(f"no kink rule for {ctx.kind!r}")


def check_model_grads(
    model: Sae,
    x: np.ndarray,
    *,
    step: float = 1e-5,
    skip: tuple[str, ...] = (),
) -> dict[str, float]:
    """Relative error of every parameter gradient of mean squared reconstruction error."""
    n = x.shape[0]

    def value() -> float:
        r = model.forward(x).recon - x
        return float(np.sum(r * r)) / n

    fwd = model.forward(x)
    analytic = model.backward(fwd, 2.0 * (fwd.recon - x) / n)
    errors = {}
    for name, p in model.params.items():
        if name in skip:
            continue
        errors[name] = relative_error(analytic[name], numerical_grad(value, p, step))
    return errors
