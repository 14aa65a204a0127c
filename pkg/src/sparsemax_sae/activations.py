"""Activation functions for SAE encoders.

Everything here works on the last axis ("concepts"). ``sparsemax`` is the
single-vector form returning a :class:`SparseCode`; ``sparsemax_rows`` is
the batched form the models use. Both follow the same sort/cumsum recipe.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .numeric import NumericError, ShapeError

ORACLE_MAX_DIM = 16


@dataclass(frozen=True)
class SparseCode:
    values: np.ndarray
    threshold: float
    support: np.ndarray

    @property
    def support_size(self) -> int:
        return int(self.support.size)


@dataclass
class JumpReluParams:
    thresholds: np.ndarray
    bandwidth: float = 1e-3

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        if np.any(self.thresholds < 0):
            raise ValueError("JumpReLU thresholds must be nonnegative")
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")


class JumpReluInfo(NamedTuple):
    mask: np.ndarray
    theta_grad_l0: np.ndarray
    theta_grad_out: np.ndarray


# --------------------------------------------------------------------------
# sparsemax
# --------------------------------------------------------------------------


def _check_scores(z: np.ndarray) -> None:
    if z.shape[-1] == 0:
        raise ShapeError("sparsemax needs at least one coordinate")
    if not np.all(np.isfinite(z)):
        raise NumericError("sparsemax input contains non-finite entries")


def sparsemax_rows(z) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise simplex projection.

    Returns ``(p, tau, k)`` with ``p`` the same shape as ``z`` and one
    threshold and support size per row.
    """
    z = np.asarray(z, dtype=np.float64)
    _check_scores(z)
    squeeze = z.ndim == 1
    zz = np.atleast_2d(z)
    n, m = zz.shape
    order = np.argsort(-zz, axis=-1, kind="stable")
    z_sorted = np.take_along_axis(zz, order, axis=-1)
    cumsum = np.cumsum(z_sorted, axis=-1)
    # Rank r is in the support iff s_r = sum_{i<=r} (z_(i) - z_(r)) < 1. Building
    # s_r from the nonnegative gaps between sorted scores keeps it monotone, so
    # tied scores enter together and a top margin >= 1 always gives k = 1.
    gaps = (z_sorted[:, :-1] - z_sorted[:, 1:]) * np.arange(1, m)
    s = np.concatenate([np.zeros((n, 1)), np.cumsum(gaps, axis=-1)], axis=-1)
    k = np.count_nonzero(s < 1.0, axis=-1)
    tau = (np.take_along_axis(cumsum, (k - 1)[:, None], axis=-1)[:, 0] - 1.0) / k
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(m)[None, :].repeat(n, axis=0), axis=-1)
    p = np.where(ranks < k[:, None], zz - tau[:, None], 0.0)
    # s_k just below 1 can leave z_(k) - tau <= 0 after rounding; shrink those rows
    for i in np.flatnonzero(np.any(p < 0, axis=-1) | np.any((ranks < k[:, None]) & (p == 0), axis=-1)):
        while k[i] > 1 and z_sorted[i, k[i] - 1] - (cumsum[i, k[i] - 1] - 1.0) / k[i] <= 0:
            k[i] -= 1
        tau[i] = (cumsum[i, k[i] - 1] - 1.0) / k[i]
        p[i] = np.where(ranks[i] < k[i], zz[i] - tau[i], 0.0)
    if squeeze:
        return p[0], tau[0], k[0]
    return p, tau, k


def sparsemax(z) -> SparseCode:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ShapeError(f"sparsemax expects a vector, got shape {z.shape}")
    p, tau, _ = sparsemax_rows(z)
    return SparseCode(values=p, threshold=float(tau), support=np.flatnonzero(p > 0))


def sparsemax_vjp(code: SparseCode, upstream) -> np.ndarray:
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != code.values.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != code shape {code.values.shape}")
    return sparsemax_vjp_rows(code.values, upstream)


def sparsemax_vjp_rows(p: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Jacobian-vector product of sparsemax given its output ``p``.

    On the support the Jacobian is ``I - 11^T/k``; elsewhere it is zero.
    """
    mask = p > 0
    k = np.sum(mask, axis=-1, keepdims=True)
    mean = np.sum(np.where(mask, upstream, 0.0), axis=-1, keepdims=True) / k
    return np.where(mask, upstream - mean, 0.0)


def sparsemax_oracle(z) -> SparseCode:
    """Brute-force projection: try every nonempty support and keep the KKT-feasible one.

    Only meant for checking :func:`sparsemax`; cost is ``O(2^M)``.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ShapeError(f"oracle expects a vector, got shape {z.shape}")
    m = z.size
    if m > ORACLE_MAX_DIM:
        raise ValueError(f"oracle enumerates 2^M supports; M={m} exceeds {ORACLE_MAX_DIM}")
    _check_scores(z)

    # Index s of each array below is a bitmask over coordinates; each array is
    # built by doubling as coordinates are added one at a time.
    sums = np.zeros(1)
    sizes = np.zeros(1, dtype=np.int64)
    min_in = np.full(1, np.inf)
    max_out = np.full(1, -np.inf)
    for zi in z:
        sums = np.concatenate([sums, sums + zi])
        sizes = np.concatenate([sizes, sizes + 1])
        min_in = np.concatenate([min_in, np.minimum(min_in, zi)])
        max_out = np.concatenate([np.maximum(max_out, zi), max_out])

    nonempty = sizes > 0
    tau = np.where(nonempty, (sums - 1.0) / np.maximum(sizes, 1), np.nan)
    feasible = nonempty & (min_in - tau > 0) & (max_out <= tau)
    candidates = np.flatnonzero(feasible)
    if candidates.size == 0:
        # rounding at a tie; fall back to the least-violating support
        violation = np.maximum(tau - min_in, 0) + np.maximum(max_out - tau, 0)
        violation[~nonempty] = np.inf
        best = int(np.argmin(violation))
    else:
        best = int(candidates[np.argmax(sizes[candidates])])

    members = np.array([(best >> i) & 1 for i in range(m)], dtype=bool)
    t = float(tau[best])
    values = np.where(members, z - t, 0.0)
    return SparseCode(values=values, threshold=t, support=np.flatnonzero(members))


# --------------------------------------------------------------------------
# dense and thresholded activations
# --------------------------------------------------------------------------


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_vjp(p: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return p * (upstream - np.sum(upstream * p, axis=-1, keepdims=True))


def relu(z) -> np.ndarray:
    return np.maximum(np.asarray(z, dtype=np.float64), 0.0)


def jumprelu(z, params: JumpReluParams) -> tuple[np.ndarray, JumpReluInfo]:
    """``z * 1[z > theta]`` plus straight-through estimates for the threshold.

    The threshold gradients use a rectangle kernel of width ``bandwidth``:
    d/dtheta H(z - theta) ~ -K((z - theta)/eps)/eps, and
    d/dtheta jumprelu(z) ~ -theta * K((z - theta)/eps)/eps.
    """
    z = np.asarray(z, dtype=np.float64)
    theta = params.thresholds
    eps = params.bandwidth
    mask = z > theta
    rect = (np.abs(z - theta) < eps / 2).astype(np.float64)
    info = JumpReluInfo(
        mask=mask,
        theta_grad_l0=-rect / eps,
        theta_grad_out=-theta * rect / eps,
    )
    return np.where(mask, z, 0.0), info


def _topk_mask(z: np.ndarray, k: int) -> np.ndarray:
    # stable sort of -z: equal values keep index order, so lower index wins ties
    order = np.argsort(-z, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(z.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def topk(z, k: int) -> np.ndarray:
    """Keep the ``k`` largest entries of ``relu(z)`` per row."""
    z = relu(z)
    m = z.shape[-1]
    if not 1 <= k <= m:
        raise ValueError(f"k must lie in [1, {m}], got {k}")
    return np.where(_topk_mask(z, k), z, 0.0)


def batch_topk(z, k: int) -> np.ndarray:
    """Keep the ``n*k`` largest entries of ``relu(z)`` across the whole batch."""
    z = relu(np.asarray(z, dtype=np.float64))
    if z.ndim != 2:
        raise ShapeError(f"batch_topk expects an n x M matrix, got shape {z.shape}")
    n, m = z.shape
    if not 1 <= k <= m:
        raise ValueError(f"k must lie in [1, {m}], got {k}")
    flat = z.reshape(-1)
    mask = _topk_mask(flat, n * k).reshape(n, m)
    return np.where(mask, z, 0.0)


# --------------------------------------------------------------------------
# matrix-level dispatch used by the models
# --------------------------------------------------------------------------

ACTIVATIONS = ("relu", "jumprelu", "topk", "batch_topk", "sparsemax", "softmax")


@dataclass
class ActivationCtx:
    kind: str
    pre: np.ndarray
    out: np.ndarray
    mask: np.ndarray | None = None
    tau: np.ndarray | None = None
    jump: JumpReluInfo | None = None


def activate(
    kind: str,
    pre: np.ndarray,
    *,
    k: int | None = None,
    jump: JumpReluParams | None = None,
) -> tuple[np.ndarray, ActivationCtx]:
    if kind == "relu":
        out = relu(pre)
        return out, ActivationCtx(kind, pre, out, mask=pre > 0)
    if kind == "topk":
        out = topk(pre, k)
        return out, ActivationCtx(kind, pre, out, mask=out > 0)
    if kind == "batch_topk":
        out = batch_topk(pre, k)
        return out, ActivationCtx(kind, pre, out, mask=out > 0)
    if kind == "jumprelu":
        out, info = jumprelu(pre, jump)
        return out, ActivationCtx(kind, pre, out, mask=info.mask, jump=info)
    if kind == "sparsemax":
        out, tau, _ = sparsemax_rows(pre)
        return out, ActivationCtx(kind, pre, out, mask=out > 0, tau=tau)
    if kind == "softmax":
        out = softmax(pre)
        return out, ActivationCtx(kind, pre, out)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activate_backward(ctx: ActivationCtx, dout: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the pre-activation (threshold terms are handled by the caller)."""
    if ctx.kind in ("relu", "topk", "batch_topk", "jumprelu"):
        return np.where(ctx.mask, dout, 0.0)
    if ctx.kind == "sparsemax":
        return sparsemax_vjp_rows(ctx.out, dout)
    if ctx.kind == "softmax":
        return softmax_vjp(ctx.out, dout)
    raise ValueError(f"unknown activation {ctx.kind!r}")
