"""SAE architectures with exact reverse-mode gradients.

Two families share one interface:

* :class:`MlpSae` -- ``z = act(W_enc (x - b_enc))``, ``x_hat = W_dec z + b_dec``.
* :class:`AttnSae` -- the input row is a query against a learned concept
  matrix ``C``: ``Q = x W_Q``, ``K = C^T W_K``, ``V = C^T W_V``,
  ``x_hat = act(Q K^T / sqrt(d)) V``.

Parameters live in ``model.params`` (name -> float64 array) so the optimizer
and checkpoint code can treat every model uniformly. ``forward`` returns a
:class:`Forward` holding whatever ``backward`` needs.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import activations as act
from .numeric import Rng, ShapeError, as_matrix, randn, unit_columns

MLP_ACTIVATIONS = ("relu", "jumprelu", "topk", "batch_topk", "gated", "sparsemax", "softmax")
ATTN_ACTIVATIONS = ("sparsemax", "softmax", "relu", "jumprelu", "topk", "batch_topk")
TOPK_FAMILY = ("topk", "batch_topk")
# Query/key init std is qk_init_scale/sqrt(d). At 1.0 the initial scores are
# nearly flat, sparsemax starts with full support and training settles in its
# affine (dense) regime; 3.0 starts in the sparse regime.
DEFAULT_QK_INIT_SCALE = 3.0


class OvercompletenessWarning(UserWarning):
    pass


class MissingCacheError(RuntimeError):
    pass


@dataclass
class Forward:
    x: np.ndarray
    codes: np.ndarray
    recon: np.ndarray
    cache: dict = field(default_factory=dict)

    @property
    def thresholds(self) -> np.ndarray | None:
        return self.cache.get("tau")


def _check_dims(d: int, m: int) -> None:
    if d < 1 or m < 1:
        raise ShapeError(f"d and M must be positive, got d={d}, M={m}")
    if m < d:
        raise ShapeError(f"dictionary must be overcomplete: M={m} < d={d}")
    if m < 4 * d:
        warnings.warn(f"M={m} is less than 4*d={4 * d}", OvercompletenessWarning, stacklevel=3)


def _check_input(x, d: int) -> np.ndarray:
    x = as_matrix(x, "input")
    if x.shape[1] != d:
        raise ShapeError(f"input has {x.shape[1]} columns, model expects d={d}")
    return x


class Sae:
    arch: str = ""
    activation: str
    d: int
    m: int
    k: int | None
    bandwidth: float
    params: dict[str, np.ndarray]

    def _activation_kwargs(self) -> dict:
        if self.activation == "jumprelu":
            jp = act.JumpReluParams(np.maximum(self.params["theta"], 0.0), self.bandwidth)
            return {"jump": jp}
        if self.activation in TOPK_FAMILY:
            return {"k": self.k}
        return {}

    def _activation_param_grads(self, ctx: act.ActivationCtx, dcodes, l0_weight: float) -> dict:
        if ctx.kind != "jumprelu":
            return {}
        info = ctx.jump
        g = dcodes * info.theta_grad_out + l0_weight * info.theta_grad_l0
        return {"theta": g.sum(axis=0)}

    def postprocess(self) -> None:
        """Projection applied after every optimizer step."""
        if "theta" in self.params:
            np.maximum(self.params["theta"], 0.0, out=self.params["theta"])

    def dictionary(self) -> np.ndarray:
        raise NotImplementedError

    def copy(self):
        other = object.__new__(type(self))
        other.__dict__.update(self.__dict__)
        other.params = {name: p.copy() for name, p in self.params.items()}
        return other

    def header(self) -> dict:
        return {
            "architecture": self.arch,
            "d": self.d,
            "M": self.m,
            "activation": self.activation,
            "K": self.k if self.k is not None else 0,
            "bandwidth": repr(float(self.bandwidth)),
            "seed": self.seed,
        }

    def __call__(self, x) -> Forward:
        return self.forward(x)


# --------------------------------------------------------------------------
# MLP SAE
# --------------------------------------------------------------------------


@dataclass
class GatedParams:
    """Gate/magnitude parameters; the gate weight is shared with the encoder weight."""

    W_gate: np.ndarray
    b_gate: np.ndarray
    b_mag: np.ndarray
    r_mag: np.ndarray


class MlpSae(Sae):
    arch = "mlp"

    def __init__(
        self,
        d: int,
        m: int,
        activation: str = "relu",
        *,
        k: int | None = None,
        bandwidth: float = 1e-3,
        theta_init: float = 1e-3,
        seed: int = 0,
        rng: Rng | None = None,
    ):
        if activation not in MLP_ACTIVATIONS:
            raise ValueError(f"unknown MLP activation {activation!r}; expected one of {MLP_ACTIVATIONS}")
        _check_dims(d, m)
        if activation in TOPK_FAMILY and (k is None or not 1 <= k <= m):
            raise ValueError(f"{activation} needs 1 <= k <= M={m}, got k={k}")
        self.d, self.m = d, m
        self.activation = activation
        self.k = k if activation in TOPK_FAMILY else None
        self.bandwidth = bandwidth
        self.seed = seed
        rng = rng or Rng(seed)

        w_dec = unit_columns(randn(rng, d, m, 1.0))
        self.params = {
            "W_enc": w_dec.T.copy(),
            "b_enc": np.zeros(d),
            "W_dec": w_dec,
            "b_dec": np.zeros(d),
        }
        if activation == "jumprelu":
            self.params["theta"] = np.full(m, float(theta_init))
        if activation == "gated":
            self.params["b_gate"] = np.zeros(m)
            self.params["b_mag"] = np.zeros(m)
            self.params["r_mag"] = np.zeros(m)

    @property
    def gated(self) -> GatedParams | None:
        if self.activation != "gated":
            return None
        p = self.params
        return GatedParams(p["W_enc"], p["b_gate"], p["b_mag"], p["r_mag"])

    def dictionary(self) -> np.ndarray:
        return self.params["W_dec"]

    def postprocess(self) -> None:
        super().postprocess()
        self.params["W_dec"][...] = unit_columns(self.params["W_dec"])

    def forward(self, x) -> Forward:
        return mlp_forward(self, x)

    def backward(self, fwd: Forward, d_recon, d_codes=None, *, l0_weight: float = 0.0, d_gate_pre=None) -> dict:
        return mlp_backward(self, fwd, d_recon, d_codes, l0_weight=l0_weight, d_gate_pre=d_gate_pre)


def gated_encode(params: GatedParams, shared: MlpSae, x) -> tuple[np.ndarray, dict]:
    x = _check_input(x, shared.d)
    centered = x - shared.params["b_dec"]
    h = centered @ params.W_gate.T
    gate_pre = h + params.b_gate
    gate = gate_pre > 0
    mag_pre = np.exp(params.r_mag) * h + params.b_mag
    codes = np.where(gate, np.maximum(mag_pre, 0.0), 0.0)
    cache = {"centered": centered, "h": h, "gate_pre": gate_pre, "gate": gate, "mag_pre": mag_pre}
    return codes, cache


def mlp_forward(model: MlpSae, x) -> Forward:
    x = _check_input(x, model.d)
    p = model.params
    if model.activation == "gated":
        codes, cache = gated_encode(model.gated, model, x)
    else:
        shifted = x - p["b_enc"]
        pre = shifted @ p["W_enc"].T
        codes, ctx = act.activate(model.activation, pre, **model._activation_kwargs())
        cache = {"shifted": shifted, "ctx": ctx}
        if ctx.tau is not None:
            cache["tau"] = ctx.tau
    recon = codes @ p["W_dec"].T + p["b_dec"]
    return Forward(x=x, codes=codes, recon=recon, cache=cache)


def mlp_backward(
    model: MlpSae,
    fwd: Forward | None,
    d_recon,
    d_codes=None,
    *,
    l0_weight: float = 0.0,
    d_gate_pre=None,
) -> dict:
    """Gradients of a scalar loss given its gradient w.r.t. ``recon`` (and optionally ``codes``).

    ``d_gate_pre`` carries the gated auxiliary-loss gradient w.r.t. the gate
    pre-activation; the Heaviside gate itself passes no gradient.
    """
    if fwd is None or not fwd.cache:
        raise MissingCacheError("mlp_backward needs the Forward returned by mlp_forward")
    p = model.params
    d_recon = np.asarray(d_recon, dtype=np.float64)
    if d_recon.shape != fwd.recon.shape:
        raise ShapeError(f"d_recon shape {d_recon.shape} != recon shape {fwd.recon.shape}")
    grads = {
        "W_dec": d_recon.T @ fwd.codes,
        "b_dec": d_recon.sum(axis=0),
    }
    dcodes = d_recon @ p["W_dec"]
    if d_codes is not None:
        dcodes = dcodes + d_codes

    c = fwd.cache
    if model.activation == "gated":
        dmag_pre = np.where(c["gate"] & (c["mag_pre"] > 0), dcodes, 0.0)
        scale = np.exp(p["r_mag"])
        grads["r_mag"] = (dmag_pre * scale * c["h"]).sum(axis=0)
        grads["b_mag"] = dmag_pre.sum(axis=0)
        dh = dmag_pre * scale
        if d_gate_pre is not None:
            grads["b_gate"] = d_gate_pre.sum(axis=0)
            dh = dh + d_gate_pre
        else:
            grads["b_gate"] = np.zeros(model.m)
        grads["W_enc"] = dh.T @ c["centered"]
        grads["b_enc"] = np.zeros(model.d)
        grads["b_dec"] = grads["b_dec"] - (dh @ p["W_enc"]).sum(axis=0)
    else:
        ctx = c["ctx"]
        dpre = act.activate_backward(ctx, dcodes)
        grads["W_enc"] = dpre.T @ c["shifted"]
        grads["b_enc"] = -(dpre @ p["W_enc"]).sum(axis=0)
        grads.update(model._activation_param_grads(ctx, dcodes, l0_weight))
    return {name: grads[name] for name in p}


# --------------------------------------------------------------------------
# cross-attention SAE
# --------------------------------------------------------------------------


class AttnSae(Sae):
    arch = "attn"

    def __init__(
        self,
        d: int,
        m: int,
        attention: str = "sparsemax",
        *,
        k: int | None = None,
        bandwidth: float = 1e-3,
        theta_init: float = 1e-3,
        output_gain: bool = False,
        qk_init_scale: float = DEFAULT_QK_INIT_SCALE,
        seed: int = 0,
        rng: Rng | None = None,
    ):
        if attention not in ATTN_ACTIVATIONS:
            raise ValueError(f"unknown attention activation {attention!r}; expected one of {ATTN_ACTIVATIONS}")
        _check_dims(d, m)
        if attention in TOPK_FAMILY and (k is None or not 1 <= k <= m):
            raise ValueError(f"{attention} needs 1 <= k <= M={m}, got k={k}")
        self.d, self.m = d, m
        self.activation = attention
        self.k = k if attention in TOPK_FAMILY else None
        self.bandwidth = bandwidth
        self.output_gain = output_gain
        self.seed = seed
        rng = rng or Rng(seed)

        if not qk_init_scale > 0:
            raise ValueError(f"qk_init_scale must be positive, got {qk_init_scale}")
        scale = 1.0 / math.sqrt(d)
        self.params = {
            "C": unit_columns(randn(rng, d, m, 1.0)),
            "W_Q": randn(rng, d, d, qk_init_scale * scale),
            "W_K": randn(rng, d, d, qk_init_scale * scale),
            "W_V": randn(rng, d, d, scale),
        }
        if attention == "jumprelu":
            self.params["theta"] = np.full(m, float(theta_init))
        if output_gain:
            self.params["gain"] = np.ones(1)
            self.params["b_out"] = np.zeros(d)

    @property
    def attention(self) -> str:
        return self.activation

    def keys(self) -> np.ndarray:
        return self.params["C"].T @ self.params["W_K"]

    def values(self) -> np.ndarray:
        return self.params["C"].T @ self.params["W_V"]

    def dictionary(self) -> np.ndarray:
        # rows of V are what the codes actually mix
        return self.values().T

    def header(self) -> dict:
        h = super().header()
        h["output_gain"] = int(self.output_gain)
        return h

    def forward(self, x) -> Forward:
        return attn_forward(self, x)

    def backward(self, fwd: Forward, d_recon, d_codes=None, *, l0_weight: float = 0.0, d_gate_pre=None) -> dict:
        return attn_backward(self, fwd, d_recon, d_codes, l0_weight=l0_weight)


def attn_forward(model: AttnSae, x) -> Forward:
    x = _check_input(x, model.d)
    p = model.params
    q = x @ p["W_Q"]
    keys = model.keys()
    values = model.values()
    scores = (q @ keys.T) / math.sqrt(model.d)
    codes, ctx = act.activate(model.activation, scores, **model._activation_kwargs())
    mixed = codes @ values
    recon = p["gain"] * mixed + p["b_out"] if model.output_gain else mixed
    cache = {"q": q, "keys": keys, "values": values, "mixed": mixed, "ctx": ctx}
    if ctx.tau is not None:
        cache["tau"] = ctx.tau
    return Forward(x=x, codes=codes, recon=recon, cache=cache)


def attn_backward(model: AttnSae, fwd: Forward | None, d_recon, d_codes=None, *, l0_weight: float = 0.0) -> dict:
    if fwd is None or not fwd.cache:
        raise MissingCacheError("attn_backward needs the Forward returned by attn_forward")
    p = model.params
    c = fwd.cache
    d_recon = np.asarray(d_recon, dtype=np.float64)
    if d_recon.shape != fwd.recon.shape:
        raise ShapeError(f"d_recon shape {d_recon.shape} != recon shape {fwd.recon.shape}")
    grads = {}
    if model.output_gain:
        grads["gain"] = np.array([np.sum(d_recon * c["mixed"])])
        grads["b_out"] = d_recon.sum(axis=0)
        d_mixed = p["gain"] * d_recon
    else:
        d_mixed = d_recon

    dcodes = d_mixed @ c["values"].T
    if d_codes is not None:
        dcodes = dcodes + d_codes
    d_values = fwd.codes.T @ d_mixed
    ctx = c["ctx"]
    d_scores = act.activate_backward(ctx, dcodes) / math.sqrt(model.d)
    grads.update(model._activation_param_grads(ctx, dcodes, l0_weight))

    d_q = d_scores @ c["keys"]
    d_keys = d_scores.T @ c["q"]
    grads["W_Q"] = fwd.x.T @ d_q
    grads["W_K"] = p["C"] @ d_keys
    grads["W_V"] = p["C"] @ d_values
    grads["C"] = p["W_K"] @ d_keys.T + p["W_V"] @ d_values.T
    return {name: grads[name] for name in p}


# --------------------------------------------------------------------------
# construction helpers
# --------------------------------------------------------------------------

ARCHITECTURES = ("mlp", "attn")


def build_model(
    architecture: str,
    d: int,
    m: int,
    activation: str,
    *,
    k: int | None = None,
    bandwidth: float = 1e-3,
    output_gain: bool = False,
    qk_init_scale: float = DEFAULT_QK_INIT_SCALE,
    seed: int = 0,
) -> Sae:
    if architecture == "mlp":
        return MlpSae(d, m, activation, k=k, bandwidth=bandwidth, seed=seed)
    if architecture == "attn":
        return AttnSae(
            d, m, activation, k=k, bandwidth=bandwidth, output_gain=output_gain,
            qk_init_scale=qk_init_scale, seed=seed,
        )
    raise ValueError(f"unknown architecture {architecture!r}; expected one of {ARCHITECTURES}")
