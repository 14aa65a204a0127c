"""Loss, Adam and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple, Protocol

import numpy as np

from .data import DataExhausted
from .models import Forward, Sae
from .numeric import NumericError, ShapeError

logger = logging.getLogger(__name__)

L1_VARIANTS = ("relu",)
L0_VARIANTS = ("jumprelu",)
UNPENALIZED = ("topk", "batch_topk", "sparsemax", "softmax")


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps_adam: float = 1e-8
    batch_size: int = 32
    total_samples: int = 200_000
    lam: float = 1e-3
    k: int = 32
    seed: int = 0
    dead_window: int = 10_000
    log_every: int = 100
    grad_clip: float | None = None
    history_path: str | None = None
    record_wallclock: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 < b < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {b}")
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.total_samples < 0:
            raise ValueError(f"total_samples must be nonnegative, got {self.total_samples}")
        if self.dead_window < 1 or self.log_every < 1:
            raise ValueError("dead_window and log_every must be positive")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError(f"grad_clip must be positive when set, got {self.grad_clip}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


@dataclass
class TrainState:
    step: int = 0
    samples_seen: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    last_active: np.ndarray | None = None

    @classmethod
    def for_model(cls, model: Sae) -> "TrainState":
        return cls(
            m={name: np.zeros_like(p) for name, p in model.params.items()},
            v={name: np.zeros_like(p) for name, p in model.params.items()},
            last_active=np.zeros(model.m, dtype=np.int64),
        )


class LossSeeds(NamedTuple):
    d_recon: np.ndarray
    d_codes: np.ndarray | None
    l0_weight: float


class DataSource(Protocol):
    def next_batch(self, n: int) -> np.ndarray: ...


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------


def loss(recon, x, codes, variant: str, lam: float) -> tuple[float, LossSeeds]:
    """Mean over the batch of ``||x - recon||^2 + lam * S(codes)``.

    S is L1 for relu, L0 for jumprelu (its gradient reaches the thresholds
    through the straight-through estimator, via ``l0_weight``), and zero for
    the TopK family and the simplex attentions. For gated models the sparsity
    term lives in :func:`gated_aux_loss`.
    """
    recon = np.asarray(recon, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.float64)
    if recon.shape != x.shape:
        raise ShapeError(f"recon shape {recon.shape} != input shape {x.shape}")
    if codes.ndim != 2 or codes.shape[0] != x.shape[0]:
        raise ShapeError(f"codes shape {codes.shape} does not match batch of {x.shape[0]}")
    n = x.shape[0]
    resid = recon - x
    value = float(np.sum(resid * resid)) / n
    d_recon = 2.0 * resid / n
    d_codes = None
    l0_weight = 0.0
    if variant in L1_VARIANTS:
        value += lam * float(np.sum(np.abs(codes))) / n
        d_codes = lam * np.sign(codes) / n
    elif variant in L0_VARIANTS:
        value += lam * float(np.count_nonzero(codes)) / n
        l0_weight = lam / n
    elif variant == "gated" or variant in UNPENALIZED:
        pass
    else:
        raise ValueError(f"unknown loss variant {variant!r}")
    return value, LossSeeds(d_recon, d_codes, l0_weight)


def gated_aux_loss(model: Sae, fwd: Forward, lam: float) -> tuple[float, np.ndarray]:
    """Gate sparsity plus the frozen-decoder auxiliary reconstruction.

    ``lam * |relu(gate_pre)|_1 + ||x - (relu(gate_pre) W_dec^T + b_dec)||^2``,
    averaged over the batch, with no gradient into the decoder. Returns the
    value and its gradient w.r.t. the gate pre-activation.
    """
    gate_pre = fwd.cache["gate_pre"]
    n = gate_pre.shape[0]
    active = gate_pre > 0
    g = np.maximum(gate_pre, 0.0)
    aux_recon = g @ model.params["W_dec"].T + model.params["b_dec"]
    resid = aux_recon - fwd.x
    value = (lam * float(np.sum(g)) + float(np.sum(resid * resid))) / n
    d_g = (lam + 2.0 * resid @ model.params["W_dec"]) / n
    return value, np.where(active, d_g, 0.0)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


def clip_grads(grads: dict, max_norm: float) -> dict:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return grads
    scale = max_norm / total
    return {name: g * scale for name, g in grads.items()}


def adam_step(state: TrainState, params: dict, grads: dict, config: TrainConfig, model: Sae | None = None) -> None:
    """Bias-corrected Adam, in place; then the model's post-step projection."""
    if config.grad_clip is not None:
        grads = clip_grads(grads, config.grad_clip)
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.eps_adam)
    if model is not None:
        model.postprocess()


# --------------------------------------------------------------------------
# dead concepts
# --------------------------------------------------------------------------


def track_dead(codes, state: TrainState, threshold: float = 0.0, dead_window: int = 10_000) -> int:
    """Advance the sample counter by the batch and return how many concepts are dead.

    A concept is live for a batch if any row activates it above ``threshold``;
    it is dead once ``dead_window`` samples have passed since it was last live.
    """
    if threshold < 0:
        raise ValueError(f"threshold must be nonnegative, got {threshold}")
    codes = np.asarray(codes)
    if state.last_active is None:
        state.last_active = np.zeros(codes.shape[1], dtype=np.int64)
    state.samples_seen += codes.shape[0]
    live = np.any(np.abs(codes) > threshold, axis=0)
    state.last_active[live] = state.samples_seen
    return int(np.count_nonzero(state.samples_seen - state.last_active >= dead_window))


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------


@dataclass
class HistoryRow:
    step: int
    loss: float
    mean_l0: float
    dead_count: int
    wallclock_ms: int

    def tsv(self) -> str:
        return f"{self.step}\t{self.loss:.9g}\t{self.mean_l0:.6g}\t{self.dead_count}\t{self.wallclock_ms}"


HISTORY_COLUMNS = ("step", "loss", "mean_L0", "dead_count", "wallclock_ms")


@dataclass
class TrainResult:
    model: Sae
    state: TrainState
    history: list[HistoryRow]


def train_step(model: Sae, x: np.ndarray, state: TrainState, config: TrainConfig) -> tuple[float, Forward]:
    fwd = model.forward(x)
    value, seeds = loss(fwd.recon, x, fwd.codes, model.activation, config.lam)
    d_gate_pre = None
    if model.activation == "gated":
        aux, d_gate_pre = gated_aux_loss(model, fwd, config.lam)
        value += aux
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss at step {state.step}")
    grads = model.backward(fwd, seeds.d_recon, seeds.d_codes, l0_weight=seeds.l0_weight, d_gate_pre=d_gate_pre)
    adam_step(state, model.params, grads, config, model)
    return value, fwd


def write_history(path, history: list[HistoryRow]) -> None:
    lines = ["\t".join(HISTORY_COLUMNS)] + [row.tsv() for row in history]
    Path(path).write_text("\n".join(lines) + "\n")


def read_history(path) -> list[HistoryRow]:
    rows = []
    for line in Path(path).read_text().splitlines()[1:]:
        if not line.strip():
            continue
        step, value, l0, dead, ms = line.split("\t")
        rows.append(HistoryRow(int(step), float(value), float(l0), int(dead), int(ms)))
    return rows


def train(model: Sae, source: DataSource, config: TrainConfig, state: TrainState | None = None) -> TrainResult:
    """Train ``model`` in place until ``config.total_samples`` have been consumed."""
    state = state or TrainState.for_model(model)
    history: list[HistoryRow] = []
    start = time.perf_counter()
    consumed = 0
    window_loss: list[float] = []
    window_l0: list[float] = []
    dead = 0
    while consumed < config.total_samples:
        n = min(config.batch_size, config.total_samples - consumed)
        try:
            x = np.asarray(source.next_batch(n), dtype=np.float64)
        except DataExhausted as exc:
            raise DataExhausted(
                f"data ran out after {consumed} of {config.total_samples} samples: {exc}"
            ) from exc
        if x.shape[0] != n:
            raise DataExhausted(f"data ran out after {consumed + x.shape[0]} of {config.total_samples} samples")
        value, fwd = train_step(model, x, state, config)
        consumed += n
        dead = track_dead(fwd.codes, state, 0.0, config.dead_window)
        window_loss.append(value)
        window_l0.append(float(np.count_nonzero(fwd.codes)) / n)

        last = consumed >= config.total_samples
        if state.step % config.log_every == 0 or last:
            ms = int((time.perf_counter() - start) * 1000) if config.record_wallclock else 0
            history.append(HistoryRow(state.step, float(np.mean(window_loss)), float(np.mean(window_l0)), dead, ms))
            logger.debug("step %d loss %.6g L0 %.3g dead %d", state.step, history[-1].loss, history[-1].mean_l0, dead)
            window_loss.clear()
            window_l0.clear()

    if config.history_path:
        write_history(config.history_path, history)
    return TrainResult(model, state, history)
