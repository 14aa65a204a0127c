import math

import numpy as np
import pytest

from sparsemax_sae.data import ArraySource, DataExhausted, SuperpositionSpec, gen_superposition
from sparsemax_sae.models import AttnSae, MlpSae, build_model
from sparsemax_sae.numeric import NumericError
from sparsemax_sae.training import (
    HistoryRow,
    TrainConfig,
    TrainState,
    adam_step,
    clip_grads,
    gated_aux_loss,
    loss,
    read_history,
    track_dead,
    train,
    write_history,
)

SMALL = SuperpositionSpec(d=8, m_true=16, mean_active=2, seed=3)
VARIANTS = [
    ("mlp", "relu"),
    ("mlp", "jumprelu"),
    ("mlp", "topk"),
    ("mlp", "batch_topk"),
    ("mlp", "gated"),
    ("attn", "sparsemax"),
]


def small_model(arch, activation, seed=0):
    return build_model(arch, SMALL.d, 32, activation, k=2, seed=seed)


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------


def test_loss_perfect_recon():
    x = np.random.default_rng(0).normal(size=(3, 2))
    value, seeds = loss(x, x, np.zeros((3, 4)), "relu", 0.0)
    assert value == 0.0
    assert not np.any(seeds.d_recon)


def test_loss_definition():
    value, _ = loss(np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]]), np.zeros((1, 3)), "relu", 0.0)
    assert value == 1.0


def test_l1_weight():
    x = np.zeros((2, 2))
    codes = np.array([[4.0, 6.0, 0.0], [0.0, 0.0, 10.0]])
    value, seeds = loss(x, x, codes, "relu", 1e-3)
    assert value == pytest.approx(0.01, abs=1e-15)
    assert np.allclose(seeds.d_codes, 1e-3 * np.sign(codes) / 2)


def test_l0_weight():
    x = np.zeros((2, 2))
    codes = np.array([[4.0, 6.0, 0.0], [0.0, 0.0, 10.0]])
    value, seeds = loss(x, x, codes, "jumprelu", 0.5)
    assert value == pytest.approx(0.5 * 3 / 2)
    assert seeds.l0_weight == 0.25 and seeds.d_codes is None


@pytest.mark.parametrize("variant", ["topk", "batch_topk", "sparsemax", "softmax", "gated"])
def test_no_penalty_variants(variant):
    x = np.zeros((1, 2))
    value, seeds = loss(x, x, np.ones((1, 3)), variant, 1.0)
    assert value == 0.0 and seeds.d_codes is None


def test_loss_shape_and_variant_errors():
    with pytest.raises(ValueError):
        loss(np.zeros((1, 2)), np.zeros((1, 3)), np.zeros((1, 1)), "relu", 0.0)
    with pytest.raises(ValueError):
        loss(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 1)), "tanh", 0.0)


def test_gated_aux_loss_gradient():
    rng = np.random.default_rng(1)
    model = MlpSae(4, 16, "gated", seed=1)
    model.params["b_gate"][...] = rng.normal(size=16) * 0.1
    x = rng.normal(size=(3, 4))
    fwd = model.forward(x)
    value, d_gate_pre = gated_aux_loss(model, fwd, 0.3)
    h = 1e-6
    gate_pre = fwd.cache["gate_pre"]
    num = np.zeros_like(gate_pre)
    for idx in np.ndindex(gate_pre.shape):
        for sign in (1, -1):
            fwd.cache["gate_pre"] = gate_pre.copy()
            fwd.cache["gate_pre"][idx] += sign * h
            num[idx] += sign * gated_aux_loss(model, fwd, 0.3)[0] / (2 * h)
    assert np.allclose(d_gate_pre, num, atol=1e-6)
    assert value > 0


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


def test_adam_zero_gradients():
    cfg = TrainConfig()
    p = {"w": np.array([1.0, -2.0])}
    state = TrainState()
    adam_step(state, p, {"w": np.zeros(2)}, cfg)
    assert np.array_equal(p["w"], [1.0, -2.0])
    assert state.step == 1


def test_adam_scalar_recurrence():
    cfg = TrainConfig(learning_rate=0.01, beta1=0.9, beta2=0.99, eps_adam=1e-8)
    g, steps = 0.37, 25
    p = {"w": np.array([0.5])}
    state = TrainState()
    for _ in range(steps):
        adam_step(state, p, {"w": np.array([g])}, cfg)
    w, m, v = 0.5, 0.0, 0.0
    for t in range(1, steps + 1):
        m = 0.9 * m + 0.1 * g
        v = 0.99 * v + 0.01 * g * g
        w -= 0.01 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.99**t)) + 1e-8)
    assert abs(p["w"][0] - w) <= 1e-12


def test_clip_grads():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped = clip_grads(grads, 1.0)
    assert np.allclose([clipped["a"][0], clipped["b"][0]], [0.6, 0.8])
    assert clip_grads(grads, 10.0) is grads


def test_config_validation():
    for bad in ({"learning_rate": 0}, {"beta1": 1.0}, {"lam": -1}, {"batch_size": 0},
                {"total_samples": -1}, {"dead_window": 0}, {"grad_clip": 0.0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# --------------------------------------------------------------------------
# dead concepts
# --------------------------------------------------------------------------


def test_all_dead_after_window():
    state = TrainState()
    for _ in range(10):
        dead = track_dead(np.zeros((4, 5)), state, dead_window=40)
    assert dead == 5


def test_active_concept_never_dead():
    state = TrainState()
    codes = np.zeros((4, 5))
    codes[0, 0] = 1.0
    for _ in range(20):
        dead = track_dead(codes, state, dead_window=8)
    assert dead == 4
    assert state.last_active[0] == state.samples_seen


def test_track_dead_threshold_must_be_nonnegative():
    with pytest.raises(ValueError):
        track_dead(np.zeros((1, 2)), TrainState(), threshold=-1.0)


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------


def test_zero_budget_leaves_model_unchanged():
    model = small_model("attn", "sparsemax")
    before = {k: v.copy() for k, v in model.params.items()}
    result = train(model, gen_superposition(SMALL), TrainConfig(total_samples=0))
    assert result.history == []
    assert all(np.array_equal(before[k], model.params[k]) for k in before)


def _run(arch, activation, lam=1e-3, steps=100, seed=0):
    model = small_model(arch, activation, seed=seed)
    cfg = TrainConfig(batch_size=8, total_samples=8 * steps, lam=lam, log_every=10)
    return train(model, gen_superposition(SMALL), cfg)


@pytest.mark.parametrize("arch, activation", VARIANTS)
def test_training_is_deterministic(arch, activation):
    a, b = _run(arch, activation), _run(arch, activation)
    for name in a.model.params:
        assert np.array_equal(a.model.params[name], b.model.params[name])
    assert [r.tsv() for r in a.history] == [r.tsv() for r in b.history]


@pytest.mark.parametrize("arch, activation", [("attn", "sparsemax"), ("mlp", "topk"), ("mlp", "batch_topk")])
def test_lambda_has_no_effect_without_penalty(arch, activation):
    a, b = _run(arch, activation, lam=0.0), _run(arch, activation, lam=0.7)
    for name in a.model.params:
        assert np.array_equal(a.model.params[name], b.model.params[name])
    assert [r.tsv() for r in a.history] == [r.tsv() for r in b.history]


@pytest.mark.parametrize("arch, activation", VARIANTS)
def test_loss_trend_and_finite(arch, activation):
    model = small_model(arch, activation)
    cfg = TrainConfig(learning_rate=1e-3, batch_size=8, total_samples=8 * 2000, log_every=1)
    history = train(model, gen_superposition(SMALL), cfg).history
    losses = np.array([row.loss for row in history])
    assert len(losses) == 2000
    assert np.all(np.isfinite(losses))
    assert losses[-1000:].mean() < losses[:1000].mean()


def test_history_rows_and_last_partial_batch():
    model = small_model("attn", "sparsemax")
    cfg = TrainConfig(batch_size=8, total_samples=8 * 25 + 3, log_every=10)
    result = train(model, gen_superposition(SMALL), cfg)
    assert [r.step for r in result.history] == [10, 20, 26]
    assert result.state.samples_seen == 8 * 25 + 3
    assert all(r.wallclock_ms == 0 for r in result.history)


def test_history_file_round_trip(tmp_path):
    rows = [HistoryRow(1, 0.5, 3.25, 0, 0), HistoryRow(2, 0.25, 2.0, 1, 0)]
    write_history(tmp_path / "h.tsv", rows)
    assert read_history(tmp_path / "h.tsv") == rows
    assert (tmp_path / "h.tsv").read_text().splitlines()[0] == "step\tloss\tmean_L0\tdead_count\twallclock_ms"


def test_history_path_written(tmp_path):
    model = small_model("mlp", "relu")
    cfg = TrainConfig(batch_size=4, total_samples=40, log_every=5, history_path=str(tmp_path / "h.tsv"))
    train(model, gen_superposition(SMALL), cfg)
    assert len(read_history(tmp_path / "h.tsv")) == 2


def test_data_exhaustion():
    model = small_model("mlp", "relu")
    source = ArraySource(np.zeros((10, SMALL.d)))
    with pytest.raises(DataExhausted, match="after 8 of 20"):
        train(model, source, TrainConfig(batch_size=4, total_samples=20))


def test_nan_input_is_a_numeric_error():
    model = AttnSae(SMALL.d, 32, "softmax")
    data = np.full((4, SMALL.d), np.nan)
    with pytest.raises(NumericError):
        train(model, ArraySource(data), TrainConfig(batch_size=4, total_samples=4))


def test_state_resumes():
    a = small_model("mlp", "relu")
    b = small_model("mlp", "relu")
    cfg = TrainConfig(batch_size=4, total_samples=40)
    half = TrainConfig(batch_size=4, total_samples=20)
    train(a, gen_superposition(SMALL), cfg)
    stream = gen_superposition(SMALL)
    state = train(b, stream, half).state
    train(b, stream, half, state=state)
    for name in a.params:
        assert np.array_equal(a.params[name], b.params[name])
