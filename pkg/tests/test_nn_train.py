import numpy as np
import pytest
from helpers import gradient_errors, numeric_grad, rel_err, term_batches
from hypothesis import given
from hypothesis import strategies as st

from mmflow import nn
from mmflow import train as T
from mmflow.errors import (CheckpointMismatch, ConfigError, EmptyBatch, FormatError,
                           ShapeMismatch)


def _oracle_forward(params, x):
    h = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = np.array([[sum(h[r, k] * w[k, c] for k in range(w.shape[0])) + b[c]
                       for c in range(w.shape[1])] for r in range(h.shape[0])])
        if i < len(params.weights) - 1:
            z = np.maximum(z, 0) if params.activation == "relu" else z / (1 + np.exp(-z))
        h = z
    return h


def test_zero_params_zero_output():
    m = nn.init_mlp([4, 5, 3], np.random.default_rng(0))
    for w in m.weights:
        w[:] = 0
    assert np.array_equal(nn.mlp_forward(m, np.ones((2, 4))), np.zeros((2, 3)))


def test_identity_layer():
    m = nn.Mlp([np.eye(3)], [np.zeros(3)])
    x = np.random.default_rng(1).standard_normal((4, 3))
    assert np.array_equal(nn.mlp_forward(m, x), x)


@pytest.mark.parametrize("act", ["relu", "silu"])
def test_forward_matches_oracle(act):
    rng = np.random.default_rng(2)
    m = nn.init_mlp([3, 6, 5, 2], rng, act)
    for b in m.biases:
        b[:] = rng.standard_normal(b.shape)
    x = rng.standard_normal((4, 3))
    assert np.max(np.abs(nn.mlp_forward(m, x) - _oracle_forward(m, x))) < 1e-12


def test_forward_shape_check():
    m = nn.init_mlp([3, 4, 2], np.random.default_rng(0))
    with pytest.raises(ShapeMismatch):
        nn.mlp_forward(m, np.ones((2, 5)))


def test_backward_fd():
    rng = np.random.default_rng(3)
    m = nn.init_mlp([4, 7, 7, 3], rng, "silu")
    x = rng.standard_normal((5, 4))
    up = rng.standard_normal((5, 3))

    def f():
        return float(np.sum(nn.mlp_forward(m, x) * up))

    _, cache = nn.mlp_forward(m, x, return_cache=True)
    grads, dx = nn.mlp_backward(m, cache, up)
    num = numeric_grad(f, m.arrays())
    for a, b in zip(grads, num):
        assert rel_err(a, b) < 1e-5
    assert rel_err(dx, numeric_grad(f, [x])[0]) < 1e-5


def test_backward_zero_and_linear():
    rng = np.random.default_rng(4)
    m = nn.init_mlp([3, 5, 2], rng)
    x = rng.standard_normal((4, 3))
    _, cache = nn.mlp_forward(m, x, return_cache=True)
    zero, _ = nn.mlp_backward(m, cache, np.zeros((4, 2)))
    assert all(np.all(g == 0) for g in zero)
    up = rng.standard_normal((4, 2))
    g1, _ = nn.mlp_backward(m, cache, up)
    g3, _ = nn.mlp_backward(m, cache, 3.0 * up)
    assert all(np.allclose(3 * a, b, rtol=1e-12, atol=1e-14) for a, b in zip(g1, g3))


def test_time_embedding():
    e = nn.time_embedding(np.array([0.0, 0.5]), 32)
    assert e.shape == (2, 32)
    assert np.array_equal(e[0, :16], np.zeros(16))
    assert np.array_equal(e[0, 16:], np.ones(16))


def test_adam_zero_grad():
    p = [np.array([1.0, -2.0])]
    st_ = nn.AdamState.zeros_like(p)
    nn.adam_step(p, [np.zeros(2)], st_, 0.1)
    assert np.array_equal(p[0], [1.0, -2.0])


def test_adam_constant_gradient_sign_step():
    p = [np.zeros(3)]
    g = np.array([0.3, -2.0, 0.01])
    st_ = nn.AdamState.zeros_like(p)
    lr = 1e-2
    for _ in range(50):
        before = p[0].copy()
        nn.adam_step(p, [g], st_, lr, clip=0)
    step = p[0] - before
    # with constant g the bias-corrected moments are g and g^2 exactly
    assert np.allclose(step, -lr * g / (np.abs(g) + 1e-8), rtol=1e-9)


def test_clip():
    g = [np.array([6.0, 8.0])]
    clipped, norm = nn.clip_grad_norm(g, 1.0)
    assert norm == 10.0
    assert np.allclose(clipped[0], [0.6, 0.8])


def test_plateau_rule():
    s = nn.PlateauScheduler(1.0)
    s.step(1.0)
    for _ in range(9):
        assert s.step(2.0) == 1.0
    assert s.step(2.0) == pytest.approx(0.8)
    s = nn.PlateauScheduler(1e-5)
    for _ in range(60):
        s.step(5.0)
    assert s.lr == 5e-6


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    t = {"a/W0": rng.standard_normal((3, 4)), "b": np.array([1.5]), "s": np.array(2.0)}
    p = tmp_path / "m.ckpt"
    nn.save_checkpoint(p, t)
    back = nn.load_checkpoint(p)
    assert list(back) == list(t)
    for k in t:
        assert np.array_equal(back[k], t[k])
    raw = p.read_bytes()
    assert raw[:4] == b"MFLW" and raw[4:8] == (1).to_bytes(4, "little")


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOPE\x01\x00\x00\x00")
    with pytest.raises(CheckpointMismatch):
        nn.load_checkpoint(p)
    good = nn.encode_checkpoint({"x": np.ones(10)})
    p.write_bytes(good[:-5])
    with pytest.raises(FormatError):
        nn.load_checkpoint(p)
    with pytest.raises(FormatError):
        nn.load_checkpoint(tmp_path / "missing.ckpt")


# -- losses ------------------------------------------------------------------

def test_default_weights():
    w = T.LossWeights()
    assert (w.pos, w.ori, w.cat, w.con, w.str) == (0.2, 0.2, 1.0, 1.0, 1.0)
    with pytest.raises(ConfigError):
        T.LossWeights(pos=-1.0)


def test_loss_decomposition_and_linearity():
    rng = np.random.default_rng(6)
    batches, models = term_batches(rng)
    w = T.LossWeights()
    res = T.total_loss(batches, w, models)
    dot = sum(getattr(w, g) * res.breakdown[g] for g in T.GROUPS)
    assert abs(res.total - dot) <= 1e-12
    w2 = T.LossWeights(pos=0.4)
    res2 = T.total_loss(batches, w2, models)
    assert res2.breakdown == res.breakdown
    assert np.isclose(res2.total - res.total, 0.2 * res.breakdown["pos"], rtol=1e-12)


def test_perfect_prediction_zero_loss():
    m = T.init_field_model(2, 2, np.random.default_rng(0), hidden=4, layers=1)
    for w in m.mlp.weights:
        w[:] = 0
    m.mlp.biases[-1][:] = [1.0, -1.0]
    tb = T.TermBatch(np.zeros((3, 2)), np.zeros(3), np.tile([1.0, -1.0], (3, 1)))
    assert T.total_loss({"pos": tb}, T.LossWeights(), {"pos": m}).total == 0.0


def test_empty_batch():
    with pytest.raises(EmptyBatch):
        T.total_loss({}, T.LossWeights(), {})


def test_gradients_single_draw():
    assert max(gradient_errors(11).values()) < 1e-5


def test_gradients_unsquared_con():
    assert gradient_errors(12, squared_con=False)["con"] < 1e-5


def test_extra_term_hook():
    rng = np.random.default_rng(7)
    batches, models = term_batches(rng)
    one = {"pos": batches["pos"]}
    base = T.total_loss(one, T.LossWeights(), models)
    zeros = [np.ones_like(p) for p in models["pos"].params()]
    res = T.total_loss(one, T.LossWeights(), models,
                       extra={"bb": (0.5, lambda b, m: (2.0, {"pos": zeros}))})
    assert res.total == pytest.approx(base.total + 1.0)
    assert res.breakdown["bb"] == 2.0
    assert np.allclose(res.grads["pos"][0], base.grads["pos"][0] + 0.5)


# -- conditioning --------------------------------------------------------------

def test_condition_labels():
    assert T.ConditionLabel().index == T.NULL == 0
    idx = {T.ConditionLabel.parse(s).index for s in ("cyclic", "disulfide", "length:5")}
    assert len(idx) == 3 and 0 not in idx
    with pytest.raises(ConfigError):
        T.ConditionLabel.parse("length:0")
    with pytest.raises(ConfigError):
        T.ConditionLabel.parse("helix")


@pytest.mark.parametrize("p", [0.0, 1.0])
def test_cfg_drop_extremes(p):
    c = np.full(1000, T.CYCLIC)
    out, null = T.cfg_drop(c, p, np.random.default_rng(0))
    assert np.all(null == (p == 1.0))
    assert np.all(out == (T.NULL if p == 1.0 else T.CYCLIC))


@given(st.floats(0.05, 0.95))
def test_cfg_drop_rate(p):
    n = 10_000
    _, null = T.cfg_drop(np.full(n, T.DISULFIDE), p, np.random.default_rng(1))
    assert abs(null.mean() - p) <= 3 * np.sqrt(p * (1 - p) / n)


def test_cfg_sample_field():
    assert T.cfg_sample_field(2.0, 1.0, 0.0) == 2.0
    assert T.cfg_sample_field(1.5, 1.5, 7.0) == 1.5
    assert T.cfg_sample_field(2.0, 1.0, 1.0) == 3.0


def test_cfg_train_step_never_sees_condition():
    rng = np.random.default_rng(8)
    batches, models = term_batches(rng)
    _, masks = T.cfg_train_step(batches, models, T.LossWeights(), 1.0, rng)
    assert all(np.all(m) for m in masks.values())


def test_null_offset_never_trained():
    rng = np.random.default_rng(9)
    m = T.init_field_model(2, 2, rng, hidden=8, layers=2, conditional=True)
    models = {"pos": m}
    cfg = T.TrainConfig(iterations=30, log_every=10, p_uncond=1.0)
    T.train(models, lambda r: {"pos": T.euclidean_batch(
        r.standard_normal((16, 2)), r, np.full(16, T.CYCLIC))}, cfg, rng)
    assert np.all(m.cond_delta == 0)
    x = rng.standard_normal((5, 2))
    assert np.max(np.abs(m(x, 0.3, T.CYCLIC) - m(x, 0.3, T.NULL))) == 0.0


def test_training_deterministic_and_log_rows():
    def run():
        rng = np.random.default_rng(10)
        m = T.init_field_model(2, 2, rng, hidden=8, layers=2)
        cfg = T.TrainConfig(iterations=50, log_every=10)
        return T.train({"pos": m}, lambda r: {"pos": T.euclidean_batch(
            r.standard_normal((8, 2)) + 3, r)}, cfg, rng)

    a, b = run(), run()
    assert len(a) == 5
    assert [r[2] for r in a] == [r[2] for r in b]


def test_trained_loss_decreases():
    rng = np.random.default_rng(11)
    m = T.init_field_model(2, 2, rng, hidden=32, layers=2)
    cfg = T.TrainConfig(iterations=400, lr=3e-3, log_every=100)
    rows = T.train({"pos": m}, lambda r: {"pos": T.euclidean_batch(
        0.1 * r.standard_normal((64, 2)) + [2.0, -1.0], r)}, cfg, rng)
    assert rows[-1][2] < 0.7 * rows[0][2]


def test_optimizer_clip_is_global():
    rng = np.random.default_rng(12)
    models = {"a": T.init_field_model(2, 2, rng, hidden=4, layers=1),
              "b": T.init_field_model(2, 2, rng, hidden=4, layers=1)}
    opt = T.Optimizer(models, 1e-3, clip=1.0)
    grads = {t: [np.full_like(p, 10.0) for p in models[t].params()] for t in models}
    norm = opt.step(grads)
    n_params = sum(p.size for t in models for p in models[t].params())
    assert np.isclose(norm, 10.0 * np.sqrt(n_params))
