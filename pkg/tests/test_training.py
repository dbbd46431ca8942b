import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tefn import data
from tefn.model import ShapeMismatch, TefnConfig, TefnParams, init_params, param_shapes, predict
from tefn.training import (
    AdamState,
    NonFiniteLoss,
    TrainConfig,
    adam_step,
    backward,
    finite_diff_check,
    mae,
    mse,
    train,
    write_history_csv,
)


def random_params(cfg, seed=0):
    g = np.random.default_rng(seed)
    return TefnParams(**{k: g.standard_normal(s) for k, s in param_shapes(cfg).items()})


def random_batch(cfg, B=3, seed=1):
    g = np.random.default_rng(seed)
    return g.standard_normal((B, cfg.L_in, cfg.C)), g.standard_normal((B, cfg.L_pred, cfg.C))


def test_metrics():
    y = np.random.default_rng(0).normal(size=(4, 3))
    assert mse(y, y) == 0.0 and mae(y, y) == 0.0
    assert mse([0, 0], [1, -1]) == 1.0 and mae([0, 0], [1, -1]) == 1.0
    y_hat = np.random.default_rng(1).normal(size=(4, 3))
    sq = ab = 0.0
    for a, b in zip(y.ravel(), y_hat.ravel()):
        sq += (a - b) ** 2
        ab += abs(a - b)
    assert mse(y, y_hat) == pytest.approx(sq / 12, rel=1e-14)
    assert mae(y, y_hat) == pytest.approx(ab / 12, rel=1e-14)
    with pytest.raises(ShapeMismatch):
        mse(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        mae(np.zeros(0), np.zeros(0))


def test_zero_batch_zero_params():
    cfg = TefnConfig(L_in=6, L_pred=3, C=2, S=1, use_norm=False)
    params = random_params(cfg).zeros_like()
    loss, grads = backward((np.zeros((2, 6, 2)), np.zeros((2, 3, 2))), params, cfg)
    assert loss == 0.0
    assert all(not g.any() for g in grads.tensors().values())


def test_hand_expanded_gradient():
    cfg = TefnConfig(L_in=2, L_pred=1, C=1, S=0, bpa_mode="prob", use_norm=False)
    p = random_params(cfg, 3)
    x, target = np.array([0.7, -1.3]), 0.4
    # output row 2: a * z2 + bias with a = w_T[2] + w_C[0]
    a = p.w_T[2, 0] + p.w_C[0, 0]
    z2 = p.W_p[0, 2] * x[0] + p.W_p[1, 2] * x[1] + p.b_p[2]
    r = a * z2 + p.b_T[2, 0] + p.b_C[0, 0] - target
    loss, g = backward((x.reshape(1, 2, 1), np.array([[[target]]])), p, cfg)
    assert loss == pytest.approx(r * r, rel=1e-14)
    W_expected = np.zeros((2, 3))
    W_expected[:, 2] = 2 * r * a * x
    np.testing.assert_allclose(g.W_p, W_expected, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(g.b_p, [0, 0, 2 * r * a], rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(g.w_T[:, 0], [0, 0, 2 * r * z2], rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(g.b_T[:, 0], [0, 0, 2 * r], rtol=1e-13, atol=1e-15)
    assert g.w_C[0, 0] == pytest.approx(2 * r * z2, rel=1e-13)
    assert g.b_C[0, 0] == pytest.approx(2 * r, rel=1e-13)


def test_linear_variant_is_exact():
    cfg = TefnConfig(L_in=8, L_pred=4, C=3, S=1, use_norm=False)
    rep = finite_diff_check(random_params(cfg, 4), random_batch(cfg), cfg)
    assert rep.worst < 1e-7


@given(st.sampled_from(["none", "relu", "tanh"]), st.sampled_from(["sum", "concat"]),
       st.booleans(), st.integers(0, 2), st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_random_configurations_pass_gradcheck(act, fusion, norm, S, seed):
    cfg = TefnConfig(L_in=6, L_pred=3, C=2, S=S, activation=act, fusion_mode=fusion, use_norm=norm)
    rep = finite_diff_check(random_params(cfg, seed), random_batch(cfg, seed=seed + 1), cfg)
    assert rep.passed, rep.max_rel_error


def test_tanh_variant():
    cfg = TefnConfig(L_in=8, L_pred=4, C=3, S=2, activation="tanh")
    rep = finite_diff_check(random_params(cfg, 5), random_batch(cfg), cfg)
    assert rep.worst < 1e-4


@pytest.mark.parametrize("name", ["W_p", "b_T", "w_C", "W_f"])
def test_corrupted_gradient_is_named(name):
    cfg = TefnConfig(L_in=8, L_pred=4, C=3, S=1, fusion_mode="concat", activation="relu")
    params, batch = random_params(cfg, 6), random_batch(cfg)
    _, grads = backward(batch, params, cfg)
    getattr(grads, name)[...] *= 1.1
    rep = finite_diff_check(params, batch, cfg, grads=grads)
    assert not rep.passed
    assert rep.failing() == [name] and rep.worst_tensor == name


def test_gradcheck_subsamples_large_models():
    cfg = TefnConfig(L_in=48, L_pred=48, C=2, S=0)
    rep = finite_diff_check(random_params(cfg, 7), random_batch(cfg, B=2), cfg, max_coords=400)
    assert rep.coords_checked <= 410 and rep.passed
    with pytest.raises(ValueError):
        finite_diff_check(random_params(cfg, 7), random_batch(cfg), cfg, step=0)


def test_adam_zero_gradient_keeps_params():
    cfg = TefnConfig(L_in=4, L_pred=2, C=2)
    p = init_params(cfg, 0)
    new, state = adam_step(p, p.zeros_like(), AdamState.zeros(p), 0.1)
    assert new.equals(p) and state.t == 1


def test_adam_first_step_is_sign():
    cfg = TefnConfig(L_in=4, L_pred=2, C=2)
    p = init_params(cfg, 0)
    g = random_params(cfg, 8)
    for t in g.tensors().values():
        t *= 1e3
    new, _ = adam_step(p, g, AdamState.zeros(p), 0.01)
    for k, v in new.tensors().items():
        np.testing.assert_allclose(v - p.tensors()[k], -0.01 * np.sign(g.tensors()[k]), atol=1e-6)


def test_adam_quadratic():
    # minimize (theta - 1)^2 from 0; lr halves every 20 steps to damp the sign-like steps
    p = TefnParams(*(np.zeros(1) for _ in range(6)))
    state = AdamState.zeros(p)
    for t in range(100):
        g = TefnParams.from_tensors({k: 2 * (v - 1.0) for k, v in p.tensors().items()})
        p, state = adam_step(p, g, state, 0.2 * 0.5 ** (t // 20))
    assert abs(p.W_p[0] - 1.0) < 1e-3


def sinusoid_task(L_in=24, L_pred=8, noise=0.0):
    return data.synthetic_task_data(2, 1200, 0, L_in, L_pred, noise=noise, trend=0.0)


def test_trains_on_noiseless_sinusoid():
    d = sinusoid_task()
    cfg = TefnConfig(L_in=24, L_pred=8, C=2)
    best, history = train(d.train, d.val, cfg, TrainConfig())
    assert len(history) <= 10
    assert min(r.val_mse for r in history) < 0.05
    assert mse(d.val.targets, predict(d.val.inputs, best, cfg)) == min(r.val_mse for r in history)
    assert [r.lr for r in history[:3]] == [0.01, 0.005, 0.0025]


def test_patience_stops_on_flat_validation():
    seg = np.zeros((40, 2))
    w = data.make_windows(seg, 6, 2)
    cfg = TefnConfig(L_in=6, L_pred=2, C=2, use_norm=False)
    zero = init_params(cfg, 0).zeros_like()
    _, history = train(w, w, cfg, TrainConfig(patience=1), params=zero)
    assert len(history) == 2 and history[1].val_mse == 0.0


def test_training_is_deterministic(tmp_path):
    d = sinusoid_task(noise=0.2)
    cfg = TefnConfig(L_in=24, L_pred=8, C=2, S=2)
    tc = TrainConfig(max_epochs=3, seed=11)
    a, ha = train(d.train, d.val, cfg, tc)
    b, hb = train(d.train, d.val, cfg, tc)
    assert a.equals(b)
    assert ha == hb  # seconds excluded from comparison
    c, _ = train(d.train, d.val, cfg, tc.replace(seed=12))
    assert not a.equals(c)
    write_history_csv(ha, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_mse,val_mse,lr,seconds" and len(lines) == 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_reports_position():
    seg = np.full((60, 1), 1e200)
    w = data.make_windows(seg, 6, 2)
    cfg = TefnConfig(L_in=6, L_pred=2, C=1, use_norm=False)
    with pytest.raises(NonFiniteLoss) as err:
        train(w, w, cfg, TrainConfig())
    assert err.value.epoch == 1 and err.value.batch == 0


def test_linear_probe_reaches_least_squares():
    g = np.random.default_rng(9)
    T = 3000
    x = np.zeros(T)
    for t in range(2, T):
        x[t] = 0.6 * x[t - 1] - 0.3 * x[t - 2] + g.normal()
    w = data.make_windows(x[:, None], 8, 2)
    cfg = TefnConfig(L_in=8, L_pred=2, C=1, use_norm=False, linear_probe=True)
    best, _ = train(w, w, cfg, TrainConfig(lr=0.01, max_epochs=10, lr_schedule="constant"))
    X = np.hstack([w.inputs[:, :, 0], np.ones((len(w), 1))])
    coef, *_ = np.linalg.lstsq(X, w.targets[:, :, 0], rcond=None)
    optimum = np.mean((X @ coef - w.targets[:, :, 0]) ** 2)
    got = mse(w.targets, predict(w.inputs, best, cfg))
    assert got <= 1.05 * optimum


def test_train_config_validation():
    for bad in ({"lr": 0}, {"batch_size": 0}, {"patience": 0}, {"lr_schedule": "cosine"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    assert TrainConfig(lr_schedule="constant").lr_at(5) == 0.01
