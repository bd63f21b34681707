import numpy as np
import pytest

from aknet import numerics as nx
from aknet.hypercm import CMWeights
from aknet.kf import kf_run, steady_state_gain
from aknet.kgain import FilterNetState, GainNetParams, aknet_step, features, kgain_forward, run_filter
from aknet.numerics import ContractError, Tape
from aknet.params import param_count
from aknet.ssm import generate_batch

from conftest import finite_diff, rel_err


def test_features_hand_values():
    f = features(np.array([[3.0, 4.0]]), np.zeros((1, 2)), np.zeros((1, 2)), None)
    np.testing.assert_allclose(f, [[0.6, 0.8, 0.0, 0.0]])
    y = np.array([[1.0, -2.0]])
    f = features(y, y, np.array([[1.0, 1.0]]), np.array([[0.0, 1.0]]))
    np.testing.assert_array_equal(f, [[0.0, 0.0, 1.0, 0.0]])


def test_param_count_default_sizes():
    th = GainNetParams.init(2, 2)
    total, parts = param_count(th)
    # h = d = 40: fc_in 4*40+40, GRU 3*(40*40 + 40*40 + 40), fc_out 40*4+4
    assert total == 200 + 3 * 3240 + 164 == 10084
    assert parts["fc_out.W"] == 160 and sum(parts.values()) == total
    assert th.sites == [("fc_in", 40), ("gru_z", 40), ("gru_r", 40), ("gru_n", 40), ("fc_out", 4)]


def test_identity_cm_is_bit_identical(rng):
    th = GainNetParams.init(2, 2, hidden=6, rng=rng)
    feat, hidden = rng.standard_normal((3, 4)), rng.standard_normal((3, 6))
    K0, h0 = kgain_forward(feat, th, hidden)
    K1, h1 = kgain_forward(feat, th, hidden, CMWeights.identity(th.sites))
    assert K0.tobytes() == K1.tobytes() and h0.tobytes() == h1.tobytes()


def test_zero_network_predicts_only(model2):
    th = GainNetParams.init(2, 2, hidden=5)
    for k in th.names():
        th.blocks[k][:] = 0.0
    K, _ = kgain_forward(np.ones((1, 4)), th, np.zeros((1, 5)))
    np.testing.assert_array_equal(K, 0.0)
    x0 = np.array([1.0, 2.0])
    out = run_filter(model2, np.random.default_rng(0).standard_normal((1, 6, 2)), th, x0)
    xs, _ = out.stacked()
    expect = np.stack([np.linalg.matrix_power(model2.F, t + 1) @ x0 for t in range(6)])
    np.testing.assert_allclose(xs[0], expect, atol=1e-14)


def test_feature_dimension_mismatch():
    th = GainNetParams.init(2, 2, hidden=4)
    with pytest.raises(ContractError):
        kgain_forward(np.ones((1, 3)), th, np.zeros((1, 4)))


def _fd_check_all_blocks(th, model, ys, x0, cm=None):
    tape = Tape()
    leaves = th.attach(tape)
    out = run_filter(model, ys, leaves, x0, cm, h=th.h)
    L = nx.sum_all(nx.square(nx.concat(out.x, axis=-1)))
    grads = dict(zip(leaves, nx.grad(L, list(leaves.values()))))

    def f():
        xs, _ = run_filter(model, ys, th, x0, cm).stacked()
        return float(np.sum(xs**2))

    for name in th.names():
        fd = finite_diff(f, th.blocks[name], 1e-5)
        assert rel_err(grads[name], fd) < 1e-4, name
        assert np.any(grads[name] != 0), name


def test_gradients_match_finite_differences(model2, rng):
    th = GainNetParams.init(2, 2, hidden=4, rng=rng, out_scale=1.0)
    ys = rng.standard_normal((2, 4, 2))
    _fd_check_all_blocks(th, model2, ys, np.array([0.3, -0.2]))


def test_gradients_through_cm(model2, rng):
    th = GainNetParams.init(2, 2, hidden=4, rng=rng, out_scale=1.0)
    cm = CMWeights({k: 1 + 0.3 * rng.standard_normal(w) for k, w in th.sites},
                   {k: 0.2 * rng.standard_normal(w) for k, w in th.sites})
    _fd_check_all_blocks(th, model2, rng.standard_normal((2, 3, 2)), np.zeros(2), cm)


def test_aknet_step_update_equation(model2, rng):
    th = GainNetParams.init(2, 2, hidden=5, rng=rng, out_scale=1.0)
    state = FilterNetState.initial(np.array([0.5, -1.0]), 1, 5)
    y = np.array([[1.0, 2.0]])
    x_post, y_pred, new = aknet_step(model2, y, th, state)
    x_prior = model2.F @ np.array([0.5, -1.0])
    feat = features(y, model2.H @ x_prior, state.x_post, None)
    K, _ = kgain_forward(feat, th, np.zeros((1, 5)))
    np.testing.assert_allclose(x_post[0], x_prior + K[0] @ (y[0] - x_prior), rtol=1e-13)
    np.testing.assert_array_equal(new.x_prior[0], x_prior)


def test_steady_state_gain_plugged_in_matches_kf(model2):
    # freeze K to the KF steady-state gain: fc_out bias carries K, everything else zero
    K_ss, _ = steady_state_gain(model2, model2.Q0, model2.R0)
    th = GainNetParams.init(2, 2, hidden=4)
    for k in th.names():
        th.blocks[k][:] = 0.0
    th.blocks["fc_out.b"][:] = K_ss.ravel()
    ds = generate_batch(model2, np.ones((300, 100)), np.ones((300, 100)), np.random.default_rng(8))
    xs, _ = run_filter(model2, ds.y, th, np.zeros(2)).stacked()
    P_ss = (np.eye(2) - K_ss @ model2.H) @ steady_state_gain(model2, model2.Q0, model2.R0)[1]
    net = np.mean(np.sum((xs[:, 20:] - ds.x[:, 20:]) ** 2, -1))
    kf = kf_run(model2, model2.Q0, model2.R0, ds.y)
    kf_mse = np.mean(np.sum((kf.x[:, 20:] - ds.x[:, 20:]) ** 2, -1))
    assert abs(net / np.trace(P_ss) - 1) < 0.05
    assert abs(net / kf_mse - 1) < 0.05


def test_filter_is_deterministic(model2, rng):
    th = GainNetParams.init(2, 2, hidden=6, rng=rng)
    ys = rng.standard_normal((3, 10, 2))
    a, _ = run_filter(model2, ys, th).stacked()
    b, _ = run_filter(model2, ys, th).stacked()
    assert a.tobytes() == b.tobytes()
