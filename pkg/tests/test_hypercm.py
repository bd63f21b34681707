import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aknet import numerics as nx
from aknet.hypercm import (
    CMWeights,
    HyperParams,
    cm_apply,
    cm_schedule,
    cm_weights,
    encode_sow,
    hyper_forward,
)
from aknet.kgain import GainNetParams, run_filter
from aknet.numerics import ContractError, Tape

from conftest import finite_diff, rel_err

FORMULAS = {
    "identity": lambda u: u,
    "tanh": np.tanh,
    "relu": lambda u: np.maximum(u, 0.0),
    "sigmoid": lambda u: 1.0 / (1.0 + np.exp(-u)),
}

vec = arrays(np.float64, 6, elements=st.floats(-20, 20))


@settings(max_examples=60, deadline=None)
@given(vec, vec, vec, st.sampled_from(sorted(FORMULAS)))
def test_cm_apply_matches_formula(z, g, s, act):
    np.testing.assert_allclose(cm_apply(z, g, s, act), FORMULAS[act](z * g + s),
                               rtol=1e-12, atol=1e-12)


def test_cm_apply_hand_cases():
    np.testing.assert_array_equal(cm_apply([1.0, -1.0], [2.0, 3.0], [1.0, 1.0]), [3.0, -2.0])
    z = np.array([5.0, -7.0, 0.3])
    np.testing.assert_array_equal(cm_apply(z, np.zeros(3), np.zeros(3), "tanh"), 0.0)
    for act, f in FORMULAS.items():
        assert cm_apply(z, np.ones(3), np.zeros(3), act).tobytes() == nx.activate(act, z).tobytes()


def test_cm_apply_length_mismatch():
    with pytest.raises(ContractError):
        cm_apply(np.ones(3), np.ones(2), np.zeros(3))


@pytest.mark.parametrize("act", ["sigmoid", "tanh", "relu", "identity"])
def test_cm_apply_gradients(act, rng):
    z, g, s = rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), rng.standard_normal(4)
    w = rng.standard_normal((3, 4))
    tape = Tape()
    leaves = [tape.leaf(v) for v in (z, g, s)]
    L = nx.sum_all(nx.mul(cm_apply(*leaves, act), w))
    grads = nx.grad(L, leaves)
    f = lambda: float(np.sum(cm_apply(z, g, s, act) * w))
    for arr, gr in zip((z, g, s), grads):
        assert rel_err(gr, finite_diff(f, arr, 1e-5)) < 1e-4


def test_encode_monotone_and_positive():
    e = encode_sow([0.01, 1.0, 100.0])
    assert np.all(np.diff(e) > 0)
    for bad in (0.0, -1.0, np.nan):
        with pytest.raises(ContractError):
            encode_sow(bad)


def test_untrained_hypernetwork_is_identity(rng):
    th = GainNetParams.init(2, 2)
    psi = HyperParams.init(th.sites, rng=rng)
    cm = cm_weights(np.array([0.01, 1.0, 37.0]), psi, th.sites)
    for name, w in th.sites:
        g, s = cm.site(name)
        assert g.shape == (3, w)
        np.testing.assert_array_equal(g, 1.0)
        np.testing.assert_array_equal(s, 0.0)


def test_untrained_aknet_equals_stage1_network(model2, rng):
    th = GainNetParams.init(2, 2, hidden=8, rng=rng)
    psi = HyperParams.init(th.sites, rng=rng)
    ys = rng.standard_normal((4, 12, 2))
    plain, _ = run_filter(model2, ys, th).stacked()
    cm = cm_schedule(np.full((4, 12), 3.0), psi, th.sites)
    mod, _ = run_filter(model2, ys, th, cm=cm).stacked()
    assert plain.tobytes() == mod.tobytes()


def test_switch_gives_distinct_vectors_and_bounded_gain(rng):
    th = GainNetParams.init(2, 2, hidden=4)
    psi = HyperParams.init(th.sites, rng=rng)
    psi.blocks["hyper.head.W"] = rng.standard_normal(psi["hyper.head.W"].shape) * 3
    g = hyper_forward(0.5, 1, psi)
    s = hyper_forward(0.5, 0, psi)
    assert g.shape == s.shape == (1, psi.out_dim)
    assert np.any(g - 1.0 != s)
    assert np.all((g > 0) & (g < 2))
    with pytest.raises(ContractError):
        hyper_forward(0.5, 2, psi)


def test_slices_tile_output_exactly(rng):
    th = GainNetParams.init(3, 2, hidden=7)
    psi = HyperParams.init(th.sites, rng=rng)
    psi.blocks["hyper.head.b"] = np.arange(psi.out_dim, dtype=float)
    cm = cm_weights(1.0, psi, th.sites)
    raw = np.concatenate([cm.shifts[k][0] for k, _ in th.sites])
    np.testing.assert_array_equal(raw, np.arange(psi.out_dim))
    assert psi.out_dim == sum(w for _, w in th.sites)
    assert psi.sites == th.sites


def test_param_counts_table_targets():
    th2 = GainNetParams.init(2, 2)
    psi2 = HyperParams.init(th2.sites)
    assert 5_000 <= th2.count() <= 20_000
    assert 500 <= psi2.count() <= 2_000
    assert psi2.count() < 0.15 * th2.count()
    th10 = GainNetParams.init(10, 10)
    psi10 = HyperParams.init(th10.sites)
    assert 330_000 / 2 <= th10.count() <= 330_000 * 2
    assert 3_000 <= psi10.count() <= 12_000
    assert psi10.count() < 0.15 * th10.count()


def test_param_count_independent_of_switch(rng):
    th = GainNetParams.init(2, 2, hidden=4)
    psi = HyperParams.init(th.sites, rng=rng)
    n = psi.count()
    hyper_forward(1.0, 0, psi)
    hyper_forward(1.0, 1, psi)
    assert psi.count() == n


def test_cm_schedule_constant_vs_varying(rng):
    th = GainNetParams.init(2, 2, hidden=4)
    psi = HyperParams.init(th.sites, rng=rng)
    assert isinstance(cm_schedule(np.ones((2, 5)), psi, th.sites), CMWeights)
    sow = np.ones((2, 5))
    sow[:, 3:] = 0.1
    sched = cm_schedule(sow, psi, th.sites)
    assert isinstance(sched, list) and len(sched) == 5


def test_hypernetwork_gradient(rng):
    th = GainNetParams.init(2, 2, hidden=3)
    psi = HyperParams.init(th.sites, width=3, rng=rng)
    psi.blocks["hyper.head.W"] = rng.standard_normal(psi["hyper.head.W"].shape)
    sow = np.array([0.05, 2.0])
    w = rng.standard_normal((2, psi.out_dim))

    def f(p):
        return nx.add(nx.sum_all(nx.mul(hyper_forward(sow, 1, p), w)),
                      nx.sum_all(nx.square(hyper_forward(sow, 0, p))))

    tape = Tape()
    leaves = psi.attach(tape)
    grads = dict(zip(leaves, nx.grad(f(leaves), list(leaves.values()))))
    for name in psi.names():
        fd = finite_diff(lambda: float(f(psi)), psi.blocks[name], 1e-5)
        assert rel_err(grads[name], fd) < 1e-4, name
