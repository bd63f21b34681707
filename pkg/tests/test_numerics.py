import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aknet import numerics as nx
from aknet.numerics import Adam, ContractError, Node, Tape

from conftest import finite_diff, rel_err


def loop_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_matmul_matches_triple_loop(p, q, r, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((p, q)), rng.standard_normal((q, r))
    np.testing.assert_allclose(nx.matmul(a, b), loop_matmul(a, b), rtol=1e-12, atol=1e-12)


def test_matmul_shape_mismatch_raises():
    with pytest.raises(ContractError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_plain_arrays_skip_the_tape():
    out = nx.tanh(nx.affine(np.ones((2, 3)), np.ones((3, 4)), np.zeros(4)))
    assert isinstance(out, np.ndarray)


@pytest.mark.parametrize("act", ["sigmoid", "tanh", "relu", "identity"])
def test_affine_activation_gradient(act, rng):
    x = rng.standard_normal((4, 3))
    W = rng.standard_normal((3, 5))
    b = rng.standard_normal(5)
    target = rng.standard_normal((4, 5))

    def f(tape=None):
        if tape is None:
            return float(np.sum((nx.activate(act, nx.affine(x, W, b)) - target) ** 2))
        Wn, bn = tape.leaf(W), tape.leaf(b)
        out = nx.activate(act, nx.affine(x, Wn, bn))
        return nx.sum_all(nx.square(nx.sub(out, target))), (Wn, bn)

    L, leaves = f(Tape())
    gW, gb = nx.grad(L, leaves)
    assert rel_err(gW, finite_diff(f, W)) < 1e-4
    assert rel_err(gb, finite_diff(f, b)) < 1e-4


def test_normalize_concat_reshape_take_gradient(rng):
    v = rng.standard_normal((3, 4))
    A = rng.standard_normal((3, 2, 2))
    w = rng.standard_normal((3, 6))

    def forward(vv, AA):
        u = nx.normalize_rows(vv)
        c = nx.concat([u, nx.take_cols(u, 1, 3)], axis=-1)
        M = nx.reshape(nx.take_cols(c, 0, 4), (3, 2, 2))
        y = nx.batched_matvec(nx.mul(M, AA), nx.take_cols(c, 4, 6))
        return nx.add(nx.sum_all(nx.mul(c, w)), nx.mean_all(nx.square(y)))

    tape = Tape()
    vn, An = tape.leaf(v), tape.leaf(A)
    gv, gA = nx.grad(forward(vn, An), [vn, An])
    f = lambda: float(forward(v, A))
    assert rel_err(gv, finite_diff(f, v)) < 1e-4
    assert rel_err(gA, finite_diff(f, A)) < 1e-4


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)))
def test_normalize_rows_unit_or_zero(x):
    out = nx.normalize_rows(x)
    norms = np.linalg.norm(x, axis=-1)
    on = norms > 1e-8
    np.testing.assert_allclose(np.linalg.norm(out[on], axis=-1), 1.0, rtol=1e-12)
    assert np.all(np.linalg.norm(out[~on], axis=-1) <= 1.0)


def test_broadcast_add_gradient_sums_over_batch(rng):
    tape = Tape()
    b = tape.leaf(np.zeros(3))
    L = nx.sum_all(nx.add(rng.standard_normal((5, 3)), b))
    (g,) = nx.grad(L, [b])
    np.testing.assert_array_equal(g, np.full(3, 5.0))


def test_grad_contracts():
    tape = Tape()
    a = tape.leaf(np.ones(3))
    with pytest.raises(ContractError):
        nx.grad(nx.mul(a, 2.0), [a])
    unused = tape.leaf(np.ones(2))
    L = nx.sum_all(nx.square(a))
    g_a, g_u = nx.grad(L, [a, unused])
    np.testing.assert_array_equal(g_a, 2 * np.ones(3))
    np.testing.assert_array_equal(g_u, np.zeros(2))
    assert isinstance(L, Node)
    other = Tape().leaf(np.ones(3))
    with pytest.raises(ContractError):
        nx.grad(L, [other])


def test_adam_first_step_moves_by_lr():
    # bias-corrected first step is lr * g / (|g| + eps) = lr * sign(g)
    p = {"w": np.array([1.0, -2.0, 0.5])}
    Adam(lr=0.01).step(p, {"w": np.array([3.0, -0.2, 1e-3])})
    np.testing.assert_allclose(p["w"], [0.99, -1.99, 0.49], rtol=0, atol=1e-7)


def test_adam_minimises_quadratic():
    p = {"w": np.array([5.0, -3.0])}
    opt = Adam(lr=0.1)
    for _ in range(500):
        opt.step(p, {"w": 2 * p["w"]})
    assert np.all(np.abs(p["w"]) < 1e-2)


def test_adam_rejects_nan_naming_block():
    with pytest.raises(FloatingPointError, match="gru.Wz"):
        Adam().step({"gru.Wz": np.zeros(2)}, {"gru.Wz": np.array([np.nan, 0.0])})


def test_matmul_hand_cases(rng):
    np.testing.assert_array_equal(nx.matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]]), [[3.0], [7.0]])
    A = rng.standard_normal((2, 3))
    np.testing.assert_array_equal(nx.matmul(np.eye(2), A), A)
    B = rng.standard_normal((3, 4))
    I = np.eye(3)
    np.testing.assert_allclose(nx.matmul(nx.matmul(A, I), B), nx.matmul(A, nx.matmul(I, B)),
                               rtol=0, atol=1e-12)


def test_square_gradient_analytic():
    tape = Tape()
    p = tape.leaf(np.array(3.0))
    (g,) = nx.grad(nx.sum_all(nx.square(p)), [p])
    assert g == 6.0


def test_constant_loss_gives_zero_gradient():
    p = Tape().leaf(np.ones(4))
    (g,) = nx.grad(nx.sum_all(np.ones(3)), [p])
    np.testing.assert_array_equal(g, np.zeros(4))


def test_sigmoid_layer_fd_step_1e5(rng):
    x, W, b = rng.standard_normal(3), rng.standard_normal((3, 3)), rng.standard_normal(3)
    tape = Tape()
    Wn, bn = tape.leaf(W), tape.leaf(b)
    gW, gb = nx.grad(nx.sum_all(nx.sigmoid(nx.affine(x[None], Wn, bn))), [Wn, bn])
    f = lambda: float(np.sum(nx.sigmoid(nx.affine(x[None], W, b))))
    assert rel_err(gW, finite_diff(f, W, 1e-5)) < 1e-4
    assert rel_err(gb, finite_diff(f, b, 1e-5)) < 1e-4


def test_backward_is_deterministic(rng):
    tape = Tape()
    W = tape.leaf(rng.standard_normal((4, 4)))
    L = nx.sum_all(nx.tanh(nx.matmul(rng.standard_normal((3, 4)), W)))
    g1, g2 = nx.grad(L, [W])[0], nx.grad(L, [W])[0]
    assert g1.tobytes() == g2.tobytes()


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, 2.0])}
    opt = Adam()
    opt.step(p, {"w": np.array([1.0, 1.0])})
    before = p["w"].copy()
    m_before = opt.m["w"].copy()
    opt.step(p, {"w": np.zeros(2)})
    # update is lr * m_hat / (sqrt(v_hat) + eps) with the decayed first moment
    m_hat = 0.9 * m_before / (1 - 0.9**2)
    v_hat = 0.999 * 0.001 / (1 - 0.999**2)
    np.testing.assert_allclose(before - p["w"], 1e-3 * m_hat / (np.sqrt(v_hat) + 1e-8))
    np.testing.assert_allclose(opt.m["w"], 0.9 * m_before)


def test_adam_constant_gradient_moves_monotonically():
    p = {"w": np.array([0.0])}
    opt = Adam()
    trace = []
    for _ in range(100):
        opt.step(p, {"w": np.array([0.7])})
        trace.append(p["w"][0])
    assert np.all(np.diff(trace) < 0)
    # constant gradient: m_hat = g and v_hat = g^2, so each step is lr * g / (|g| + eps)
    np.testing.assert_allclose(trace[-1], -100 * 1e-3 * 0.7 / (0.7 + 1e-8), rtol=1e-9)


def test_adam_quadratic_bowl_default_step():
    p = {"w": np.array([0.5, -0.3])}
    opt = Adam()
    for _ in range(2000):
        opt.step(p, {"w": 2 * p["w"]})
    assert float(np.sum(p["w"] ** 2)) < 1e-6
