import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cptp import diffcore as dc
from cptp.diffcore import Graph, Tensor, backward, grad_check


def param(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def test_matmul_identity_and_hand_product():
    a = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(dc.matmul(a, Tensor(np.eye(2))).value, [[1, 2], [3, 4]])
    np.testing.assert_array_equal(dc.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).value, [[11]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(dc.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        dc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradients_against_central_differences():
    rng = np.random.default_rng(3)
    a, b = param(rng.normal(size=(3, 4))), param(rng.normal(size=(4, 2)))
    w = rng.normal(size=(3, 2))
    assert grad_check(lambda: dc.sum_all(dc.mul(dc.matmul(a, b), Tensor(w))), [a, b], 1e-5) < 1e-6


def test_single_row_product_matches_batched_rows():
    rng = np.random.default_rng(0)
    a, w = rng.normal(size=(6, 40)), rng.normal(size=(40, 9))
    full = dc.matmul(Tensor(a), Tensor(w)).value
    np.testing.assert_array_equal(dc.matmul(Tensor(a[:1]), Tensor(w)).value, full[:1])


def test_elementwise_trivial_values():
    assert dc.sigmoid(Tensor(0.0)).item() == 0.5
    x = param(-2.0)
    with Graph() as g:
        y = dc.relu(x)
    assert y.item() == 0.0
    assert backward(g, y, [x])[0] == 0.0
    assert dc.log1p(Tensor(np.e - 1)).item() == pytest.approx(1.0, abs=1e-15)


def test_log1p_rejects_negative():
    with pytest.raises(dc.DomainError):
        dc.log1p(Tensor([-0.5]))


def test_binary_ops_refuse_broadcasting():
    with pytest.raises(dc.DimensionError):
        dc.add(Tensor(np.zeros(3)), Tensor(np.zeros((2, 3))))
    # scalar with tensor is allowed
    np.testing.assert_array_equal(dc.mul(Tensor(np.ones(3)), 2.0).value, [2, 2, 2])


def test_elementwise_dispatch():
    assert dc.elementwise("tanh", Tensor(0.0)).item() == 0.0
    assert dc.elementwise("sub", Tensor(3.0), Tensor(1.0)).item() == 2.0
    with pytest.raises(ValueError):
        dc.elementwise("cosh", Tensor(0.0))


def test_non_finite_values_raise():
    with pytest.raises(dc.NonFiniteError):
        dc.mul(Tensor([np.inf]), 1.0)


def test_max_over_time_examples():
    x = Tensor([[1.0], [5.0], [3.0]])
    assert dc.max_over_time(x).value.tolist() == [5.0]
    assert dc.max_over_time(x, [True, False, True]).value.tolist() == [3.0]
    with pytest.raises(dc.EmptySequenceError):
        dc.max_over_time(x, [False, False, False])


def test_max_over_time_routes_one_per_channel_first_tie_wins():
    x = param([[2.0, 1.0], [2.0, 7.0], [0.0, 7.0]])
    with Graph() as g:
        y = dc.sum_all(dc.max_over_time(x))
    (gx,) = backward(g, y, [x])
    np.testing.assert_array_equal(gx, [[1, 0], [0, 1], [0, 0]])


def test_backward_trivial_cases():
    x = param(3.0)
    with Graph() as g:
        y = dc.mul(x, x)
    assert backward(g, y, [x])[0] == 6.0
    x = param(0.0)
    with Graph() as g:
        y = dc.sigmoid(x)
    assert backward(g, y, [x])[0] == 0.25


def test_backward_rejects_non_scalar_loss():
    x = param([1.0, 2.0])
    with Graph() as g:
        y = dc.tanh(x)
    with pytest.raises(dc.ContractError):
        backward(g, y, [x])


def test_unreachable_parameter_gets_exact_zero():
    x, unused = param([1.0, 2.0]), param([[3.0, 4.0]])
    with Graph() as g:
        y = dc.sum_all(dc.mul(x, x))
    gx, gu = backward(g, y, [x, unused])
    np.testing.assert_array_equal(gx, [2, 4])
    np.testing.assert_array_equal(gu, np.zeros((1, 2)))


def test_graph_records_only_with_active_graph():
    x = param(1.0)
    y = dc.tanh(x)
    assert not y.requires_grad
    with Graph() as g:
        dc.tanh(x)
    assert len(g) == 1


def test_grad_check_trivial():
    theta = param(np.linspace(-1, 1, 5))
    assert grad_check(lambda: dc.sum_all(dc.mul(theta, theta)), [theta], 1e-5) < 1e-6
    assert grad_check(lambda: Tensor(4.0), [theta], 1e-5) == 0.0


def test_grad_check_detects_nondeterminism():
    theta = param([1.0])
    calls = iter(range(100))
    with pytest.raises(dc.DeterminismError):
        grad_check(lambda: dc.add(dc.sum_all(theta), float(next(calls))), [theta], 1e-5)


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        grad_check(lambda: Tensor(0.0), [], 0.0)


UNARY = ["sigmoid", "tanh", "relu", "log1p", "abs"]


@settings(max_examples=25, deadline=None)
@given(kind=st.sampled_from(UNARY), seed=st.integers(0, 2**31 - 1))
def test_unary_ops_match_finite_differences(kind, seed):
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.1, 2.0, size=(2, 3)) if kind == "log1p" else rng.normal(size=(2, 3))
    # keep kinks of relu/abs away from the finite-difference stencil
    base = np.where(np.abs(base) < 0.05, 0.3, base)
    x = param(base)
    w = Tensor(rng.normal(size=(2, 3)))
    assert grad_check(lambda: dc.sum_all(dc.mul(dc.elementwise(kind, x), w)), [x], 1e-6) < 1e-5


@settings(max_examples=25, deadline=None)
@given(kind=st.sampled_from(["add", "sub", "mul"]), seed=st.integers(0, 2**31 - 1))
def test_binary_ops_match_finite_differences(kind, seed):
    rng = np.random.default_rng(seed)
    a, b = param(rng.normal(size=(3, 2))), param(rng.normal(size=(3, 2)))
    w = Tensor(rng.normal(size=(3, 2)))
    assert grad_check(lambda: dc.sum_all(dc.mul(dc.elementwise(kind, a, b), w)), [a, b], 1e-6) < 1e-5


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_structural_ops_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = param(rng.normal(size=(2, 6, 3)))
    table = param(rng.normal(size=(5, 3)))
    row = param(rng.normal(size=(2, 4)))
    bias = param(rng.normal(size=3))
    idx = np.array([[0, 4, 4], [2, 1, 0]])

    def f():
        u = dc.unfold(x, 2)  # [2, 5, 6]
        sel = dc.slice_last(dc.select_time(u, 1), 1, 4)
        rep = dc.repeat_time(row, 3)
        emb = dc.add_bias(dc.gather(table, idx), bias)
        cat = dc.concat([emb, rep], axis=-1)
        flat = dc.reshape(cat, (2, 21))
        t = dc.transpose(flat)
        return dc.add(dc.sum_all(dc.tanh(t)), dc.sum_all(dc.mul(sel, sel)))

    assert grad_check(f, [x, table, row, bias], 1e-6) < 1e-5


def test_huber_op_gradients_in_both_branches():
    x = param([0.2, 0.7, 1.5, 3.0])
    assert grad_check(lambda: dc.sum_all(dc.huber(x, 1.0)), [x], 1e-6) < 1e-8


def test_forward_is_bit_deterministic():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(2, 5, 3)))
    w_in, w_rec, b = (Tensor(rng.normal(size=s)) for s in [(3, 8), (2, 8), (8,)])
    a = dc.lstm_scan(x, None, w_in, w_rec, b).value
    c = dc.lstm_scan(x, None, w_in, w_rec, b).value
    assert np.array_equal(a, c)


# ----------------------------------------------------------------- lstm_scan


def composed_lstm(x, mask, w_in, w_rec, bias, reverse=False):
    """Same recurrence built from primitive ops, one step at a time."""
    bsz, steps, _ = x.shape
    hid = w_rec.shape[0]
    h = Tensor(np.zeros((bsz, hid)))
    c = Tensor(np.zeros((bsz, hid)))
    outs = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        z = dc.add(dc.add_bias(dc.matmul(dc.select_time(x, t), w_in), bias), dc.matmul(h, w_rec))
        i = dc.sigmoid(dc.slice_last(z, 0, hid))
        f = dc.sigmoid(dc.slice_last(z, hid, 2 * hid))
        g = dc.tanh(dc.slice_last(z, 2 * hid, 3 * hid))
        o = dc.sigmoid(dc.slice_last(z, 3 * hid, 4 * hid))
        c_new = dc.add(dc.mul(f, c), dc.mul(i, g))
        h_new = dc.mul(o, dc.tanh(c_new))
        m = Tensor(np.repeat(np.asarray(mask, float)[:, t:t + 1], hid, axis=1))
        keep = Tensor(1.0 - m.value)
        h = dc.add(dc.mul(m, h_new), dc.mul(keep, h))
        c = dc.add(dc.mul(m, c_new), dc.mul(keep, c))
        outs[t] = dc.reshape(h, (bsz, 1, hid))
    return dc.concat(outs, axis=1)


@pytest.mark.parametrize("reverse", [False, True])
def test_lstm_scan_matches_primitive_composition(reverse):
    rng = np.random.default_rng(7)
    x = param(rng.normal(size=(3, 5, 4)))
    w_in, w_rec, b = param(rng.normal(size=(4, 12)) * 0.5), param(rng.normal(size=(3, 12)) * 0.5), param(rng.normal(size=12))
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0], [1, 0, 0, 0, 0]], bool)
    weights = Tensor(rng.normal(size=(3, 5, 3)))

    def run(fn):
        with Graph() as g:
            y = fn(x, mask, w_in, w_rec, b, reverse=reverse)
            loss = dc.sum_all(dc.mul(y, weights))
        return y.value, [gr.copy() for gr in backward(g, loss, [x, w_in, w_rec, b])]

    fused, g_fused = run(dc.lstm_scan)
    ref, g_ref = run(composed_lstm)
    np.testing.assert_allclose(fused, ref, rtol=1e-13, atol=1e-14)
    for a, c in zip(g_fused, g_ref):
        np.testing.assert_allclose(a, c, rtol=1e-11, atol=1e-13)


@pytest.mark.parametrize("reverse", [False, True])
def test_lstm_scan_gradients_against_central_differences(reverse):
    rng = np.random.default_rng(11)
    x = param(rng.normal(size=(2, 4, 3)))
    w_in, w_rec, b = param(rng.normal(size=(3, 8))), param(rng.normal(size=(2, 8))), param(rng.normal(size=8))
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], bool)
    weights = Tensor(rng.normal(size=(2, 4, 2)))
    f = lambda: dc.sum_all(dc.mul(dc.lstm_scan(x, mask, w_in, w_rec, b, reverse), weights))
    assert grad_check(f, [x, w_in, w_rec, b], 1e-6) < 1e-6


def test_lstm_scan_padding_carries_state():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(1, 4, 2)))
    w_in, w_rec, b = (Tensor(rng.normal(size=s)) for s in [(2, 4), (1, 4), (4,)])
    mask = np.array([[1, 1, 0, 0]], bool)
    fwd = dc.lstm_scan(x, mask, w_in, w_rec, b).value
    assert np.array_equal(fwd[0, 2], fwd[0, 1]) and np.array_equal(fwd[0, 3], fwd[0, 1])
    bwd = dc.lstm_scan(x, mask, w_in, w_rec, b, reverse=True).value
    assert np.array_equal(bwd[0, 2:], np.zeros((2, 1)))
