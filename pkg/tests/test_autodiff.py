import threading

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, strategies as st

from rgnn import autodiff as ad
from rgnn.autodiff import DimensionError, DomainError, NormalizationError, TapeError, Tensor

from conftest import param

SM1000_TAIL = 0.0  # e^-1000 / (1 + e^-1000) underflows to zero, from a 50-digit evaluation


def T(x, name=None):
    return Tensor(np.asarray(x, dtype=float), requires_grad=name is not None, name=name)


# -- matmul -------------------------------------------------------------------


def test_matmul_identity():
    out = ad.matmul(T(np.eye(2)), T([[1, 2], [3, 4]]))
    npt.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_orthogonal_rows():
    npt.assert_array_equal(ad.matmul(T([[1, 0]]), T([[0], [5]])).data, [[0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


def test_matmul_grad():
    rng = np.random.default_rng(0)
    a, b = param(rng, (3, 4), "a"), param(rng, (4, 2), "b")
    rep = ad.grad_check(lambda: ad.sum_all(ad.matmul(a, b)), {"a": a, "b": b})
    assert rep.ok and rep.max_error < 1e-6, rep.errors


# -- ewise ----------------------------------------------------------------------


def test_hadamard_annihilator():
    npt.assert_array_equal(ad.hadamard(T([[1, 2, 3]]), T([[0, 0, 0]])).data, [[0, 0, 0]])


def test_add_row_broadcast():
    npt.assert_array_equal(ad.add(T([[1, 1], [2, 2]]), T([10, 20])).data, [[11, 21], [12, 22]])


def test_broadcast_backward_sums_rows():
    a, b = T(np.ones((3, 2)), "a"), T([1.0, 2.0], "b")
    grads = ad.backward(ad.sum_all(ad.add(a, b)))
    npt.assert_array_equal(grads["b"].data, [3, 3])


def test_ewise_incompatible():
    with pytest.raises(DimensionError):
        ad.add(T(np.ones((2, 2))), T(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        ad.add(T(np.ones((2, 2))), T(np.ones((2, 1))))
    with pytest.raises(ValueError):
        ad.ewise("div", T([1.0]), T([1.0]))


@pytest.mark.parametrize("op", ["add", "sub", "hadamard"])
def test_ewise_grad(op):
    rng = np.random.default_rng(1)
    a, b = param(rng, (2, 3), "a"), param(rng, (2, 3), "b")
    rep = ad.grad_check(lambda: ad.sum_all(ad.hadamard(ad.ewise(op, a, b), ad.ewise(op, a, b))),
                        {"a": a, "b": b})
    assert rep.max_error < 1e-6


def test_operator_sugar():
    a = T([[1.0, 2.0]])
    npt.assert_array_equal((2 * a - 1 + a * a).data, [[2, 7]])
    npt.assert_array_equal((-a).data, [[-1, -2]])
    npt.assert_array_equal((1 - a).data, [[0, -1]])
    npt.assert_array_equal(a.T.data, [[1], [2]])


# -- activations ----------------------------------------------------------------


def test_activation_fixed_points():
    assert ad.sigmoid(T([0.0])).data[0] == 0.5
    assert ad.tanh(T([0.0])).data[0] == 0.0
    npt.assert_array_equal(ad.elu(T([-0.0, 1.0])).data, [0.0, 1.0])
    assert ad.leaky_relu(T([-5.0]), 0.2).data[0] == pytest.approx(-1.0, abs=1e-15)


def test_sigmoid_stable_at_extremes():
    with np.errstate(over="raise"):
        out = ad.sigmoid(T([-1000.0, 1000.0])).data
    npt.assert_array_equal(out, [0.0, 1.0])
    assert ad.log_sigmoid(T([-1000.0])).data[0] == -1000.0


def test_log_domain_error_has_index():
    with pytest.raises(DomainError, match=r"\(1, 0\)"):
        ad.activation("log", T([[1.0], [0.0]]))


def test_unknown_activation():
    with pytest.raises(ValueError):
        ad.activation("swish", T([1.0]))


@pytest.mark.parametrize("kind", ["sigmoid", "tanh", "elu", "leaky_relu", "exp", "log", "log_sigmoid", "relu"])
def test_activation_grad(kind):
    rng = np.random.default_rng(2)
    lo = 0.1 if kind == "log" else -1.0
    x = param(rng, (3, 4), "x", lo=lo)
    if kind in ("elu", "leaky_relu", "relu"):  # keep away from the kink
        x.data[np.abs(x.data) < 1e-3] = 0.5
    rep = ad.grad_check(lambda: ad.sum_all(ad.activation(kind, x)), {"x": x})
    assert rep.max_error < 1e-6, rep.errors


# -- softmax --------------------------------------------------------------------


def test_softmax_uniform_and_singleton():
    npt.assert_allclose(ad.softmax_rows(T([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-15)
    assert ad.softmax_rows(T([[4.2]])).data[0, 0] == 1.0
    out = ad.softmax_rows(T([[3.0, 1.0, -2.0]]), mask=np.array([[False, True, False]])).data
    npt.assert_array_equal(out, [[0.0, 1.0, 0.0]])


def test_softmax_large_logit_matches_extended_precision():
    with np.errstate(over="raise"):
        out = ad.softmax_rows(T([[1000.0, 0.0]])).data
    assert out[0, 0] == 1.0
    assert out[0, 1] == SM1000_TAIL


def test_softmax_fully_masked_row_named():
    with pytest.raises(NormalizationError, match="row 1"):
        ad.softmax_rows(T(np.zeros((2, 2))), mask=np.array([[True, False], [False, False]]))


@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_softmax_rows_sum_and_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-5, 5, (4, 5))
    mask = rng.random((4, 5)) < 0.7
    mask[:, 0] = True
    out = ad.softmax_rows(T(x), mask).data
    npt.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(out[~mask] == 0.0)
    npt.assert_allclose(ad.softmax_rows(T(x + shift), mask).data, out, atol=1e-12)


def test_softmax_grads():
    rng = np.random.default_rng(3)
    x = param(rng, (3, 4), "x")
    w = rng.uniform(-1, 1, (3, 4))
    mask = np.array([[1, 1, 0, 1], [1, 0, 0, 0], [1, 1, 1, 1]], dtype=bool)
    rep = ad.grad_check(lambda: ad.sum_all(ad.hadamard(ad.softmax_rows(x, mask), T(w))), {"x": x})
    assert rep.max_error < 1e-6
    rep = ad.grad_check(lambda: ad.sum_all(ad.hadamard(ad.log_softmax_rows(x), T(w))), {"x": x})
    assert rep.max_error < 1e-6


# -- gather / structural ops ----------------------------------------------------------


def test_gather_rows():
    npt.assert_array_equal(ad.gather_rows(T([[1], [2], [3]]), [2, 0]).data, [[3], [1]])


def test_gather_duplicate_accumulates():
    x = T(np.zeros((2, 3)), "x")
    grads = ad.backward(ad.sum_all(ad.gather_rows(x, [0, 0])))
    npt.assert_array_equal(grads["x"].data, [[2, 2, 2], [0, 0, 0]])


def test_gather_out_of_range():
    with pytest.raises(IndexError):
        ad.gather_rows(T(np.zeros((2, 1))), [2])
    with pytest.raises(IndexError):
        ad.gather_rows(T(np.zeros((2, 1))), [-1])


def test_structural_grads():
    rng = np.random.default_rng(4)
    x, y = param(rng, (4, 3), "x"), param(rng, (4, 2), "y")
    w = T(rng.uniform(-1, 1, (5, 1)))

    def f():
        g = ad.gather_rows(ad.concat_cols([x, y]), [3, 1, 1, 0, 2])
        return ad.sum_all(ad.hadamard(ad.sum_cols(ad.hadamard(g, g)), w))

    assert ad.grad_check(f, {"x": x, "y": y}).max_error < 1e-6
    rep = ad.grad_check(lambda: ad.mean_all(ad.matmul(ad.transpose(x), x)), {"x": x})
    assert rep.max_error < 1e-6


def test_scale_and_add_scalar():
    x = T([[1.0, -2.0]], "x")
    out = ad.add_scalar(ad.scale(x, 3.0), 1.0)
    npt.assert_array_equal(out.data, [[4.0, -5.0]])
    npt.assert_array_equal(ad.backward(ad.sum_all(out))["x"].data, [[3.0, 3.0]])


# -- dropout ----------------------------------------------------------------------


def test_dropout_inverted_scaling():
    rng = np.random.default_rng(0)
    x = T(np.ones((200, 50)))
    out = ad.dropout(x, 0.2, rng).data
    assert set(np.unique(out)) <= {0.0, 1.25}
    assert abs(out.mean() - 1.0) < 0.02
    assert ad.dropout(x, 0.2, rng, train=False) is x
    with pytest.raises(ValueError):
        ad.dropout(x, 1.0, rng)


# -- backward / tape --------------------------------------------------------------


def test_backward_sum_gives_ones():
    W = T(np.zeros((2, 2)), "W")
    npt.assert_array_equal(ad.backward(ad.sum_all(W))["W"].data, np.ones((2, 2)))


def test_backward_sigmoid_derivative():
    w, x = T([[0.0]], "w"), T([[1.0]])
    assert ad.backward(ad.sum_all(ad.hadamard(ad.sigmoid(w), x)))["w"].data[0, 0] == 0.25


def test_backward_non_scalar():
    with pytest.raises(TapeError):
        ad.backward(ad.add(T([[1.0, 2.0]], "x"), T([[1.0, 1.0]])))


def test_backward_needs_grad_path():
    with pytest.raises(TapeError):
        ad.backward(ad.sum_all(T([[1.0]])))


def test_unreachable_params_get_zeros_and_tape_clears():
    a, b = T([[1.0, 2.0]], "a"), T([[3.0]], "b")
    grads = ad.backward(ad.sum_all(ad.scale(a, 2.0)), {"a": a, "b": b})
    npt.assert_array_equal(grads["b"].data, [[0.0]])
    npt.assert_array_equal(grads["a"].data, [[2.0, 2.0]])
    assert len(ad.tape()) == 0


def test_item_requires_scalar():
    with pytest.raises(TapeError):
        T([1.0, 2.0]).item()


def test_no_grad_records_nothing():
    x = T([[1.0]], "x")
    with ad.no_grad():
        y = ad.sigmoid(x)
    assert len(ad.tape()) == 0 and not y.requires_grad


def test_tape_topological_order():
    x = T([[0.3, -0.2]], "x")
    ad.sum_all(ad.tanh(ad.scale(x, 2.0)))
    nodes = ad.tape().nodes
    pos = {id(n.out): k for k, n in enumerate(nodes)}
    for k, n in enumerate(nodes):
        for inp in n.inputs:
            assert pos.get(id(inp), -1) < k


def test_tape_is_thread_local():
    seen = []
    x = T([[1.0]], "x")
    ad.sigmoid(x)

    def worker():
        seen.append(len(ad.tape()))

    th = threading.Thread(target=worker)
    th.start()
    th.join()
    assert seen == [0] and len(ad.tape()) == 1


@given(st.integers(0, 10_000))
def test_backward_linearity(seed):
    rng = np.random.default_rng(seed)
    w = param(rng, (3, 2), "w")
    x = T(rng.uniform(-1, 1, (4, 3)))

    def l1():
        return ad.sum_all(ad.tanh(ad.matmul(x, w)))

    def l2():
        return ad.mean_all(ad.hadamard(ad.matmul(x, w), ad.matmul(x, w)))

    g1 = ad.backward(l1(), {"w": w})["w"].data
    g2 = ad.backward(l2(), {"w": w})["w"].data
    g12 = ad.backward(ad.add(l1(), l2()), {"w": w})["w"].data
    npt.assert_allclose(g12, g1 + g2, atol=1e-12)


def test_replay_is_bit_identical():
    def once():
        rng = np.random.default_rng(5)
        w = param(rng, (3, 3), "w")
        x = T(rng.uniform(-1, 1, (4, 3)))
        out = ad.sum_all(ad.elu(ad.dropout(ad.matmul(x, w), 0.3, rng)))
        return out.data.copy(), ad.backward(out)["w"].data

    (a, ga), (b, gb) = once(), once()
    assert np.array_equal(a, b) and np.array_equal(ga, gb)


# -- grad_check -------------------------------------------------------------------


def test_grad_check_identity_sum_is_exact():
    x = T(np.random.default_rng(0).uniform(-1, 1, (3, 3)), "x")
    rep = ad.grad_check(lambda: ad.sum_all(x), {"x": x})
    assert rep.max_error < 1e-9 and rep.ok


def test_grad_check_matmul_chain():
    rng = np.random.default_rng(6)
    a, b, c = param(rng, (3, 4), "a"), param(rng, (4, 4), "b"), param(rng, (4, 2), "c")
    rep = ad.grad_check(lambda: ad.sum_all(ad.matmul(ad.matmul(a, b), c)), {"a": a, "b": b, "c": c})
    assert rep.ok and rep.max_error < 1e-6


def test_grad_check_rejects_dropout():
    rng = np.random.default_rng(0)
    x = param(rng, (5, 5), "x")
    rep = ad.grad_check(lambda: ad.sum_all(ad.dropout(x, 0.5, rng)), {"x": x})
    assert rep.rejected is not None and not rep.ok


def test_grad_check_reports_wrong_gradient():
    x = param(np.random.default_rng(0), (2, 2), "x")

    def bad():  # forward x**2, backward claims x
        return ad.sum_all(ad.record("bogus", x.data ** 2, (x,), lambda g: (g * x.data,)))

    rep = ad.grad_check(bad, {"x": x})
    assert rep.failures == ["x"]


def test_relative_error_floor():
    assert ad.relative_error(np.array([1e-9]), np.array([0.0])) == pytest.approx(1e-4)
    assert ad.relative_error(np.array([2.0]), np.array([1.0])) == 0.5
