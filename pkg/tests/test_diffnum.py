import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rewardgaze import diffnum as dn
from rewardgaze.diffnum import NumericError, ShapeError, Tape, Tensor


def param(arr):
    return Tensor(np.asarray(arr, dtype=np.float32), requires_grad=True)


def grad_of(fn, x):
    x.grad = None
    with Tape() as tape:
        out = fn()
        tape.backward(dn.sum(out) if out.data.size > 1 else out)
    return x.grad


def check_grad(fn, *xs, tol=1e-2):
    for x in xs:
        g = grad_of(fn, x)
        num = dn.finite_difference(fn, x)
        assert dn.relative_error(g, num) < tol


def test_mean_pool_and_identity_matmul():
    x = Tensor([[[1, 3], [5, 7]]])
    np.testing.assert_array_equal(dn.mean_pool(x, axis=1).data, [[3, 5]])
    X = np.random.default_rng(0).normal(size=(2, 3)).astype(np.float32)
    np.testing.assert_array_equal(dn.matmul(Tensor(np.eye(2)), Tensor(X)).data, X)


def test_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)|\(2, 3\)"):
        dn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        dn.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_product_gradient_is_other_factor():
    rng = np.random.default_rng(1)
    a, b = param(rng.normal(size=(3, 3))), param(rng.normal(size=(3, 3)))
    g = grad_of(lambda: dn.sum(dn.mul(a, b)), a)
    np.testing.assert_array_equal(g, b.data)
    check_grad(lambda: dn.sum(dn.mul(a, b)), a, b)


def test_softmax_examples():
    np.testing.assert_allclose(dn.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(dn.softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])
    rng = np.random.default_rng(2)
    w = rng.normal(size=4).astype(np.float32)
    x = param(rng.normal(size=4))
    check_grad(lambda: dn.sum(dn.mul(dn.softmax(x), Tensor(w))), x)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_rows_are_distributions(vals):
    p = dn.softmax(Tensor(np.array(vals))).data
    assert np.all(p >= 0)
    assert abs(float(p.astype(np.float64).sum()) - 1) < 1e-6


def test_layer_norm_examples():
    ones, zeros = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_allclose(dn.layer_norm(Tensor([5, 5, 5, 5]), ones, zeros).data, 0, atol=1e-6)
    # oracle: mean 0, var 1 -> x / sqrt(1 + 1e-5)
    out = dn.layer_norm(Tensor([1, -1]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, [1 / np.sqrt(1 + 1e-5), -1 / np.sqrt(1 + 1e-5)], atol=1e-6)
    with pytest.raises(ValueError):
        dn.layer_norm(Tensor([[1.0], [2.0]]), Tensor(np.ones(1)), Tensor(np.zeros(1)))


def test_layer_norm_normalises_rows():
    x = np.random.default_rng(4).normal(3, 2, size=(5, 7)).astype(np.float32)
    y = dn.layer_norm(Tensor(x), Tensor(np.ones(7)), Tensor(np.zeros(7))).data.astype(np.float64)
    np.testing.assert_allclose(y.mean(axis=1), 0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=1), 1, atol=1e-3)


def test_activation_examples():
    assert dn.sigmoid(Tensor(0.0)).item() == 0.5
    assert dn.relu(Tensor(-3.0)).item() == 0.0
    x = param(0.0)
    assert grad_of(lambda: dn.sigmoid(x), x) == pytest.approx(0.25)


def test_sigmoid_stays_open_interval():
    s = dn.sigmoid(Tensor([-200.0, 200.0])).data
    assert 0 < s[0] and s[1] < 1


def test_backward_examples():
    x = param(np.random.default_rng(5).normal(size=(2, 2)))
    np.testing.assert_array_equal(grad_of(lambda: dn.sum(x), x), np.ones((2, 2)))
    np.testing.assert_allclose(grad_of(lambda: dn.sum(dn.mul(x, x)), x), 2 * x.data, rtol=1e-6)


def test_backward_rejects_non_scalar():
    x = param(np.ones(3))
    with Tape() as tape:
        y = dn.mul(x, x)
        with pytest.raises(ValueError):
            tape.backward(y)


def test_backward_accumulates_without_reset():
    x = param([1.0, 2.0])
    with Tape() as tape:
        loss = dn.sum(dn.mul(x, x))
    tape.backward(loss)
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_two_path_dag_sums_contributions():
    # y = x*a + x*b -> dy/dx = a + b
    x = param([1.5, -2.0])
    a, b = Tensor([2.0, 3.0]), Tensor([-1.0, 0.5])
    g = grad_of(lambda: dn.sum(dn.add(dn.mul(x, a), dn.mul(x, b))), x)
    np.testing.assert_allclose(g, [1.0, 3.5])


def test_no_grad_suspends_recording():
    x = param([1.0])
    with Tape() as tape:
        with dn.no_grad():
            y = dn.mul(x, x)
    assert not tape.nodes
    assert not y.requires_grad


def test_tapes_are_thread_local():
    seen = []
    with Tape():
        t = threading.Thread(target=lambda: seen.append(Tape.current()))
        t.start()
        t.join()
    assert seen == [None]


def test_non_finite_results_raise():
    with pytest.raises(NumericError):
        dn.log(Tensor([0.0]))
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        dn.mul(Tensor([3e38]), Tensor([10.0]))


def test_adam_examples():
    p = param([1.0])
    p.grad = np.array([1.0], np.float32)
    st_ = dn.AdamState.for_params([p], lr=0.1)
    dn.adam_step([p], [p.grad], st_)
    # oracle: mhat = 1, vhat = 1 -> 1 - 0.1 * 1 / (1 + 1e-8)
    assert p.data[0] == pytest.approx(0.9, abs=1e-6)

    q = param([0.3, -0.7])
    before = q.data.copy()
    st_ = dn.AdamState.for_params([q], lr=0.1)
    dn.adam_step([q], [np.zeros(2, np.float32)], st_)
    np.testing.assert_array_equal(q.data, before)


def test_adam_decoupled_weight_decay():
    p = param([2.0])
    st_ = dn.AdamState.for_params([p], lr=0.1, weight_decay=0.5)
    dn.adam_step([p], [np.zeros(1, np.float32)], st_)
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.05))


def test_adam_shape_mismatch():
    p = param([1.0, 2.0])
    st_ = dn.AdamState.for_params([p], lr=0.1)
    with pytest.raises(ShapeError):
        dn.adam_step([p], [np.zeros(3, np.float32)], st_)


def _adam_run(seed):
    rng = np.random.default_rng(seed)
    w = param(rng.normal(size=(4, 3)))
    x = Tensor(rng.normal(size=(8, 4)))
    opt = dn.Adam([w], lr=0.01, weight_decay=0.05)
    for _ in range(10):
        opt.zero_grad()
        with Tape() as tape:
            loss = dn.mean(dn.mul(dn.matmul(x, w), dn.matmul(x, w)))
        tape.backward(loss)
        opt.step()
    return w.data


def test_adam_runs_are_bitwise_deterministic():
    assert _adam_run(7).tobytes() == _adam_run(7).tobytes()
