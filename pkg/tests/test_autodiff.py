import numpy as np
import pytest

from alignsum import autodiff as ad
from alignsum.errors import InvalidArgumentError, NumericDomainError, ShapeError


@pytest.fixture(autouse=True)
def float64_mode():
    with ad.using_dtype("float64"):
        yield


def test_scaled_softmax_uniform_input():
    out = ad.scaled_softmax(ad.tensor([1.0, 1.0, 1.0]), scale=6.0)
    np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-12)


def test_scaled_softmax_hand_value():
    # e^6 / (e^6 + 1) for the larger entry
    out = ad.scaled_softmax(ad.tensor([1.0, 0.0]), scale=6.0)
    np.testing.assert_allclose(out.data, [0.99753, 0.00247], atol=1e-5)


def test_scaled_softmax_singleton():
    out = ad.scaled_softmax(ad.tensor([5.0]), scale=0.1)
    np.testing.assert_allclose(out.data, [1.0], atol=0)


def test_scaled_softmax_sums_to_one_and_positive():
    rng = np.random.default_rng(0)
    v = ad.tensor(rng.normal(size=(4, 7)))
    out = ad.scaled_softmax(v, scale=3.0)
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(4), atol=1e-6)
    assert (out.data > 0).all()


def test_scaled_softmax_shift_invariance():
    rng = np.random.default_rng(1)
    v = rng.normal(size=9)
    a = ad.scaled_softmax(ad.tensor(v), scale=2.5)
    b = ad.scaled_softmax(ad.tensor(v + 17.3), scale=2.5)
    np.testing.assert_allclose(a.data, b.data, atol=1e-9)


def test_scaled_softmax_errors():
    with pytest.raises(InvalidArgumentError):
        ad.scaled_softmax(ad.tensor(np.empty(0)), scale=1.0)
    with pytest.raises(NumericDomainError):
        ad.scaled_softmax(ad.tensor([1.0, np.nan]), scale=1.0)
    with pytest.raises(InvalidArgumentError):
        ad.scaled_softmax(ad.tensor([1.0, 2.0]), scale=-1.0)


def test_backward_sum_gives_ones():
    x = ad.tensor([3.0, 4.0, 5.0], requires_grad=True)
    with ad.record() as tape:
        loss = ad.sum_(x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_elementwise_square():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    with ad.record() as tape:
        loss = ad.sum_(ad.mul(x, x))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [2.0, 4.0], atol=1e-12)


def test_backward_detached_branch_stays_zero():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    other = ad.tensor([1.0, 1.0], requires_grad=True)
    with ad.record() as tape:
        _ = ad.mul(x, x)  # dead branch
        loss = ad.sum_(other)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])
    np.testing.assert_array_equal(other.grad, [1.0, 1.0])


def test_backward_rejects_non_scalar_loss():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    with ad.record() as tape:
        y = ad.mul(x, x)
    with pytest.raises(InvalidArgumentError):
        tape.backward(y)


def test_backward_linearity():
    rng = np.random.default_rng(2)
    xv = rng.normal(size=6)
    x1 = ad.tensor(xv, requires_grad=True)
    with ad.record() as tape:
        la = ad.sum_(ad.mul(x1, x1))
        lb = ad.sum_(ad.tanh(x1))
        combined = ad.add(la, lb)
    tape.backward(combined)
    g_combined = x1.grad.copy()

    x2 = ad.tensor(xv, requires_grad=True)
    with ad.record() as tape:
        la = ad.sum_(ad.mul(x2, x2))
    tape.backward(la)
    with ad.record() as tape:
        lb = ad.sum_(ad.tanh(x2))
    tape.backward(lb)
    np.testing.assert_allclose(g_combined, x2.grad, atol=1e-12)


def test_grad_accumulates_across_backward_calls():
    x = ad.tensor([2.0], requires_grad=True)
    for _ in range(3):
        with ad.record() as tape:
            loss = ad.sum_(x)
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [3.0])


def test_matmul_matches_numpy_and_grads():
    rng = np.random.default_rng(3)
    a = ad.tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = ad.tensor(rng.normal(size=(4, 5)), requires_grad=True)
    with ad.record() as tape:
        out = ad.matmul(a, b)
        loss = ad.sum_(out)
    np.testing.assert_allclose(out.data, a.data @ b.data, atol=1e-12)
    tape.backward(loss)
    g = np.ones((3, 5))
    np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-12)
    np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-12)


def test_matmul_batched_with_shared_weight():
    rng = np.random.default_rng(4)
    a = ad.tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    w = ad.tensor(rng.normal(size=(4, 5)), requires_grad=True)
    with ad.record() as tape:
        loss = ad.sum_(ad.matmul(a, w))
    tape.backward(loss)
    g = np.ones((2, 3, 5))
    np.testing.assert_allclose(w.grad, np.einsum("bnk,bnm->km", a.data, g), atol=1e-12)
    np.testing.assert_allclose(a.grad, g @ w.data.T, atol=1e-12)


def test_leading_broadcast_only():
    a = ad.tensor(np.ones((2, 3, 4)))
    b = ad.tensor(np.ones((3, 4)))
    assert ad.add(a, b).shape == (2, 3, 4)
    with pytest.raises(ShapeError):
        ad.add(ad.tensor(np.ones((2, 3, 4))), ad.tensor(np.ones((2, 1, 4))))


def test_broadcast_gradient_reduces():
    a = ad.tensor(np.ones((2, 3)), requires_grad=True)
    b = ad.tensor(np.ones(3), requires_grad=True)
    with ad.record() as tape:
        loss = ad.sum_(ad.mul(a, b))
    tape.backward(loss)
    np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])
    np.testing.assert_array_equal(a.grad, np.ones((2, 3)))


def test_expand_gradient_sums():
    a = ad.tensor(np.ones((2, 1, 3)), requires_grad=True)
    with ad.record() as tape:
        loss = ad.sum_(ad.expand(a, (2, 5, 3)))
    tape.backward(loss)
    np.testing.assert_array_equal(a.grad, np.full((2, 1, 3), 5.0))


def test_concat_roundtrip_gradient():
    a = ad.tensor(np.ones((2, 3)), requires_grad=True)
    b = ad.tensor(np.ones((2, 2)), requires_grad=True)
    with ad.record() as tape:
        cat = ad.concat([a, b], axis=-1)
        loss = ad.sum_(ad.mul(cat, ad.constant(np.arange(10.0).reshape(2, 5))))
    tape.backward(loss)
    np.testing.assert_array_equal(a.grad, [[0, 1, 2], [5, 6, 7]])
    np.testing.assert_array_equal(b.grad, [[3, 4], [8, 9]])


def test_gather_rows_scatter_adds():
    table = ad.tensor(np.arange(8.0).reshape(4, 2), requires_grad=True)
    ids = np.array([[0, 1], [1, 3]])
    with ad.record() as tape:
        rows = ad.gather_rows(table, ids)
        loss = ad.sum_(rows)
    np.testing.assert_array_equal(rows.data, table.data[ids])
    tape.backward(loss)
    expected = np.zeros((4, 2))
    np.add.at(expected, ids, np.ones((2, 2, 2)))
    np.testing.assert_array_equal(table.grad, expected)


def test_masked_fill_blocks_gradient():
    a = ad.tensor([1.0, 2.0, 3.0], requires_grad=True)
    mask = np.array([False, True, False])
    with ad.record() as tape:
        out = ad.masked_fill(a, mask, -50.0)
        loss = ad.sum_(out)
    assert out.data[1] == -50.0
    tape.backward(loss)
    np.testing.assert_array_equal(a.grad, [1.0, 0.0, 1.0])


def test_amax_routes_to_first_max():
    a = ad.tensor([[1.0, 5.0, 5.0], [2.0, 0.0, 1.0]], requires_grad=True)
    with ad.record() as tape:
        loss = ad.sum_(ad.amax(a, axis=1))
    tape.backward(loss)
    np.testing.assert_array_equal(a.grad, [[0, 1, 0], [1, 0, 0]])


def test_log_softmax_matches_log_of_softmax():
    rng = np.random.default_rng(5)
    v = rng.normal(size=(3, 6))
    ls = ad.log_softmax(ad.tensor(v)).data
    p = ad.scaled_softmax(ad.tensor(v), scale=1.0).data
    np.testing.assert_allclose(ls, np.log(p), atol=1e-12)


def test_division_by_zero_raises():
    with pytest.raises(NumericDomainError):
        ad.div(ad.tensor([1.0]), ad.tensor([0.0]))


def test_log_domain_error():
    with pytest.raises(NumericDomainError):
        ad.log(ad.tensor([-1.0]))


def test_mixed_dtype_rejected():
    a = ad.tensor([1.0])
    with ad.using_dtype("float32"):
        b = ad.tensor([1.0])
    with pytest.raises(ShapeError):
        ad.add(a, b)


def test_op_outputs_are_immutable():
    out = ad.add(ad.tensor([1.0]), ad.tensor([2.0]))
    with pytest.raises(ValueError):
        out.data[0] = 7.0


def test_repeated_run_bit_identical():
    rng = np.random.default_rng(6)
    v = rng.normal(size=(5, 5))
    w = rng.normal(size=(5, 5))

    def run():
        x = ad.tensor(v, requires_grad=True)
        with ad.record() as tape:
            h = ad.tanh(ad.matmul(x, ad.constant(w)))
            loss = ad.sum_(ad.mul(h, h))
        tape.backward(loss)
        return loss.item(), x.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    np.testing.assert_array_equal(g1, g2)
