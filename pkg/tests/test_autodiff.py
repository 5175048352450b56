import numpy as np
import pytest

from junctionsim import autodiff as ad


def finite_difference(fn, arrays, index, coord, step=1e-6):
    """Central finite difference of scalar fn w.r.t. arrays[index].flat[coord]."""
    plus = [a.copy() for a in arrays]
    minus = [a.copy() for a in arrays]
    plus[index].flat[coord] += step
    minus[index].flat[coord] -= step
    return (fn(plus) - fn(minus)) / (2.0 * step)


def check_gradients(build, shapes, seed=0, step=1e-6, rtol=1e-6, atol=1e-8):
    """build(tensors) -> scalar Tensor; compares every coordinate's analytic
    gradient against central differences."""
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]

    def value(arrs):
        tensors = [ad.parameter(a) for a in arrs]
        return build(tensors).item()

    tensors = [ad.parameter(a) for a in arrays]
    out = build(tensors)
    out.backward()
    for i, t in enumerate(tensors):
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        for coord in range(t.data.size):
            fd = finite_difference(value, arrays, i, coord, step)
            assert grad.flat[coord] == pytest.approx(fd, rel=rtol, abs=atol), (
                i,
                coord,
            )


def test_add_mul_broadcast():
    check_gradients(
        lambda ts: ((ts[0] + ts[1]) * ts[2]).sum(), [(3, 4), (4,), (3, 1)]
    )


def test_sub_div():
    check_gradients(
        lambda ts: ((ts[0] - ts[1]) / (ts[2] * ts[2] + 1.5)).sum(),
        [(2, 3), (2, 3), (3,)],
    )


def test_matmul_plain_and_batched():
    check_gradients(lambda ts: (ts[0] @ ts[1]).sum(), [(3, 4), (4, 2)])
    check_gradients(lambda ts: (ts[0] @ ts[1]).sum(), [(2, 3, 4), (4, 5)])
    check_gradients(lambda ts: (ts[0] @ ts[1]).sum(), [(2, 3, 4), (2, 4, 5)])


def test_unary_ops():
    check_gradients(lambda ts: ad.exp(ts[0]).sum(), [(3, 3)])
    check_gradients(lambda ts: ad.tanh(ts[0]).sum(), [(5,)])
    check_gradients(lambda ts: ad.sigmoid(ts[0]).sum(), [(4, 2)])
    check_gradients(lambda ts: ad.softplus(ts[0]).sum(), [(6,)])
    check_gradients(lambda ts: ad.log(ad.softplus(ts[0]) + 0.5).sum(), [(6,)])
    check_gradients(lambda ts: (ts[0] ** 3.0).sum(), [(4,)])
    check_gradients(lambda ts: ad.sqrt(ts[0] * ts[0] + 1.0).sum(), [(4,)])


def test_reductions():
    check_gradients(lambda ts: ts[0].sum(axis=0).sum(), [(3, 4)])
    check_gradients(lambda ts: ts[0].sum(axis=1, keepdims=True).sum(), [(3, 4)])
    check_gradients(lambda ts: ts[0].mean(), [(3, 4)])
    check_gradients(lambda ts: ts[0].mean(axis=-1).sum(), [(2, 5)])


def test_max_pool():
    check_gradients(lambda ts: ad.max_along(ts[0], axis=1).sum(), [(3, 6)], seed=5)
    check_gradients(
        lambda ts: ad.max_along(ts[0], axis=0, keepdims=True).sum(), [(4, 3)], seed=6
    )


def test_shape_ops():
    check_gradients(lambda ts: ts[0].reshape((6,)).sum(), [(2, 3)])
    check_gradients(
        lambda ts: (ts[0].transpose((1, 0, 2)) * 2.0).sum(), [(2, 3, 4)]
    )
    check_gradients(lambda ts: ts[0][1:, :2].sum(), [(3, 4)])
    check_gradients(
        lambda ts: ad.concatenate([ts[0], ts[1]], axis=1).sum(), [(2, 3), (2, 2)]
    )


def test_getitem_integer_array_accumulates():
    idx = np.array([0, 2, 0])
    check_gradients(lambda ts: (ts[0][idx] * ts[1]).sum(), [(3, 2), (3, 2)])


def test_softmax_and_log_softmax():
    check_gradients(lambda ts: (ad.softmax(ts[0], axis=-1) * ts[1]).sum(), [(3, 4), (3, 4)])
    check_gradients(lambda ts: (ad.log_softmax(ts[0], axis=-1) * ts[1]).sum(), [(2, 5), (2, 5)])


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    x = ad.constant(rng.standard_normal((4, 7)) * 10)
    s = ad.softmax(x, axis=-1).detach()
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-12)


def test_layer_norm():
    check_gradients(
        lambda ts: (ad.layer_norm(ts[0], ts[1], ts[2]) * ts[3]).sum(),
        [(3, 5), (5,), (5,), (3, 5)],
    )


def test_shared_subexpression_diamond():
    # gradient through a value used twice equals the sum of per-path gradients
    x = ad.parameter(np.array([1.5]))
    y = x * 3.0
    z = (y * y) + y  # dz/dx = 2*9*x*... careful: z = 9x^2 + 3x -> dz/dx = 18x + 3
    z.backward(np.array([1.0]))
    assert x.grad == pytest.approx(18 * 1.5 + 3)


def test_parameter_sharing_sum_rule():
    # hand-built one-layer case: f = sum(W x) + sum(W y); dW = x^T-ish + y^T-ish
    rng = np.random.default_rng(1)
    w = ad.parameter(rng.standard_normal((3, 3)))
    x = ad.constant(rng.standard_normal((3, 2)))
    y = ad.constant(rng.standard_normal((3, 2)))
    (w @ x).sum().backward()
    gx_only = w.grad.copy()
    w.zero_grad()
    (w @ y).sum().backward()
    gy_only = w.grad.copy()
    w.zero_grad()
    ((w @ x).sum() + (w @ y).sum()).backward()
    assert np.allclose(w.grad, gx_only + gy_only, atol=1e-12)


def test_backward_requires_scalar():
    x = ad.parameter(np.ones((2, 2)))
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_parameter_store_roundtrip():
    store = ad.ParameterStore()
    rng = np.random.default_rng(2)
    store.add("w1", rng.standard_normal((2, 3)))
    store.add("b1", rng.standard_normal(3))
    assert store.total_count() == 9
    state = store.state_arrays()
    store["w1"].data[:] = 0.0
    store.load_state_arrays(state)
    assert np.array_equal(store["w1"].data, state["w1"])
    with pytest.raises(KeyError):
        store.add("w1", np.zeros(1))


def test_sgd_clip():
    store = ad.ParameterStore()
    t = store.add("w", np.zeros(4))
    t.grad = np.full(4, 10.0)  # norm 20
    store.sgd_step(learning_rate=1.0, grad_clip=5.0)
    # scaled to norm 5 -> each coord 2.5
    assert np.allclose(t.data, -2.5)
