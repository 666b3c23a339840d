import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from interact import tensor as T
from interact.errors import DimensionError, UsageError
from interact.tensor import ParameterStore, Tensor


def naive_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def leaf(arr, name="x"):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True, name=name)


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 3))
    out = T.matmul(Tensor(np.eye(3)), Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_matmul_hand_arithmetic():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


@pytest.mark.parametrize("shape", [(5, 4, 6), (8, 8, 8)])
def test_matmul_matches_triple_loop(shape):
    n, k, m = shape
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
    out = T.matmul(Tensor(a.astype(np.float32)), Tensor(b.astype(np.float32)))
    np.testing.assert_allclose(out.data, naive_matmul(a, b), atol=1e-5, rtol=1e-6)
    with T.precision(np.float64):
        out64 = T.matmul(Tensor(a), Tensor(b))
    np.testing.assert_allclose(out64.data, naive_matmul(a, b), atol=1e-6, rtol=0)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


# ---------------------------------------------------------------- softmax


def test_softmax_uniform_row():
    out = T.softmax_rows(Tensor([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-7)


def test_softmax_large_logits_do_not_overflow():
    with np.errstate(over="raise"):
        out = T.softmax_rows(Tensor([[1000.0, 0.0]]))
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data, [[1.0, 0.0]], atol=1e-7)


def test_softmax_matches_extended_precision():
    rng = np.random.default_rng(2)
    x = rng.normal(scale=5.0, size=(6, 7))
    out = T.softmax_rows(Tensor(x.astype(np.float32))).data
    mpmath.mp.dps = 40
    for i, row in enumerate(x):
        exps = [mpmath.exp(mpmath.mpf(float(v))) for v in row]
        total = mpmath.fsum(exps)
        expected = np.array([float(e / total) for e in exps])
        np.testing.assert_allclose(out[i], expected, atol=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(row):
    out = T.softmax_rows(Tensor(np.array([row], dtype=np.float32)))
    assert abs(out.data.sum() - 1.0) <= 1e-6


# ---------------------------------------------------------------- layer norm


def test_layer_norm_constant_vector_is_zero():
    x = Tensor(np.full((1, 4), 3.0))
    out = T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), 1e-5)
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_already_normalized():
    with T.precision(np.float64):
        out = T.layer_norm(Tensor(np.array([1.0, -1.0])), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-12)
    np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-9)


def test_layer_norm_shape_mismatch():
    with pytest.raises(DimensionError):
        T.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(4)))


def test_layer_norm_gradient_finite_difference():
    rng = np.random.default_rng(3)
    x = leaf(rng.normal(size=(3, 5)), "x")
    g = leaf(rng.normal(size=5), "gain")
    b = leaf(rng.normal(size=5), "bias")
    w = rng.normal(size=(3, 5))
    store = ParameterStore({"x": x, "gain": g, "bias": b})
    err = T.finite_diff_check(lambda: T.tsum(T.layer_norm(x, g, b, 1e-5) * w), store, 1e-3)
    assert err < 1e-4


# ---------------------------------------------------------------- backward


def test_backward_square_sum():
    x = leaf([1.0, 2.0])
    loss = T.tsum(x * x)
    T.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_unreachable_parameter_gets_zero():
    x = leaf([1.0, 2.0], "x")
    p = leaf([5.0], "p")
    store = ParameterStore({"x": x, "p": p})
    T.backward(T.tsum(x * 3.0), store)
    np.testing.assert_array_equal(p.grad, [0.0])
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_backward_requires_recorded_tensor():
    with pytest.raises(UsageError):
        T.backward(Tensor(np.array(1.0)))


def test_backward_requires_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(UsageError):
        T.backward(x * 2.0)
    T.active_tape().clear()


def test_tape_cleared_after_backward():
    x = leaf([1.0])
    T.backward(T.tsum(x * x))
    assert len(T.active_tape()) == 0


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with T.no_grad():
        y = x * 2.0
    assert y.node_id is None and len(T.active_tape()) == 0


# ---------------------------------------------------------------- adam


def test_adam_first_step_moves_by_lr():
    p = leaf([1.0, -2.0, 3.0], "p")
    store = ParameterStore({"p": p})
    state = T.AdamState(lr=0.01, eps=1e-12)
    p.grad = np.array([0.5, -3.0, 1e-3])
    before = p.data.copy()
    T.adam_step(store, state)
    np.testing.assert_allclose(before - p.data, 0.01 * np.sign([0.5, -3.0, 1e-3]), rtol=1e-6)
    assert p.grad is None and state.step == 1


def test_adam_zero_gradient_keeps_parameter():
    p = leaf([1.0, 2.0], "p")
    store = ParameterStore({"p": p})
    p.grad = np.zeros(2)
    T.adam_step(store, T.AdamState())
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_adam_missing_gradient_names_parameter():
    store = ParameterStore({"weights.a": leaf([1.0])})
    with pytest.raises(UsageError, match="weights.a"):
        T.adam_step(store, T.AdamState())


def test_adam_quadratic_converges():
    p = leaf([3.0, -2.0], "p")
    store = ParameterStore({"p": p})
    scale = np.array([1.0, 10.0])
    state = T.AdamState(lr=0.1)
    losses = []
    for _ in range(100):
        loss = T.tsum(T.square(p) * scale)
        losses.append(float(loss.data))
        T.backward(loss, store)
        T.adam_step(store, state)
    final = float(np.sum(p.data ** 2 * scale))
    assert final < 0.01 * losses[0]
    tail = np.array(losses[20:])
    assert tail[-1] < tail[0]


# ---------------------------------------------------------------- finite_diff_check


def test_fd_check_linear_is_exact():
    p = leaf([1.0, 2.0, 3.0], "p")
    store = ParameterStore({"p": p})
    assert T.finite_diff_check(lambda: T.tsum(p), store, eps=2.0 ** -10) == 0.0


def test_fd_check_quadratic():
    p = leaf([0.3, -1.7, 2.2], "p")
    store = ParameterStore({"p": p})
    assert T.finite_diff_check(lambda: T.tsum(T.square(p)), store, eps=1e-3) < 1e-8


def test_fd_check_rejects_non_scalar():
    p = leaf([1.0, 2.0], "p")
    with pytest.raises(UsageError):
        T.finite_diff_check(lambda: p * 2.0, ParameterStore({"p": p}), 1e-3)
    T.active_tape().clear()


def test_fd_check_requires_float64():
    p = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(UsageError):
        T.finite_diff_check(lambda: T.tsum(p), ParameterStore({"p": p}), 1e-3)


# ---------------------------------------------------------------- per-op gradient property


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.uniform(margin, 2.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


OPS = {
    "add_broadcast": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))], lambda a, b: a + b),
    "sub": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))], lambda a, b: a - b),
    "mul_broadcast": (lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(1, 4))], lambda a, b: a * b),
    "div": (lambda r: [r.normal(size=(3, 3)), r.uniform(0.5, 2.0, size=(3, 3))], lambda a, b: a / b),
    "matmul2d": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))], T.matmul),
    "matmul_batched_weight": (lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))], T.matmul),
    "matmul_batched": (lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 3))], T.matmul),
    "softmax": (lambda r: [r.normal(size=(3, 5))], T.softmax_rows),
    "exp": (lambda r: [r.normal(size=(4,))], T.exp),
    "log": (lambda r: [r.uniform(0.5, 3.0, size=(4,))], T.log),
    "square": (lambda r: [r.normal(size=(4,))], T.square),
    "relu": (lambda r: [_away_from_zero(r, (5,))], T.relu),
    "abs": (lambda r: [_away_from_zero(r, (5,))], T.tabs),
    "clip": (lambda r: [r.uniform(-0.9, 0.9, size=(5,))], lambda x: T.clip(x, -1.0, 1.0)),
    "sum_axis": (lambda r: [r.normal(size=(3, 4))], lambda x: T.tsum(x, axis=1)),
    "mean_keepdims": (lambda r: [r.normal(size=(3, 4))], lambda x: T.mean(x, axis=0, keepdims=True)),
    "reshape": (lambda r: [r.normal(size=(2, 6))], lambda x: T.reshape(x, (3, 4))),
    "transpose": (lambda r: [r.normal(size=(2, 3, 4))], lambda x: T.transpose(x, (2, 0, 1))),
    "getitem": (lambda r: [r.normal(size=(4, 5))], lambda x: x[1:3, ::2]),
    "concat": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 2))], lambda a, b: T.concat([a, b], 1)),
    "broadcast_to": (lambda r: [r.normal(size=(1, 3))], lambda x: T.broadcast_to(x, (4, 3))),
    "pad_edge": (lambda r: [r.normal(size=(1, 4, 5, 2))], lambda x: T.pad_edge(x, 1)),
    "im2col": (lambda r: [r.normal(size=(2, 7, 7, 2))], lambda x: T.im2col(x, 3, 2)),
    "layer_norm": (lambda r: [r.normal(size=(3, 6)), r.normal(size=(6,)), r.normal(size=(6,))],
                   lambda x, g, b: T.layer_norm(x, g, b, 1e-5)),
}


@pytest.mark.parametrize("op", sorted(OPS))
@pytest.mark.parametrize("seed", range(20))
def test_op_gradients_match_finite_differences(op, seed):
    make, fn = OPS[op]
    rng = np.random.default_rng(seed)
    leaves = [leaf(a, f"in{i}") for i, a in enumerate(make(rng))]
    with T.no_grad():
        out_shape = fn(*leaves).shape
    proj = rng.normal(size=out_shape)
    store = ParameterStore({t.name: t for t in leaves})
    err = T.finite_diff_check(lambda: T.tsum(fn(*leaves) * proj), store, eps=1e-3)
    assert err < 1e-4, f"{op}: {err}"


def test_forward_is_deterministic():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(16, 16)).astype(np.float32)
    b = rng.normal(size=(16, 16)).astype(np.float32)
    r1 = T.softmax_rows(T.matmul(Tensor(a), Tensor(b))).data
    r2 = T.softmax_rows(T.matmul(Tensor(a), Tensor(b))).data
    assert r1.tobytes() == r2.tobytes()


def test_forward_outputs_finite():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(scale=50, size=(4, 8)).astype(np.float32))
    y = T.layer_norm(T.softmax_rows(x), Tensor(np.ones(8, np.float32)), Tensor(np.zeros(8, np.float32)))
    assert np.all(np.isfinite(y.data))


# ---------------------------------------------------------------- parameter store / streams


def test_parameter_store_order_and_uniqueness():
    store = ParameterStore({"b.w": leaf([1.0]), "a.z": leaf([2.0])})
    assert store.names() == ["a.z", "b.w"]
    with pytest.raises(UsageError):
        store.add("a.z", leaf([0.0]))


def test_frozen_parameters_are_not_trainable():
    store = ParameterStore()
    store.add("w", leaf([1.0]))
    store.add("frozen", leaf([1.0]), trainable=False)
    assert [n for n, _ in store.trainable()] == ["w"]


def test_streams_are_independent_and_reproducible():
    s = T.Streams(42)
    a1 = s.generator("init").random(3)
    s.generator("other").random(100)
    a2 = s.generator("init").random(3)
    np.testing.assert_array_equal(a1, a2)
    assert not np.array_equal(a1, s.generator("dropout").random(3))
    assert not np.array_equal(a1, T.Streams(43).generator("init").random(3))
