import numpy as np
import pytest

from meshsplat import tensor as T
from meshsplat.gradcheck import finite_diff_check
from meshsplat.optim import Adam, AdamState, adam_step
from meshsplat.tensor import Tensor, backward


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    y = x * x
    grads = backward(y)
    assert grads[x] == pytest.approx(6.0)


def test_backward_constants_zero_grad():
    x = Tensor(np.ones(4), requires_grad=True)
    y = T.tsum(Tensor(np.arange(3.0)))
    grads = backward(y, params=[x])
    assert np.all(grads[x] == 0.0)


def test_backward_requires_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 2.0
    with pytest.raises(ValueError):
        backward(y)


def test_double_backward_raises():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    backward(y)
    with pytest.raises(RuntimeError):
        backward(y)


def test_backward_deterministic():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 5))

    def run():
        x = Tensor(a, requires_grad=True)
        y = T.tsum(T.tanh(x @ x) * T.sigmoid(x))
        return backward(y)[x]

    g1, g2 = run(), run()
    assert np.array_equal(g1, g2)


def test_matmul_chain_matches_fd():
    rng = np.random.default_rng(42)
    a = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    c = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    res = finite_diff_check(lambda: T.tsum(a @ b @ c), [a, b, c], step=1e-6)
    assert res.max_rel_error < 1e-6


def test_finite_diff_sin_sum_two_step_sizes():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=6), requires_grad=True)
    for step in (1e-5, 1e-6):
        res = finite_diff_check(lambda: T.tsum(T.sin(x)), [x], step=step)
        assert res.max_rel_error < 1e-6


def test_finite_diff_constant_zero():
    x = Tensor(np.ones(3), requires_grad=True)
    res = finite_diff_check(lambda: T.tsum(x * 0.0), [x])
    assert res.max_rel_error == 0.0


def test_finite_diff_flags_clamp_boundary():
    # x sits exactly on the kink of maximum(x, 0); the one-sided probe must
    # flag it unreliable rather than report a failure.
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    res = finite_diff_check(lambda: T.tsum(T.maximum(x, 0.0)), [x], step=1e-6)
    # only the interior coordinate contributes to the error
    assert res.max_rel_error < 1e-8
    assert (0, 0) in res.unreliable


# -- per-op gradient property suite -------------------------------------------

_RNG = np.random.default_rng(123)


def _rand(*shape, lo=-1.0, hi=1.0):
    return _RNG.uniform(lo, hi, size=shape)


OP_CASES = {
    "add": (lambda a, b: a + b, [_rand(3, 4), _rand(3, 4)]),
    "add_broadcast": (lambda a, b: a + b, [_rand(3, 4), _rand(4)]),
    "sub": (lambda a, b: a - b, [_rand(3, 4), _rand(3, 4)]),
    "mul": (lambda a, b: a * b, [_rand(3, 4), _rand(3, 4)]),
    "div": (lambda a, b: a / b, [_rand(3, 4), _rand(3, 4, lo=0.5, hi=2.0)]),
    "exp": (lambda a: T.exp(a), [_rand(4, 3)]),
    "log": (lambda a: T.log(a), [_rand(4, 3, lo=0.2, hi=3.0)]),
    "sqrt": (lambda a: T.sqrt(a), [_rand(4, 3, lo=0.2, hi=3.0)]),
    "tanh": (lambda a: T.tanh(a), [_rand(4, 3)]),
    "sigmoid": (lambda a: T.sigmoid(a), [_rand(4, 3)]),
    "softplus": (lambda a: T.softplus(a), [_rand(4, 3)]),
    "sin": (lambda a: T.sin(a), [_rand(4, 3)]),
    "cos": (lambda a: T.cos(a), [_rand(4, 3)]),
    "abs": (lambda a: T.absolute(a), [_rand(4, 3, lo=0.1, hi=1.0)]),
    "elu": (lambda a: T.elu(a), [_rand(4, 3, lo=-2.0, hi=2.0)]),
    "pow": (lambda a: a ** 3, [_rand(4, 3, lo=0.3, hi=1.5)]),
    "matmul": (lambda a, b: a @ b, [_rand(3, 4), _rand(4, 2)]),
    "matmul_batched": (lambda a, b: a @ b, [_rand(5, 2, 3), _rand(5, 3, 2)]),
    "matmul_vec": (lambda a, b: a @ b, [_rand(4), _rand(4, 3)]),
    "sum_all": (lambda a: T.tsum(a), [_rand(3, 4)]),
    "sum_axis": (lambda a: T.tsum(T.tsum(a, axis=1) ** 2), [_rand(3, 4)]),
    "mean": (lambda a: T.tmean(a ** 2), [_rand(3, 4)]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), [_rand(3, 2), _rand(3, 3)]),
    "slice": (lambda a: a[1:3, ::2], [_rand(4, 5)]),
    "gather": (lambda a: T.take_rows(a, np.array([0, 2, 2, 1])), [_rand(3, 2)]),
    "stack": (lambda a, b: T.stack([a, b], axis=1), [_rand(3,), _rand(3,)]),
    "reshape": (lambda a: a.reshape(2, 6), [_rand(3, 4)]),
    "transpose": (lambda a: a.T ** 2, [_rand(3, 4)]),
    "softmax": (lambda a: T.softmax(a, axis=1) ** 2, [_rand(3, 4)]),
    "maximum": (lambda a, b: T.maximum(a, b), [_rand(3, 4), _rand(3, 4) + 2.0]),
    "minimum": (lambda a, b: T.minimum(a, b), [_rand(3, 4), _rand(3, 4) + 2.0]),
    "where": (lambda a, b: T.where(np.eye(3, 4, dtype=bool), a, b), [_rand(3, 4), _rand(3, 4)]),
    "conv2d": (lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1),
               [_rand(2, 3, 5, 5), _rand(4, 3, 3, 3), _rand(4)]),
    "conv2d_stride2": (lambda x, w: T.conv2d(x, w, stride=2, padding=1),
                       [_rand(1, 2, 6, 6), _rand(3, 2, 3, 3)]),
    "resample_nearest": (lambda x: T.resample2d(x, 6, 6, mode="nearest"),
                         [_rand(2, 4, 4)]),
    "resample_bilinear_up": (lambda x: T.resample2d(x, 7, 9, mode="bilinear"),
                             [_rand(2, 4, 5)]),
    "resample_bilinear_down": (lambda x: T.resample2d(x, 3, 2, mode="bilinear"),
                               [_rand(2, 6, 5)]),
    "sparse": (None, None),  # handled separately below
}
del OP_CASES["sparse"]


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_fd(name):
    fn, arrays = OP_CASES[name]
    params = [Tensor(a, requires_grad=True) for a in arrays]
    res = finite_diff_check(lambda: T.tsum(fn(*params) * 1.7), params, step=1e-6)
    assert res.max_rel_error < 1e-5, f"{name}: {res}"


def test_sparse_matmul_gradient():
    import scipy.sparse as sp
    m = sp.random(6, 4, density=0.5, random_state=3, format="csr")
    x = Tensor(_rand(4, 3), requires_grad=True)
    res = finite_diff_check(lambda: T.tsum(T.sparse_matmul(m, x) ** 2), [x], step=1e-6)
    assert res.max_rel_error < 1e-6


def test_unreachable_param_gets_zero():
    x = Tensor(np.ones(3), requires_grad=True)
    z = Tensor(np.ones(2), requires_grad=True)
    y = T.tsum(x * x)
    grads = backward(y, params=[x, z])
    assert np.allclose(grads[x], 2.0)
    assert np.all(grads[z] == 0.0)


def test_no_grad_blocks_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_float32_mode():
    T.set_default_dtype(np.float32)
    try:
        x = Tensor(np.ones(3))
        assert x.data.dtype == np.float32
        y = T.exp(x)
        assert y.data.dtype == np.float32
    finally:
        T.set_default_dtype(np.float64)


# -- Adam ---------------------------------------------------------------------


def test_adam_zero_grads_no_move():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    st = AdamState(lr=0.1)
    adam_step(st, [p], [np.zeros(2)])
    assert np.array_equal(p.data, [1.0, 2.0])
    assert st.step_count == 1


def test_adam_zero_lr_no_move():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    adam_step(AdamState(lr=0.0), [p], [np.ones(2)])
    assert np.array_equal(p.data, [1.0, 2.0])


def test_adam_single_step_hand_value():
    # p=1, g=1, lr=0.1: m_hat = 1, v_hat = 1 -> p' = 1 - 0.1/(1 + eps)
    p = Tensor(np.array([1.0]), requires_grad=True)
    st = AdamState(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    adam_step(st, [p], [np.array([1.0])])
    assert p.data[0] == pytest.approx(0.9, abs=1e-8)


def test_adam_shape_mismatch():
    p = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        adam_step(AdamState(), [p], [np.ones(4)])


def test_adam_wrapper_uses_stored_grads():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    loss = T.tsum(p * p)
    backward(loss)
    opt.step()
    assert p.data[0] < 1.0
    opt.zero_grad()
    assert p.grad is None


def test_backward_result_map_is_per_tape():
    # .grad accumulates across calls, but each backward's returned map
    # carries only that tape's gradient
    x = Tensor(2.0, requires_grad=True)
    g1 = backward(x * x)[x]
    g2 = backward(x * x)[x]
    assert g1 == pytest.approx(4.0)
    assert g2 == pytest.approx(4.0)
    assert x.grad == pytest.approx(8.0)
