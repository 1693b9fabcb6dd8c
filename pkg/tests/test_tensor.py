import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from asdspoof import tensor as T
from asdspoof.errors import ContractError, DegenerateInputError, DimensionError, DomainError
from asdspoof.gradcheck import grad_check
from asdspoof.tensor import Parameter, Tensor, backward, no_grad

RNG = np.random.default_rng(1234)


def naive_conv2d(x, k, stride=1, padding=0):
    """Loop-level cross-correlation oracle."""
    B, C, H, W = x.shape
    O, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for b in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * k[o])
    return out


# --- forward values -------------------------------------------------------

def test_matmul_identity_and_hand_case():
    A = RNG.normal(size=(2, 2))
    np.testing.assert_array_equal(T.matmul(np.eye(2), A).data, A)
    out = T.matmul(np.array([[1.0, 2], [3, 4]]), np.array([[0.0], [1]]))
    np.testing.assert_array_equal(out.data, [[2], [4]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_grad_is_b_transpose():
    A = Tensor(RNG.normal(size=(3, 4)), requires_grad=True)
    B = RNG.normal(size=(4, 2))
    T.reduce(T.matmul(A, B)).backward()
    np.testing.assert_allclose(A.grad, np.ones((3, 2)) @ B.T, rtol=0, atol=1e-14)


def test_conv2d_examples():
    x = RNG.normal(size=(1, 1, 4, 5))
    np.testing.assert_array_equal(T.conv2d(x, np.ones((1, 1, 1, 1))).data, x)
    out = T.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
    np.testing.assert_array_equal(out.data, [[[[9.0]]]])


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv2d_matches_loop_oracle(stride, padding):
    x = RNG.normal(size=(2, 3, 7, 6))
    k = RNG.normal(size=(4, 3, 3, 3))
    np.testing.assert_allclose(T.conv2d(x, k, stride=stride, padding=padding).data,
                               naive_conv2d(x, k, stride, padding), atol=1e-12)


def test_conv2d_is_not_flipped():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 0, 0] = 1.0
    k = np.arange(9.0).reshape(1, 1, 3, 3)
    # top-left input pixel under a padded 3x3 window at output (1,1) meets tap (0,0)
    assert T.conv2d(x, k, padding=1).data[0, 0, 1, 1] == k[0, 0, 0, 0]


def test_conv2d_kernel_too_large():
    with pytest.raises(DimensionError):
        T.conv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)))
    T.conv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)), padding=1)


def test_conv2d_output_extent():
    out = T.conv2d(np.ones((1, 1, 9, 8)), np.ones((2, 1, 3, 3)), stride=2, padding=1)
    assert out.shape == (1, 2, (9 + 2 - 3) // 2 + 1, (8 + 2 - 3) // 2 + 1)


def test_log_softmax_examples():
    np.testing.assert_allclose(T.log_softmax(np.zeros(4)).data, np.log(0.25) * np.ones(4))
    out = T.log_softmax(np.array([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.0, -1000.0], atol=1e-12)
    x = RNG.normal(size=7)
    assert abs(np.exp(T.log_softmax(x).data).sum() - 1.0) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)),
              elements=st.floats(-1000, 1000)))
def test_log_softmax_normalised(x):
    s = np.exp(T.log_softmax(x, axis=1).data).sum(axis=1)
    np.testing.assert_allclose(s, 1.0, atol=1e-10)


def test_reduce_examples():
    assert T.reduce(np.array([2.0, 2, 2]), "mean").item() == 2.0
    np.testing.assert_array_equal(T.reduce(np.array([[1.0, 2], [3, 4]]), "sum", 0).data, [4, 6])
    with pytest.raises(DomainError):
        T.reduce(np.zeros((0, 3)), "sum", 0)


def test_max_gradient_routes_to_argmax():
    x = Tensor(np.array([0.3, 2.0, -1.0, 1.5]), requires_grad=True)
    T.reduce(x, "max").backward()
    np.testing.assert_array_equal(x.grad, [0, 1, 0, 0])
    assert grad_check(lambda t: T.reduce(t, "max", 1).sum(), RNG.normal(size=(3, 5))).passed


def test_instance_norm_examples():
    const = np.full((1, 2, 10), 3.0)
    np.testing.assert_array_equal(T.instance_norm(const).data, 0.0)
    y = T.instance_norm(RNG.uniform(-1, 1, size=(3, 4, 50)), eps=1e-5).data
    assert np.abs(y.mean(axis=2)).max() <= 1e-10
    var = y.var(axis=2)
    assert np.all((var >= 1 - 1e-6) & (var <= 1 + 1e-6))
    with pytest.raises(DegenerateInputError):
        T.instance_norm(np.ones((1, 1, 1)))


def test_cosine_examples():
    assert T.cosine_similarity([1.0, 0.0], [0.0, 1.0]).item() == 0.0
    assert abs(T.cosine_similarity([1.0, 2.0], [2.0, 4.0]).item() - 1.0) < 1e-8
    assert abs(T.cosine_similarity([1.0, 0.0], [1.0, 1.0]).item() - 0.7071) < 1e-4
    assert T.cosine_similarity([0.0, 0.0], [1.0, 1.0]).item() == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_cosine_scale_invariant(seed, alpha, beta):
    r = np.random.default_rng(seed)
    a, b = r.uniform(-1, 1, 6), r.uniform(-1, 1, 6)
    c0 = T.cosine_similarity(a, b).item()
    c1 = T.cosine_similarity(alpha * a, beta * b).item()
    assert abs(c0 - c1) <= 1e-10
    assert -1.0 <= c0 <= 1.0


# --- backward mechanics ---------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(RNG.normal(size=(3, 2)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_backward_accumulates_and_resets():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * x).sum().backward()
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])
    x.zero_grad()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_disconnected_parameter_keeps_zero_grad():
    used = Parameter(np.ones(3))
    unused = Parameter(np.ones(3))
    (used * 2.0).sum().backward()
    np.testing.assert_array_equal(unused.grad, np.zeros(3))


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)
    with pytest.raises(ContractError):
        backward(Tensor(np.array(1.0)))


def test_backward_inputs_restricts_targets():
    p = Parameter(np.ones(2))
    d = Tensor(np.ones(2), requires_grad=True)
    backward((p * d).sum(), inputs=[d])
    np.testing.assert_array_equal(p.grad, 0.0)
    np.testing.assert_array_equal(d.grad, 1.0)


def test_no_grad_builds_no_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_shared_node_visited_once():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = x * x
    z = y + y + y
    z.backward()
    assert x.grad == pytest.approx(18.0)


def test_backward_bit_identical_runs():
    x0 = RNG.normal(size=(2, 3, 6, 6))
    k0 = RNG.normal(size=(4, 3, 3, 3))

    def run():
        x = Tensor(x0, requires_grad=True)
        k = Tensor(k0, requires_grad=True)
        T.reduce(T.tanh(T.conv2d(x, k, padding=1)), "mean").backward()
        return x.grad, k.grad

    a, b = run(), run()
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_deep_chain_does_not_recurse():
    x = Tensor(np.array(1.0), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    y.backward()
    assert x.grad == 1.0


# --- gradient checks ------------------------------------------------------

def _u(*shape):
    return RNG.uniform(-1, 1, size=shape)


W6 = _u(6)
W34 = _u(3, 4)
W33 = _u(3, 3)

GRAD_CASES = {
    "add_broadcast": (lambda t: (T.add(t, _B) * W34).sum(), (3, 4)),
    "sub": (lambda t: (T.sub(_B, t) * W34).sum(), (3, 4)),
    "mul": (lambda t: (t * t * W34).sum(), (3, 4)),
    "div": (lambda t: (T.div(W34, t * t + 1.0)).sum(), (3, 4)),
    "power": (lambda t: (T.power(t * t + 0.5, 1.5) * W34).sum(), (3, 4)),
    "exp": (lambda t: (T.exp(t) * W34).sum(), (3, 4)),
    "log": (lambda t: T.log(t * t + 0.1).sum(), (3, 4)),
    "sqrt": (lambda t: T.sqrt(t * t + 0.2).sum(), (3, 4)),
    "tanh": (lambda t: (T.tanh(t) * W34).sum(), (3, 4)),
    "sigmoid": (lambda t: (T.sigmoid(t) * W34).sum(), (3, 4)),
    "relu": (lambda t: (T.relu(t) * W34).sum(), (3, 4)),
    "reshape_transpose": (lambda t: (T.transpose(T.reshape(t, (4, 3)), (1, 0)) * W34).sum(), (3, 4)),
    "getitem": (lambda t: (t[1:, ::2] * 2.0).sum() + t[0, 3], (3, 4)),
    "concat_stack": (lambda t: (T.stack([t, t * 2.0], 0).sum(0) * W34).sum()
                     + T.concatenate([t, t], 1).sum(), (3, 4)),
    "pad": (lambda t: (T.pad(t, ((1, 0), (0, 2))) ** 2).sum(), (3, 4)),
    "reduce_mean": (lambda t: (T.reduce(t, "mean", 0) * W34[0]).sum(), (3, 4)),
    "logsumexp": (lambda t: T.logsumexp(t * 3.0, axis=1).sum(), (3, 4)),
    "log_softmax": (lambda t: (T.log_softmax(t, axis=1) * W34).sum(), (3, 4)),
    "softmax": (lambda t: (T.softmax(t, axis=0) * W34).sum(), (3, 4)),
    "matmul": (lambda t: (T.matmul(t, W34.T) * W33).sum(), (3, 4)),
    "cosine": (lambda t: T.cosine_similarity(t, W6), (6,)),
    "linear": (lambda t: (T.linear(t, Tensor(W34)) ** 2).sum(), (2, 4)),
}
_B = _u(4)


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_elementwise_grad_checks(name):
    f, shape = GRAD_CASES[name]
    for i in range(3):
        rep = grad_check(f, RNG.uniform(-1, 1, size=shape))
        assert rep.passed, (name, i, rep.max_rel_error)


def test_conv2d_grad_check_both_inputs():
    x0, k0 = _u(2, 1, 5, 5), _u(3, 1, 3, 3)
    w = _u(2, 3, 3, 3)
    assert grad_check(lambda t: (T.conv2d(t, k0) * w).sum(), x0).max_rel_error < 1e-4
    assert grad_check(lambda t: (T.conv2d(x0, t) * w).sum(), k0).max_rel_error < 1e-4
    wb = _u(2, 3, 3, 3)
    assert grad_check(lambda t: (T.conv2d(x0, k0, bias=t, stride=2, padding=1) * wb).sum(),
                      _u(3)).passed


def test_instance_and_batch_norm_grad_checks():
    w = _u(2, 3, 7)
    assert grad_check(lambda t: (T.instance_norm(t) * w).sum(), _u(2, 3, 7)).passed
    g = Tensor(_u(3) + 2.0)
    b = Tensor(_u(3))
    w4 = _u(4, 3, 2, 2)
    f = lambda t: (T.batch_norm(t, g, b, np.zeros(3), np.ones(3), True) * w4).sum()
    assert grad_check(f, _u(4, 3, 2, 2)).passed


def test_grad_check_examples():
    # exact up to the rounding of the central difference itself
    assert grad_check(lambda t: t.sum(), _u(4, 3)).max_rel_error < 1e-10
    k = _u(2, 1, 3, 3)
    f = lambda t: T.reduce(T.relu(T.conv2d(t, k, padding=1)), "mean")
    assert grad_check(f, _u(1, 1, 6, 6), h=1e-5, tol=1e-4).passed


def test_grad_check_rejects_wrong_gradient():
    def bad_square(t):
        out = T._record(t.data ** 2, (t,), lambda g: (g * 3.0 * t.data,))
        return out.sum()
    assert not grad_check(bad_square, _u(5)).passed


# --- shape invariants -----------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(0, 2 ** 31))
def test_unbroadcast_grad_shape_matches(shape, seed):
    r = np.random.default_rng(seed)
    a = Tensor(r.normal(size=shape), requires_grad=True)
    b = Tensor(r.normal(size=[1] * len(shape)), requires_grad=True)
    (a * b).sum().backward()
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    assert a.data.size == int(np.prod(a.shape))
