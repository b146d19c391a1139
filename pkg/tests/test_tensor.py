import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from bridgeedit import tensor as T

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def grad_of(f, x):
    tape = T.Tape()
    leaf = tape.leaf(np.asarray(x, dtype=np.float64))
    return T.backward(tape, f(leaf))[leaf.node]


def test_forward_examples():
    np.testing.assert_allclose(T.softmax(T.Tensor(np.zeros(3))).data, np.full(3, 1 / 3))
    assert T.sigmoid(T.Tensor(np.array([0.0]))).data[0] == 0.5
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, np.eye(2)).data, a)


def test_backward_examples():
    np.testing.assert_allclose(grad_of(lambda x: T.sum(T.mul(x, x)), [1.0, 2.0]), [2.0, 4.0])
    np.testing.assert_array_equal(grad_of(T.sum, np.random.default_rng(0).standard_normal(5)), np.ones(5))
    np.testing.assert_allclose(grad_of(lambda x: T.sum(T.sigmoid(x)), [0.0]), [0.25])


def test_backward_rejects_non_scalar_loss():
    tape = T.Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(T.ShapeError):
        T.backward(tape, T.mul(x, x))


def test_shape_mismatch_names_primitive_and_shapes():
    with pytest.raises(T.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(T.ShapeError, match="add"):
        T.add(np.ones((2, 3)), np.ones((3, 2)))


def test_broadcast_only_exact_or_unit_axes():
    assert T.add(np.ones((4, 3)), np.ones((1, 3))).shape == (4, 3)
    with pytest.raises(T.ShapeError):
        T.add(np.ones((4, 3)), np.ones((2, 3)))


def test_strict_mode_rejects_non_finite():
    x = np.array([1.0, np.nan])
    T.exp(T.Tensor(x))  # lenient by default
    with T.strict_mode():
        with pytest.raises(T.NonFiniteError):
            T.exp(T.Tensor(x))


def test_fd_check_quadratic_and_constant():
    x = np.random.default_rng(1).standard_normal(7)
    assert T.finite_diff_check(lambda a: T.sum(T.mul(a, a)), x, 1e-5) < 1e-7
    assert T.finite_diff_check(lambda a: T.sum(T.mul(T.Tensor(np.zeros(7)), a)), x) == 0.0
    with pytest.raises(ValueError):
        T.finite_diff_check(T.sum, x, eps=0.0)


PRIMITIVES = {
    "matmul": lambda a, w: T.matmul(a, w[:4, :3]),
    "add": lambda a, w: T.add(a, w[:3, :4]),
    "sub": lambda a, w: T.sub(a, w[:1, :4]),
    "mul": lambda a, w: T.mul(a, a),
    "affine": lambda a, w: T.affine(a, -1.3, 0.2),
    "exp": lambda a, w: T.exp(a),
    "sigmoid": lambda a, w: T.sigmoid(a),
    "silu": lambda a, w: T.silu(a),
    "square": lambda a, w: T.square(a),
    "linear": lambda a, w: T.linear(a, w[:4, :2], w[0, :2]),
    "softmax": lambda a, w: T.softmax(a),
    "rms_norm": lambda a, w: T.rms_norm(a),
    "sum_axis": lambda a, w: T.sum(a, axis=0),
    "mean_axis": lambda a, w: T.mean(a, axis=1, keepdims=True),
    "reshape": lambda a, w: T.reshape(a, (6, 2)),
    "transpose": lambda a, w: T.transpose(a),
    "getitem": lambda a, w: a[1:, ::2],
    "concat": lambda a, w: T.concat([a, a[:1]], axis=0),
    "embedding": lambda a, w: T.embedding(a, [0, 2, 2, 1]),
    "rope": lambda a, w: T.rope(a, np.cos(w[:3, :2]), np.sin(w[:3, :2])),
}
LOOSE = {"softmax", "rms_norm"}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_at_20_points(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(20):
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((6, 6))
        r = rng.standard_normal(PRIMITIVES[name](T.Tensor(x), w).shape)
        worst = max(worst, T.finite_diff_check(lambda a: T.sum(T.mul(PRIMITIVES[name](a, w), r)), x, 1e-5))
    assert worst < (1e-4 if name in LOOSE else 1e-6)


def test_rope_routed_gradients():
    rng = np.random.default_rng(3)
    from bridgeedit.gradcheck import routed_rotation_check

    assert max(routed_rotation_check(rng) for _ in range(5)) < 1e-6


def test_backward_is_deterministic():
    rng = np.random.default_rng(0)
    x, w = rng.standard_normal((5, 4)), rng.standard_normal((4, 4))
    f = lambda a: T.sum(T.softmax(T.matmul(T.rms_norm(a), w)))
    g1, g2 = grad_of(f, x), grad_of(f, x)
    assert g1.tobytes() == g2.tobytes()


def test_constants_skip_the_tape():
    out = T.mul(T.Tensor(np.ones(3)), 2.0)
    assert out.tape is None


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6), elements=finite))
def test_softmax_is_a_distribution(x):
    y = T.softmax(T.Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12, rtol=0)


@given(hnp.arrays(np.float64, (3, 5), elements=finite), st.integers(0, 4))
def test_masked_softmax_zeroes_blocked_entries(x, j):
    mask = np.zeros((3, 5))
    mask[:, j] = -np.inf
    y = T.softmax(T.Tensor(x), mask).data
    assert np.all(y[:, j] == 0.0)
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-12)


@given(hnp.arrays(np.float64, (4, 6), elements=finite), st.floats(-3, 3))
def test_rope_preserves_norms(x, angle):
    cos, sin = np.full((4, 3), np.cos(angle)), np.full((4, 3), np.sin(angle))
    y = T.rope(T.Tensor(x), cos, sin).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-12, atol=1e-12)


def test_sinusoidal_shape():
    emb = T.sinusoidal(0.3, 9)
    assert emb.shape == (1, 9) and emb[0, -1] == 0.0
