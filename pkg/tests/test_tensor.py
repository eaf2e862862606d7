import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from molex import tensor as T
from molex.errors import GradientError, NumericError, ShapeError
from molex.linalg import low_rank_singular_values, svd
from molex.tensor import Tensor

from conftest import check_grads


def jacobi_eigvalsh(sym, sweeps=60):
    """Classical two-sided Jacobi eigenvalue iteration; independent of the SVD code path."""
    a = np.array(sym, dtype=float)
    n = a.shape[0]
    for _ in range(sweeps):
        off = np.sqrt(np.sum(a ** 2) - np.sum(np.diag(a) ** 2))
        if off < 1e-14 * np.linalg.norm(a):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta ** 2 + 1)) if theta != 0 else 1.0
                c = 1 / np.sqrt(t * t + 1)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
    return np.sort(np.diag(a))[::-1]


# ---------------------------------------------------------------- matmul

def test_matmul_identity(rng):
    m = rng.normal(size=(3, 3))
    np.testing.assert_array_equal((Tensor(np.eye(3)) @ Tensor(m)).data, m)


def test_matmul_permutation():
    out = Tensor([[1, 2], [3, 4]]) @ Tensor([[0, 1], [1, 0]])
    np.testing.assert_array_equal(out.data, [[2, 1], [4, 3]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_matmul_gradient_finite_difference(rng):
    a = T.parameter(rng.normal(size=(5, 4)))
    b = T.parameter(rng.normal(size=(4, 3)))
    check_grads(lambda: T.tsum(a @ b), [a, b], rtol=1e-6)


def test_batched_matmul_shared_weight_gradient(rng):
    x = T.parameter(rng.normal(size=(2, 3, 4)))
    w = T.parameter(rng.normal(size=(4, 5)))
    check_grads(lambda: T.tsum(T.tanh(x @ w)), [x, w])


# ---------------------------------------------------------------- softmax

def test_softmax_symmetric():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_is_stable_for_large_logits():
    out = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0)
    assert out[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_matches_direct_formula():
    x = np.array([1.0, 2.0, 3.0])
    oracle = np.exp(x) / np.exp(x).sum()
    np.testing.assert_allclose(T.softmax(Tensor(x)).data, oracle, atol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        T.softmax(Tensor([np.nan, 1.0]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)), st.randoms())
def test_softmax_sums_to_one_and_is_permutation_equivariant(x, rnd):
    out = T.softmax(Tensor(x)).data
    assert abs(out.sum() - 1.0) <= 1e-12
    perm = list(range(x.size))
    rnd.shuffle(perm)
    np.testing.assert_allclose(T.softmax(Tensor(x[perm])).data, out[perm], rtol=0, atol=1e-15)


def test_softmax_and_log_softmax_gradients(rng):
    x = T.parameter(rng.normal(size=(3, 5)))
    w = rng.normal(size=(3, 5))
    check_grads(lambda: T.tsum(T.softmax(x, axis=-1) * w), [x])
    check_grads(lambda: T.tsum(T.log_softmax(x, axis=0) * w), [x])


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones(rng):
    w = T.parameter(rng.normal(size=(2, 3, 4)))
    T.tsum(w).backward()
    np.testing.assert_array_equal(w.grad, np.ones((2, 3, 4)))


def test_backward_square_gives_2w(rng):
    w = T.parameter(rng.normal(size=(4, 3)))
    T.tsum(w * w).backward()
    np.testing.assert_allclose(w.grad, 2 * w.data, rtol=0, atol=0)


def test_backward_rejects_non_scalar(rng):
    w = T.parameter(rng.normal(size=(3,)))
    with pytest.raises(GradientError):
        (w * 2.0).backward()


def test_untracked_leaf_gets_no_grad(rng):
    w = T.parameter(rng.normal(size=(3,)))
    c = Tensor(rng.normal(size=(3,)))
    T.tsum(w * c).backward()
    assert c.grad is None


def test_gradient_accumulates_over_reuse(rng):
    w = T.parameter(rng.normal(size=(3,)))
    y = w * 3.0
    T.tsum(y + y * w).backward()
    np.testing.assert_allclose(w.grad, 3.0 + 6.0 * w.data)


def test_backward_is_bit_deterministic(rng):
    w = T.parameter(rng.normal(size=(6, 6)))
    x = Tensor(rng.normal(size=(4, 6)))

    def run():
        w.grad = None
        h = T.gelu(x @ w)
        T.tsum(T.softmax(h @ w, axis=-1) * h).backward()
        return w.grad.copy()

    assert np.array_equal(run(), run())


@pytest.mark.parametrize("fn", [
    lambda x: T.tanh(x), lambda x: T.sigmoid(x), lambda x: T.gelu(x), lambda x: T.softplus(x),
    lambda x: T.exp(x * 0.3), lambda x: T.log(x * x + 1.0), lambda x: x ** 3, lambda x: x / (x * x + 2.0),
    lambda x: T.transpose(x) @ x, lambda x: T.reshape(x, (2, 6)) * 2.0, lambda x: x[1:, ::2],
    lambda x: x[np.array([0, 0, 2])], lambda x: T.concat([x, x * 2.0], axis=1),
    lambda x: T.stack([x, T.tanh(x)], axis=0), lambda x: T.mean(x, axis=0),
    lambda x: T.frobenius_sq(x), lambda x: T.trace(x[:3, :3]),
    lambda x: T.index_add(x, np.array([1, 1, 0]), 4),
], ids=lambda f: "op")
def test_primitive_gradients(rng, fn):
    x = T.parameter(rng.normal(size=(3, 4)))
    w = rng.normal(size=np.shape(fn(Tensor(x.data)).data))
    check_grads(lambda: T.tsum(fn(x) * w), [x])


def test_layer_norm_gradient(rng):
    x = T.parameter(rng.normal(size=(2, 3, 5)))
    g = T.parameter(rng.normal(size=5))
    b = T.parameter(rng.normal(size=5))
    w = rng.normal(size=(2, 3, 5))
    check_grads(lambda: T.tsum(T.layer_norm(x, g, b) * w), [x, g, b])


def test_argtopk_breaks_ties_by_lower_index():
    np.testing.assert_array_equal(T.argtopk(np.array([0.2, 0.5, 0.5, 0.1]), 3), [1, 2, 0])


# ---------------------------------------------------------------- SVD

def test_svd_diagonal():
    np.testing.assert_allclose(svd(np.diag([3.0, 2.0, 1.0])).singular_values, [3, 2, 1], atol=1e-15)


def test_svd_zero_matrix():
    np.testing.assert_array_equal(svd(np.zeros((4, 3))).singular_values, np.zeros(3))


def test_svd_matches_jacobi_eigen_oracle(rng):
    m = rng.normal(size=(8, 5))
    oracle = np.sqrt(np.clip(jacobi_eigvalsh(m.T @ m), 0, None))
    np.testing.assert_allclose(svd(m).singular_values, oracle, rtol=1e-8)


@pytest.mark.parametrize("shape", [(8, 5), (5, 8), (6, 6), (1, 4), (30, 3)])
def test_svd_reconstructs(rng, shape):
    m = rng.normal(size=shape)
    res = svd(m)
    assert np.all(np.diff(res.singular_values) <= 0)
    assert np.all(res.singular_values >= 0)
    assert np.linalg.norm(res.reconstruct() - m) <= 1e-8 * np.linalg.norm(m)


def test_svd_invariant_under_orthogonal_transforms(rng):
    m = rng.normal(size=(7, 5))
    q1, _ = np.linalg.qr(rng.normal(size=(7, 7)))
    q2, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    np.testing.assert_allclose(svd(q1 @ m @ q2).singular_values, svd(m).singular_values, rtol=1e-8)


def test_svd_rejects_non_finite():
    with pytest.raises(NumericError):
        svd(np.array([[1.0, np.inf], [0.0, 1.0]]))


def test_svd_reports_non_convergence(rng):
    with pytest.raises(NumericError):
        svd(rng.normal(size=(6, 6)), max_sweeps=1)


def test_low_rank_singular_values_match_dense(rng):
    a, b = rng.normal(size=(32, 4)), rng.normal(size=(4, 32))
    dense = svd(a @ b).singular_values[:4]
    np.testing.assert_allclose(low_rank_singular_values(a, b), dense, rtol=1e-8)
