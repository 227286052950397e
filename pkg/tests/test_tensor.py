import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from wvgnn import tensor as T
from wvgnn.exceptions import DecompositionError, ShapeError, SingularMatrixError

from conftest import random_pd


def test_embedding_of_one_and_i():
    np.testing.assert_array_equal(T.complex_to_real_embedding(np.array([[1 + 0j]])), np.eye(2))
    np.testing.assert_array_equal(T.complex_to_real_embedding(np.array([[1j]])), [[0, -1], [1, 0]])


def test_embedding_rejects_vectors():
    with pytest.raises(ShapeError):
        T.complex_to_real_embedding(np.ones(3, complex))


def _cplx(shape):
    el = st.floats(-3, 3, allow_nan=False)
    return st.tuples(arrays(np.float64, shape, elements=el), arrays(np.float64, shape, elements=el)).map(
        lambda t: t[0] + 1j * t[1])


@settings(max_examples=50, deadline=None)
@given(_cplx((3, 3)), _cplx((3, 3)))
def test_embedding_is_a_ring_homomorphism(a, b):
    E = T.complex_to_real_embedding
    np.testing.assert_allclose(E(a @ b), E(a) @ E(b), atol=1e-10)
    np.testing.assert_allclose(E(a + b), E(a) + E(b), atol=1e-12)
    np.testing.assert_allclose(E(a.conj().T), E(a).T, atol=0)
    np.testing.assert_array_equal(T.real_to_complex(E(a)), a)


def test_logdet_of_embedding_is_twice_log_abs_det(rng):
    M = random_pd(rng, 5, complex_=True) + 0.3 * np.eye(5)
    got = T.logdet_psd(T.complex_to_real_embedding(M)).item()
    assert abs(got - 2 * np.log(abs(np.linalg.det(M)))) < 1e-10


def test_logdet_examples():
    assert T.logdet_psd(np.eye(4)).item() == 0.0
    assert abs(T.logdet_psd(np.diag([np.e, np.e ** 2])).item() - 3.0) < 1e-12


def test_logdet_reports_failing_pivot():
    with pytest.raises(DecompositionError) as exc:
        T.logdet_psd(np.diag([1.0, 2.0, -1.0]))
    assert exc.value.index == 2


def test_matinv_examples(rng):
    np.testing.assert_allclose(T.matinv(np.diag([2.0, 4.0])).data, np.diag([0.5, 0.25]))
    A = random_pd(rng, 6) + rng.standard_normal((6, 6))
    np.testing.assert_allclose(T.matinv(T.matinv(A)).data, A, atol=1e-9)
    with pytest.raises(SingularMatrixError):
        T.matinv(np.ones((3, 3)))


def test_hermitian_solve(rng):
    b = rng.standard_normal(4) + 1j * rng.standard_normal(4)
    np.testing.assert_allclose(T.hermitian_solve(np.eye(4), b), b)
    np.testing.assert_allclose(T.hermitian_solve(2 * np.eye(4), b), b / 2)
    A = random_pd(rng, 8, complex_=True)
    B = rng.standard_normal((8, 3)) + 1j * rng.standard_normal((8, 3))
    assert np.max(np.abs(A @ T.hermitian_solve(A, B) - B)) < 1e-10
    with pytest.raises(DecompositionError) as exc:
        T.hermitian_solve(np.diag([1.0, 1.0, 0.0]), np.ones(3))
    assert exc.value.index == 2


def test_gradcheck_sum_of_squares():
    x = np.array([1.0, 2.0])
    with T.Tape() as tape:
        xt = T.Tensor(x, requires_grad=True)
        loss = (xt * xt).sum()
    (g,) = tape.gradient(loss, [xt])
    np.testing.assert_allclose(g, [2.0, 4.0])
    assert T.gradcheck(lambda t: (t * t).sum(), x) < 1e-8


def test_gradcheck_detects_a_wrong_vjp():
    def bad(a):
        a = T.as_tensor(a)
        return T._record(a.data ** 2, (a,), lambda g: (g * a.data,))  # missing factor 2

    assert T.gradcheck(lambda t: bad(t).sum(), np.array([0.5, 1.5])) > 0.4


def test_untracked_ops_do_not_record():
    with T.Tape() as tape:
        T.Tensor(np.ones(3)) * 2.0
    assert len(tape) == 0


def test_backward_is_bit_identical(rng):
    A = rng.standard_normal((4, 4))

    def run():
        with T.Tape() as tape:
            x = T.Tensor(A, requires_grad=True)
            s = T.logdet_psd(T.matmul(x, x.mT) + np.eye(4)) + T.tanh(x).sum()
        return tape.gradient(s, [x])[0]

    assert np.array_equal(run(), run())


def test_segment_max_values_and_gradient():
    v = np.array([[[1.0], [3.0], [2.0], [5.0]]])
    dst = np.array([0, 0, 1, 1])
    with T.Tape() as tape:
        x = T.Tensor(v, requires_grad=True)
        out = T.segment_max(x, dst, 3)
        total = out.sum()
    np.testing.assert_array_equal(out.data[0, :, 0], [3.0, 5.0, 0.0])
    (g,) = tape.gradient(total, [x])
    np.testing.assert_array_equal(g[0, :, 0], [0, 1, 0, 1])


def test_segment_max_tie_goes_to_lowest_index():
    with T.Tape() as tape:
        x = T.Tensor(np.array([[[2.0], [2.0]]]), requires_grad=True)
        total = T.segment_max(x, np.array([0, 0]), 1).sum()
    np.testing.assert_array_equal(tape.gradient(total, [x])[0][0, :, 0], [1, 0])


def test_broadcast_gradient_is_reduced(rng):
    b = rng.standard_normal(3)
    assert T.gradcheck(lambda t: (T.Tensor(np.ones((4, 3))) * t).sum(), b) < 1e-8
