import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from glspherical.errors import FactorizationFailure, SingularInput
from glspherical.haar import haar_batch, sample_haar
from glspherical.linalg import (Field, batched_qr, block_det_pair, check_unitary, det_identity_check,
                                log_minor_independence_check, minor_coefficients,
                                principal_minor_logs, raw_minor_coefficients, relabel_distinct_first,
                                singular_log_spectrum, stacked_det_check, subsets)

finite = st.floats(-3.0, 3.0, allow_nan=False, allow_infinity=False)


def random_pd(rng, n, complex_=False):
    z = rng.standard_normal((n, n))
    if complex_:
        z = z + 1j * rng.standard_normal((n, n))
    p = z @ z.conj().T + 0.1 * np.eye(n)
    return 0.5 * (p + p.conj().T)


def test_field_parse():
    assert Field.parse("real") is Field.REAL
    assert Field.parse("Complex") is Field.COMPLEX
    assert Field.REAL.d == 1 and Field.COMPLEX.d == 2
    with pytest.raises(ValueError):
        Field.parse("quaternion")


@pytest.mark.parametrize("n", [1, 2, 3, 5])
@pytest.mark.parametrize("cplx", [False, True])
def test_minor_logs_match_direct_determinants(n, cplx):
    rng = np.random.default_rng(n)
    p = random_pd(rng, n, cplx)
    logs = principal_minor_logs(p)
    direct = [np.log(np.real(np.linalg.det(p[:r, :r]))) for r in range(1, n + 1)]
    np.testing.assert_allclose(logs, direct, atol=1e-10)
    assert abs(logs[-1] - np.linalg.slogdet(p)[1]) <= 1e-10


def test_minor_logs_rejects_bad_input():
    with pytest.raises(FactorizationFailure):
        principal_minor_logs(np.diag([1.0, -1.0]))
    with pytest.raises(ValueError):
        principal_minor_logs(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        principal_minor_logs(np.ones((2, 3)))


def test_singular_log_spectrum_examples():
    np.testing.assert_allclose(singular_log_spectrum(np.eye(3)), 0.0)
    np.testing.assert_allclose(singular_log_spectrum(np.diag([np.e ** -1, np.e ** 2])), [2.0, -1.0])
    np.testing.assert_allclose(singular_log_spectrum(np.array([[0.0, 3.0], [1.0, 0.0]])),
                               [np.log(3.0), 0.0], atol=1e-15)
    with pytest.raises(SingularInput):
        singular_log_spectrum(np.diag([1.0, 0.0]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 3), elements=finite))
def test_singular_log_spectrum_properties(g):
    if abs(np.linalg.det(g)) < 1e-6:
        return
    ls = singular_log_spectrum(g)
    assert np.all(np.diff(ls) <= 0)
    assert abs(ls.sum() - np.log(abs(np.linalg.det(g)))) <= 1e-9


def test_minor_coefficients_identity():
    c = minor_coefficients(np.eye(3), 2)
    assert c[(0, 1)] == 1.0
    assert all(v == 0.0 for k, v in c.items() if k != (0, 1))


@pytest.mark.parametrize("field", ["real", "complex"])
@pytest.mark.parametrize("n", [2, 3, 4])
def test_minor_coefficients_sum_and_reconstruct(field, n):
    rng = np.random.default_rng(7)
    u = sample_haar(field, n, 11 + n)
    a = rng.uniform(0.1, 10.0, n)
    for r in range(1, n + 1):
        c = minor_coefficients(u, r)
        assert min(c.values()) >= 0.0
        assert abs(sum(c.values()) - 1.0) <= 1e-12
        recon = sum(v * np.prod(a[list(k)]) for k, v in c.items())
        m = u.conj().T @ np.diag(a) @ u
        direct = np.real(np.linalg.det(m[:r, :r]))
        assert abs(recon / direct - 1.0) <= 1e-10


def test_minor_coefficients_rejects_non_unitary():
    with pytest.raises(ValueError):
        minor_coefficients(2.0 * np.eye(2), 1)
    with pytest.raises(ValueError):
        check_unitary(np.array([[1.0, 1e-6], [0.0, 1.0]]))


def test_raw_coefficients_batched():
    us = haar_batch("complex", 3, 50, np.random.default_rng(2))
    c = raw_minor_coefficients(us, 2)
    assert c.shape == (50, len(subsets(3, 2)))
    np.testing.assert_allclose(c.sum(axis=1), 1.0, atol=1e-12)


def test_block_det_pair():
    assert block_det_pair(np.eye(4), 2) == (1.0, 1.0)
    t = 0.7
    u = np.eye(3)
    u[:2, :2] = [[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]]
    d1, d2 = block_det_pair(u, 1)
    assert abs(d1 - np.cos(t)) <= 1e-15 and abs(d2 - np.cos(t)) <= 1e-15
    for field in ("real", "complex"):
        for n in (2, 3, 4, 5):
            u = sample_haar(field, n, n)
            for r in range(1, n):
                d1, d2 = block_det_pair(u, r)
                assert abs(d1 - d2) <= 1e-11
    with pytest.raises(ValueError):
        block_det_pair(np.eye(3), 3)


def test_det_identity_examples():
    lhs, rhs = det_identity_check([1.0, 2.0, 3.0])
    assert rhs == 12.0 and abs(lhs - 12.0) <= 1e-12
    assert det_identity_check([2.0, 2.0, 2.0])[1] == 0.0
    assert abs(det_identity_check([2.0, 2.0, 2.0])[0]) <= 1e-12
    lhs, rhs = det_identity_check([1.0, -3.0, 2.0])
    assert rhs == 0.0 and abs(lhs) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(finite, min_size=1, max_size=6))
def test_det_identity_property(x):
    x = np.array(x)
    lhs, rhs = det_identity_check(x)
    # backward-error scale of a determinant whose entries are bounded by sum |x|
    scale = np.abs(x).sum() ** len(x)
    assert abs(lhs - rhs) <= 1e-10 * scale


def test_stacked_det_examples():
    e = np.eye(3)
    lhs, rhs = stacked_det_check([e[0], e[1], e[2]])
    assert abs(lhs - 1.0) <= 1e-15 and abs(rhs - 1.0) <= 1e-15
    lhs, rhs = stacked_det_check([np.array([0.4 - 0.3j])])
    assert abs(lhs - 0.5) <= 1e-15 and abs(rhs - 0.5) <= 1e-15
    with pytest.raises(ValueError):
        stacked_det_check([np.array([1.0, 1.0]), np.array([0.0, 0.5])])


@pytest.mark.parametrize("r", [2, 3, 4])
def test_stacked_det_random(r):
    rng = np.random.default_rng(r)
    for _ in range(50):
        y = rng.standard_normal((r, r)) + 1j * rng.standard_normal((r, r))
        y *= rng.uniform(0, 1, (r, 1)) / np.linalg.norm(y, axis=1, keepdims=True)
        lhs, rhs = stacked_det_check(list(y))
        assert abs(lhs - rhs) <= 1e-10


def test_relabel_and_independence():
    np.testing.assert_array_equal(relabel_distinct_first([1.0, 1.0, 2.0]), [2.0, 1.0, 1.0])
    np.testing.assert_array_equal(relabel_distinct_first([1.0, 1.0]), [1.0, 1.0])
    assert log_minor_independence_check([1.0, 1.0, 1.0]) == pytest.approx(0.0, abs=1e-12)
    a = [np.log(2.0), 0.0, -np.log(3.0)]
    d = log_minor_independence_check(a)
    assert abs(d) > 0.1
    assert d == pytest.approx(det_identity_check(relabel_distinct_first(a))[1], rel=1e-10)


@pytest.mark.parametrize("cplx", [False, True])
@pytest.mark.parametrize("n", [2, 3])
def test_batched_qr(cplx, n):
    rng = np.random.default_rng(n)
    a = rng.standard_normal((300, n, n))
    if cplx:
        a = a + 1j * rng.standard_normal((300, n, n))
    a[0] = 0.0
    a[1, :, 0] = 0.0
    a[2] *= np.geomspace(1.0, 1e-12, n)
    q, r = batched_qr(a)
    np.testing.assert_allclose(q @ r, a, atol=1e-14)
    eye = np.eye(n)
    assert np.abs(np.swapaxes(q.conj(), 1, 2) @ q - eye).max() <= 1e-14
    assert np.all(np.tril(r, -1) == 0)
    # R is unique up to phases on its rows
    ref = np.linalg.qr(a[3:])[1]
    np.testing.assert_allclose(np.abs(np.diagonal(r[3:], axis1=1, axis2=2)),
                               np.abs(np.diagonal(ref, axis1=1, axis2=2)), rtol=1e-12)
