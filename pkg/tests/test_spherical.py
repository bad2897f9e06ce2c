import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from glspherical.errors import NonFiniteValue
from glspherical.haar import haar_sample_set
from glspherical.linalg import batched_minor_logs, gram
from glspherical.measures import load_measure, measure_moments, point_measure
from glspherical.spherical import (chamber_profiles, derivative_stencil, haar_profiles,
                                   log_minor_profile, moment_fn, moment_summary, profiles_for, rho,
                                   spectral_profiles, spherical_fn, spherical_transform,
                                   transform_derivative, transform_stencil)


def quad_complex(fn, lo, hi):
    re = integrate.quad(lambda t: fn(t).real, lo, hi, epsabs=1e-12, epsrel=1e-12, limit=200)[0]
    im = integrate.quad(lambda t: fn(t).imag, lo, hi, epsabs=1e-12, epsrel=1e-12, limit=200)[0]
    return re + 1j * im


def phi_oracle(field, a1, a2, lam):
    """Spherical function for n = 2 by one-dimensional quadrature.

    Over R the first column of k is (cos t, sin t) with t uniform; over C,
    |k_11|^2 is uniform on [0, 1].
    """
    ld = np.log(a1 * a2)

    def integrand(f1):
        return np.exp(1j * (lam[0] * f1 + lam[1] * (ld - f1)))

    if field == "real":
        return quad_complex(lambda t: integrand(np.log(a1 * np.cos(t) ** 2 + a2 * np.sin(t) ** 2)),
                            0.0, np.pi) / np.pi
    return quad_complex(lambda t: integrand(np.log(a1 * t + a2 * (1 - t))), 0.0, 1.0)


def test_rho():
    np.testing.assert_array_equal(rho("real", 3), [1.0, 0.0, -1.0])
    np.testing.assert_array_equal(rho("complex", 2), [1.0, -1.0])
    with pytest.raises(ValueError):
        rho("real", 0)


@pytest.mark.parametrize("field", ["real", "complex"])
def test_phi_at_zero_is_exactly_one(field):
    g = np.diag([3.0, 1.0, 0.5]).astype(complex if field == "complex" else float)
    est = spherical_fn(g, np.zeros(3), 2000, 1, field=field)
    assert est.mean == 1.0 and est.std_error == 0.0


def test_identity_and_scalar_elements():
    lam = np.array([[0.3, -1.2], [5.0, 2.0]])
    est = spherical_fn(np.eye(2), lam, 1000, 0)
    np.testing.assert_array_equal(est.mean, [1.0, 1.0])
    np.testing.assert_array_equal(est.std_error, [0.0, 0.0])
    c = 1.7
    est = spherical_fn(c * np.eye(2), lam, 1000, 0)
    np.testing.assert_allclose(est.mean, np.exp(2j * np.log(c) * lam.sum(axis=1)), atol=1e-15)
    np.testing.assert_array_equal(est.std_error, [0.0, 0.0])


@pytest.mark.parametrize("field", ["real", "complex"])
@pytest.mark.parametrize("a", [(16.0, 1.0), (2.0, 0.3)])
def test_phi_matches_quadrature(field, a):
    g = np.diag(np.sqrt(a)).astype(complex if field == "complex" else float)
    lams = np.array([[0.5, -0.5], [2.0, 0.0], [-1.0, 3.0], [0.01, 0.02]])
    est = spherical_fn(g, lams, 50_000, 3, field=field)
    for lam, m, se in zip(lams, est.mean, est.std_error):
        assert abs(m - phi_oracle(field, *a, lam)) <= 4 * se


@pytest.mark.parametrize("a1,a2", [(16.0, 1.0), (5.0, 0.2), (1.0, 1.0 + 1e-9)])
def test_first_moment_closed_forms(a1, a2):
    g = np.diag(np.sqrt([a1, a2]))
    real = moment_fn(g, [1, 0], 50_000, 1)
    assert abs(real.mean - 2 * np.log((np.sqrt(a1) + np.sqrt(a2)) / 2)) <= 4 * real.std_error + 1e-12
    cplx = moment_fn(g.astype(complex), [1, 0], 50_000, 1, field="complex")
    exact = integrate.quad(lambda t: np.log(a1 * t + a2 * (1 - t)), 0, 1, epsabs=1e-13)[0]
    assert abs(cplx.mean - exact) <= 4 * cplx.std_error + 1e-12


@pytest.mark.parametrize("field", ["real", "complex"])
@pytest.mark.parametrize("n", [2, 3, 4])
def test_telescoping_and_kernel(field, n):
    rng = np.random.default_rng(n)
    g = rng.standard_normal((n, n))
    if field == "complex":
        g = g + 1j * rng.standard_normal((n, n))
    s = moment_summary(g, 20_000, 2, field=field)
    logdet = np.linalg.slogdet(gram(g))[1]
    assert abs(s.m1.sum() - logdet) <= 1e-10
    assert s.m1_sum.std_error == 0.0
    assert np.abs(s.sigma2 @ np.ones(n)).max() <= 1e-9
    evals = np.linalg.eigvalsh(s.sigma2)
    assert evals[0] >= -1e-8 * evals[-1]
    assert evals[1] > 1e-6 * evals[-1]


def test_profiles_agree_with_cholesky_route():
    rng = np.random.default_rng(0)
    for field in ("real", "complex"):
        for n in (2, 3, 4):
            ks = haar_sample_set(field, n, 500, n)
            a = gram(rng.standard_normal((n, n)))
            m = ks.conj().swapaxes(-1, -2) @ a @ ks
            cum = batched_minor_logs(m)
            ref = cum.copy()
            ref[:, 1:] -= cum[:, :-1]
            np.testing.assert_allclose(profiles_for(a, ks), ref, atol=1e-10)


def test_extreme_chamber_points_stay_finite():
    # a1 / a2 = e^1500 cannot be formed; the large-spread limit of m_1 is x_1 - 2 ln 2
    s = chamber_profiles([1500.0, 0.0], 40_000, 5).summary()
    assert np.all(np.isfinite(s.m1))
    assert abs(s.m1[0] - (1500.0 - 2 * np.log(2))) <= 4 * s.m1_se[0]
    assert s.m1.sum() == 1500.0


def test_chamber_profiles_match_group_element():
    x = np.array([1.2, 0.4, -2.0])
    a = chamber_profiles(x, 3000, 7, field="complex").profiles
    b = haar_profiles(np.diag(np.exp(x / 2)).astype(complex), 3000, 7).profiles
    np.testing.assert_allclose(a, b, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-4, 4), min_size=2, max_size=4), st.integers(0, 2**32 - 1))
def test_log_minor_profile_sums_to_logdet(x, seed):
    g = np.diag(np.exp(np.array(x) / 2))
    rng = np.random.default_rng(seed)
    k = np.linalg.qr(rng.standard_normal((len(x), len(x))))[0]
    f = log_minor_profile(g, k)
    assert abs(f.sum() - sum(x)) <= 1e-10
    direct = np.log(np.linalg.det((k.T @ np.diag(np.exp(x)) @ k)[:1, :1]))
    assert abs(f[0] - direct) <= 1e-9


def test_profiles_reject_bad_input():
    ks = haar_sample_set("real", 2, 10, 0)
    with pytest.raises(ValueError):
        profiles_for(np.diag([1.0, -1.0]), ks)
    with pytest.raises(NonFiniteValue):
        spectral_profiles(np.array([np.inf, 0.0]), ks)
    with pytest.raises(NonFiniteValue):
        profiles_for(np.diag([np.inf, 1.0]), ks)


def test_moment_validation_and_absolute():
    g = np.diag([3.0, 0.5])
    with pytest.raises(ValueError):
        moment_fn(g, [1, -1], 100, 0)
    plain = moment_fn(g, [1, 1], 5000, 0)
    absolute = moment_fn(g, [1, 1], 5000, 0, absolute=True)
    assert absolute.mean >= abs(plain.mean)


def test_transform_of_point_measure_is_spherical_function():
    x = [1.5, -0.5]
    nu = point_measure(x)
    lams = np.array([[0.7, 0.1], [-2.0, 1.0]])
    t = spherical_transform(nu, lams, 10, 4000, 3)
    phi = spherical_fn(np.diag(np.exp(np.array(x) / 2)), -lams, 4000, 3)
    np.testing.assert_allclose(t.mean, phi.mean, atol=1e-13)
    np.testing.assert_allclose(t.std_error, phi.std_error, rtol=1e-10)
    zero = spherical_transform(nu, [0.0, 0.0], 10, 1000, 0)
    assert zero.mean == 1.0 and zero.std_error == 0.0


GENERIC = {"field": "real", "components": [
    {"weight": 0.6, "law": {"point": [1.0, -0.5]}},
    {"weight": 0.4, "law": {"sorted_iid": {"marginal": {"normal": {"mu": 0.0, "sigma": 1.0}}, "n": 2}}}]}


def test_finite_differences_with_common_seeds_reproduce_moments():
    nu = load_measure(GENERIC)
    mm = measure_moments(nu, 60, 4000, 11)
    for i in range(2):
        l = np.eye(2, dtype=int)[i]
        d = transform_derivative(nu, l, 1e-3, 60, 4000, 11)
        assert abs(d.mean - (-1j * mm.m1[i])) <= 1e-5 * (1 + abs(mm.m1[i]))
    for l in ([2, 0], [1, 1], [0, 2]):
        i, j = np.repeat([0, 1], l)
        d = transform_derivative(nu, l, 1e-3, 60, 4000, 11)
        assert abs(d.mean + mm.m2[i, j]) <= 1e-4 * (1 + abs(mm.m2[i, j]))


def test_derivative_bounded_by_absolute_moment():
    x = np.array([2.0, -1.0])
    nu = point_measure(x)
    g = np.diag(np.exp(x / 2))
    for l in ([1, 0], [0, 1], [1, 1], [2, 0]):
        d = transform_derivative(nu, l, 1e-3, 1, 20_000, 2)
        bound = moment_fn(g, l, 20_000, 2, absolute=True)
        assert abs(d.mean) <= bound.mean + 5 * (d.std_error + bound.std_error)


def test_stencil_validation():
    with pytest.raises(ValueError):
        derivative_stencil(2, [3, 0], 1e-3)
    with pytest.raises(ValueError):
        derivative_stencil(2, [1], 1e-3)
    assert derivative_stencil(2, [0, 0], 1e-3) == [(1.0, pytest.approx(np.zeros(2)))]
    st = transform_stencil(point_measure([0.0, 0.0]), derivative_stencil(2, [1, 0], 1e-3), 1, 100, 0)
    assert st.mean == 0.0
