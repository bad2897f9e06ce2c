"""Spherical functions, moment functions and the spherical Fourier transform.

Everything here is a Haar average over ``K = U_n(F)`` of functions of the
log-minor profile

    f_1(k) = ln Delta_1(k* g g* k),   f_r(k) = ln Delta_r - ln Delta_{r-1},

so the spherical function is ``phi_{i rho + lambda}(g) = E_k exp(i lambda . f(k))``
and the moment function of multi-index ``l`` is ``E_k prod_r f_r(k)^{l_r}``.

All quantities belonging to one ``g`` are computed from one shared Haar sample
set (:class:`ProfileSet`), which keeps the exact identities (telescoping,
``Sigma^2 (1,...,1)^t = 0``) true to roundoff.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import NonFiniteValue
from .haar import CHUNK, MCEstimate, RunningStats, Seed, haar_chunks, haar_sample_set, stream_estimate
from .linalg import Field, gram, subsets

# path key for outer (chamber) draws; disjoint from partition indices
OUTER_STREAM = 1_000_003


def rho(field, n: int) -> np.ndarray:
    """Half sum of positive roots, ``rho_l = (d/2)(n + 1 - 2l)``."""
    if n < 1:
        raise ValueError("n must be positive")
    d = Field.parse(field).d
    ell = np.arange(1, n + 1)
    return 0.5 * d * (n + 1 - 2 * ell)


def is_scalar_matrix(a) -> bool:
    a = np.asarray(a)
    return bool(np.array_equal(a, a[0, 0] * np.eye(a.shape[0])))


def spectral_profiles(x, ks, v=None) -> np.ndarray:
    """Log-minor profiles of ``k* V diag(e^x) V* k`` for a stack of unitaries.

    Each principal minor is the positive Cauchy-Binet sum
    ``Delta_r = sum_{|I| = r} e^{x_I} |det (V* k)[I, :r]|^2``, evaluated with
    ``logsumexp`` so that no entry of ``e^x`` is ever formed: the result keeps
    full relative precision for arbitrarily ill-conditioned ``g g*``.
    ``Delta_n = e^{sum x}`` on ``K``, so the last cumulative log-minor is that
    constant. ``v=None`` means ``V = I``.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    size = ks.shape[0]
    if not np.all(np.isfinite(x)):
        raise NonFiniteValue("log spectrum of g g* has non-finite entries")
    if np.all(x == x[0]):
        return np.full((size, n), x[0])
    m = ks if v is None else v.conj().T @ ks
    cum = np.empty((size, n))
    for r in range(1, n):
        terms = []
        for idx in subsets(n, r):
            rows = list(idx)
            block = m[:, rows, :r]
            if r == 1:
                det = np.abs(block[:, 0, 0])
            elif r == 2:
                det = np.abs(block[:, 0, 0] * block[:, 1, 1] - block[:, 0, 1] * block[:, 1, 0])
            else:
                det = np.abs(np.linalg.det(block))
            with np.errstate(divide="ignore"):
                terms.append(x[rows].sum() + 2.0 * np.log(det))
        cum[:, r - 1] = logsumexp(np.stack(terms, axis=-1), axis=-1)
    cum[:, -1] = x.sum()
    out = cum.copy()
    out[:, 1:] -= cum[:, :-1]
    return out


def log_spectrum_of_gram(a):
    """``(x, V)`` with ``a = V diag(e^x) V*``; ``V`` is None for diagonal ``a``."""
    a = np.asarray(a)
    if not np.all(np.isfinite(a)):
        raise NonFiniteValue("g g* has non-finite entries")
    if is_scalar_matrix(a) or np.array_equal(a, np.diag(np.diag(a))):
        d = np.real(np.diag(a))
        v = None
    else:
        d, v = np.linalg.eigh(a)
    if not np.all(d > 0):
        raise ValueError("g g* is not positive definite")
    return np.log(d), v


def log_spectrum_of_element(g):
    """``(x, U)`` with ``g g* = U diag(e^x) U*`` from the SVD of ``g``."""
    g = np.asarray(g)
    if not np.all(np.isfinite(g)):
        raise NonFiniteValue("g has non-finite entries")
    a = gram(g)
    if np.all(np.isfinite(a)) and (is_scalar_matrix(a) or np.array_equal(a, np.diag(np.diag(a)))):
        return log_spectrum_of_gram(a)
    u, s, _ = np.linalg.svd(g)
    if not np.all(s > 0):
        raise ValueError("g is singular")
    return 2.0 * np.log(s), u


def profiles_for(a, ks) -> np.ndarray:
    """Log-minor profiles of ``k* a k`` for a stack of unitaries ``ks``."""
    x, v = log_spectrum_of_gram(a)
    return spectral_profiles(x, ks, v)


def log_minor_profile(g, k) -> np.ndarray:
    """``(f_1(k), ..., f_n(k))`` for one group element and one unitary."""
    x, v = log_spectrum_of_element(g)
    return spectral_profiles(x, np.asarray(k)[None], v)[0]


def _exp_i(theta):
    return np.cos(theta) + 1j * np.sin(theta)


def expm1_i(t):
    """``exp(i t) - 1`` without cancellation for small ``t``."""
    s = np.sin(0.5 * t)
    return -2.0 * s * s + 1j * np.sin(t)


@dataclass(frozen=True)
class MomentSummary:
    m1: np.ndarray
    m1_se: np.ndarray
    m2: np.ndarray
    m2_se: np.ndarray
    sigma2: np.ndarray
    sigma2_cov: np.ndarray
    m1_sum: MCEstimate
    samples: int

    def as_dict(self):
        return {
            "m1": self.m1.tolist(), "m1_std_error": self.m1_se.tolist(),
            "m2": self.m2.tolist(), "m2_std_error": self.m2_se.tolist(),
            "sigma2": self.sigma2.tolist(),
            "m1_sum": float(self.m1_sum.mean), "m1_sum_std_error": float(self.m1_sum.std_error),
            "samples": self.samples,
        }


def _summary_from_stats(n, flat_mean, flat_se, samples, cov, m1_sum):
    m1 = flat_mean[:n]
    m1_se = flat_se[:n]
    m2 = np.empty((n, n))
    m2_se = np.empty((n, n))
    iu = np.triu_indices(n)
    m2[iu] = flat_mean[n:]
    m2_se[iu] = flat_se[n:]
    m2[(iu[1], iu[0])] = flat_mean[n:]
    m2_se[(iu[1], iu[0])] = flat_se[n:]
    sigma2 = m2 - np.outer(m1, m1)
    return MomentSummary(m1, m1_se, m2, m2_se, sigma2, cov, m1_sum, samples)


def _first_second(f):
    """Per-sample ``[f, f_i f_j (i <= j)]``."""
    n = f.shape[1]
    iu = np.triu_indices(n)
    return np.concatenate([f, f[:, iu[0]] * f[:, iu[1]]], axis=1)


@dataclass
class ProfileSet:
    """Log-minor profiles of one ``g`` over one Haar sample set."""

    log_spectrum: np.ndarray
    profiles: np.ndarray

    @property
    def logdet(self):
        return float(self.log_spectrum.sum())

    @property
    def n(self):
        return self.profiles.shape[1]

    @property
    def samples(self):
        return self.profiles.shape[0]

    def phi(self, lam) -> MCEstimate:
        """``phi_{i rho + lambda}``; ``lam`` of shape ``(n,)`` or ``(m, n)``."""
        lam = np.asarray(lam, dtype=float)
        theta = self.profiles @ lam.T
        return stream_estimate(_exp_i(theta))

    def moment(self, l, absolute=False) -> MCEstimate:
        l = np.asarray(l, dtype=int)
        if l.shape != (self.n,) or np.any(l < 0):
            raise ValueError(f"multi-index must be {self.n} nonnegative integers")
        vals = np.prod(self.profiles ** l, axis=1)
        return stream_estimate(np.abs(vals) if absolute else vals)

    def summary(self) -> MomentSummary:
        f = self.profiles
        n = self.n
        acc = RunningStats()
        for lo in range(0, f.shape[0], CHUNK):
            acc.push(_first_second(f[lo:lo + CHUNK]))
        est = acc.estimate()
        cov = _stream_cov(f)
        m1_sum = stream_estimate(np.full(f.shape[0], self.logdet))
        return _summary_from_stats(n, est.mean, est.std_error, est.samples, cov, m1_sum)


def _stream_cov(f):
    """Population covariance (1/N) by a pairwise-merged co-moment."""
    count, mean, com = 0, None, None
    for lo in range(0, f.shape[0], CHUNK):
        b = f[lo:lo + CHUNK]
        nb = b.shape[0]
        shift = b[0]
        mb = shift + (b - shift).mean(axis=0)
        d = b - mb
        cb = d.T @ d
        if count == 0:
            count, mean, com = nb, mb, cb
            continue
        n = count + nb
        delta = mb - mean
        mean = mean + delta * (nb / n)
        com = com + cb + np.outer(delta, delta) * (count * nb / n)
        count = n
    return com / count


def haar_profiles(g, samples: int, seed, partitions: int = 1, threads=None, field=None) -> ProfileSet:
    """Draw one Haar sample set and evaluate the log-minor profiles of ``g``."""
    g = np.asarray(g)
    if field is None:
        field = Field.COMPLEX if np.iscomplexobj(g) else Field.REAL
    n = g.shape[0]
    x, v = log_spectrum_of_element(g)
    ks = haar_sample_set(field, n, samples, seed, partitions, threads)
    return ProfileSet(x, spectral_profiles(x, ks, v))


def chamber_profiles(x, samples: int, seed, partitions: int = 1, field="real") -> ProfileSet:
    """:func:`haar_profiles` for ``g g* = diag(e^x)`` given by its log spectrum.

    Uses the same Haar samples as ``haar_profiles(diag(e^{x/2}), ...)`` but never
    forms ``e^x``, so chamber points far from the identity stay finite.
    """
    x = np.asarray(x, dtype=float)
    ks = haar_sample_set(Field.parse(field), x.size, samples, seed, partitions)
    return ProfileSet(x, spectral_profiles(x, ks))


def spherical_fn(g, lam, samples: int, seed, partitions: int = 1, field=None) -> MCEstimate:
    """Monte Carlo ``phi_{i rho + lambda}(g)`` for real ``lambda``."""
    lam = np.asarray(lam, dtype=float)
    if np.iscomplexobj(lam) or not np.all(np.isfinite(lam)):
        raise ValueError("lambda must be a finite real vector")
    return haar_profiles(g, samples, seed, partitions, field=field).phi(lam)


def moment_fn(g, l, samples: int, seed, partitions: int = 1, field=None, absolute=False) -> MCEstimate:
    """Monte Carlo moment function ``m_l(g) = E_k prod_r f_r(k)^{l_r}``.

    With ``absolute=True`` the integrand is ``|prod_r f_r^{l_r}|``.
    """
    return haar_profiles(g, samples, seed, partitions, field=field).moment(l, absolute)


def moment_summary(g, samples: int, seed, partitions: int = 1, field=None) -> MomentSummary:
    """``m_1(g)``, ``m_2(g)`` and ``Sigma^2(g)`` from one shared Haar sample set."""
    return haar_profiles(g, samples, seed, partitions, field=field).summary()


# -- nested estimators over biinvariant measures ---------------------------------

@dataclass(frozen=True)
class NestedEstimate(MCEstimate):
    """Crossed outer/inner estimate; ``std_error`` combines both parts."""

    inner_error: object = None
    outer_error: object = None
    outer_samples: int = 0

    def __getitem__(self, idx):
        return NestedEstimate(
            np.asarray(self.mean)[idx], np.asarray(self.std_error)[idx], self.samples,
            np.asarray(self.inner_error)[idx], np.asarray(self.outer_error)[idx], self.outer_samples)


def crossed_estimate(strata, form_of, ks_chunks, integrand) -> NestedEstimate:
    """Estimate ``sum_c w_c E_{x ~ c} E_k h(x, k)`` over shared inner samples.

    ``strata`` is a list of ``(weight, xs, probs)``: ``xs`` has shape
    ``(N_c, n)``; ``probs`` holds exact support probabilities for enumerated
    laws, or is ``None`` for equally weighted random draws. ``form_of(x)``
    gives ``(x, V)`` with ``g g* = V diag(e^x) V*``; ``integrand`` maps profiles ``(b, n)`` to values ``(b, m)``.
    ``ks_chunks`` is an iterable of Haar blocks, consumed once.

    The inner error is the standard error of the per-``k`` aggregate; the
    outer error is the weighted between-``x`` spread of the per-``x`` means
    over randomly drawn strata (enumerated strata contribute none).
    """
    wsum = sum(w for w, _, _ in strata)
    grams = []
    for w, xs, probs in strata:
        p = np.full(len(xs), 1.0 / len(xs)) if probs is None else np.asarray(probs, dtype=float)
        grams.append([(w * pj, form_of(x)) for pj, x in zip(p, xs)])
    acc = RunningStats()
    row_sums = [None] * len(strata)
    n_inner = 0
    for ks in ks_chunks:
        column = None
        for c, (w, xs, probs) in enumerate(strata):
            rows = []
            for wp, (fx, fv) in grams[c]:
                vals = integrand(spectral_profiles(fx, ks, fv))
                part = wp * vals
                column = part if column is None else column + part
                if probs is None and len(xs) > 1:
                    rows.append(vals.sum(axis=0))
            if rows:
                rows = np.array(rows)
                row_sums[c] = rows if row_sums[c] is None else row_sums[c] + rows
        acc.push(column / wsum)
        n_inner += ks.shape[0]
    inner = acc.estimate()
    outer_var = np.zeros(np.shape(inner.std_error))
    for c, (w, xs, probs) in enumerate(strata):
        if row_sums[c] is None:
            continue
        means = row_sums[c] / n_inner
        spread = np.sum(np.abs(means - means.mean(axis=0)) ** 2, axis=0) / (len(xs) - 1)
        outer_var = outer_var + (w / wsum) ** 2 * spread / len(xs)
    outer_err = np.sqrt(outer_var)
    total = np.sqrt(np.asarray(inner.std_error) ** 2 + outer_err ** 2)
    n_outer = sum(len(xs) for _, xs, _ in strata)
    return NestedEstimate(inner.mean, total, inner.samples, inner.std_error, outer_err, n_outer)


def _chamber_form(x):
    return np.asarray(x, dtype=float), None


def transform_stencil(nu, stencil, outer_samples: int, inner_samples: int, seed,
                      partitions: int = 1) -> NestedEstimate:
    """Estimate ``sum_j c_j * nu~(lambda_j)`` in one crossed pass.

    ``nu~(lambda) = E_nu phi_{i rho - lambda}(g) = E E_k exp(-i lambda . f)``.
    Inner Haar samples come from ``seed`` exactly as in :func:`spherical_fn`;
    chamber draws come from a separate derived stream.
    """
    seed = Seed.of(seed)
    coefs = np.array([c for c, _ in stencil], dtype=complex)
    lams = np.array([np.asarray(l, dtype=float) for _, l in stencil])
    ks = haar_chunks(nu.field, nu.n, inner_samples, seed, partitions)
    strata = nu.chamber_strata(outer_samples, seed.derive(OUTER_STREAM).rng())

    def integrand(f):
        e = _exp_i(-(f @ lams.T))
        return (e * coefs).sum(axis=1, keepdims=True) if len(stencil) > 1 else e

    return crossed_estimate(strata, _chamber_form, ks, integrand)[0]


def spherical_transform(nu, lam, outer_samples: int, inner_samples: int, seed,
                        partitions: int = 1) -> NestedEstimate:
    """Nested Monte Carlo spherical Fourier transform ``nu~(lambda)``.

    ``lam`` may be one vector or a grid ``(m, n)``; grid points share samples.
    """
    seed = Seed.of(seed)
    lam = np.asarray(lam, dtype=float)
    single = lam.ndim == 1
    lams = np.atleast_2d(lam)
    ks = haar_chunks(nu.field, nu.n, inner_samples, seed, partitions)
    strata = nu.chamber_strata(outer_samples, seed.derive(OUTER_STREAM).rng())
    est = crossed_estimate(strata, _chamber_form, ks, lambda f: _exp_i(-(f @ lams.T)))
    return est[0] if single else est


def derivative_stencil(n: int, l, step: float):
    """Central finite-difference stencil for ``d^l / d lambda^l`` at 0, ``|l| <= 2``."""
    l = np.asarray(l, dtype=int)
    if l.shape != (n,) or np.any(l < 0):
        raise ValueError(f"multi-index must be {n} nonnegative integers")
    e = np.eye(n)
    idx = np.flatnonzero(l)
    order = int(l.sum())
    h = float(step)
    if order == 0:
        return [(1.0, np.zeros(n))]
    if order == 1:
        i = idx[0]
        return [(0.5 / h, h * e[i]), (-0.5 / h, -h * e[i])]
    if order == 2 and len(idx) == 1:
        i = idx[0]
        return [(1 / h**2, h * e[i]), (-2 / h**2, np.zeros(n)), (1 / h**2, -h * e[i])]
    if order == 2:
        i, j = idx
        c = 0.25 / h**2
        return [(c, h * (e[i] + e[j])), (-c, h * (e[i] - e[j])),
                (-c, h * (e[j] - e[i])), (c, -h * (e[i] + e[j]))]
    raise ValueError("only derivatives of order <= 2 are supported")


def transform_derivative(nu, l, step: float, outer_samples: int, inner_samples: int, seed,
                         partitions: int = 1) -> NestedEstimate:
    """Central finite difference of ``nu~`` at 0 with common random numbers."""
    return transform_stencil(nu, derivative_stencil(nu.n, l, step), outer_samples,
                             inner_samples, seed, partitions)
