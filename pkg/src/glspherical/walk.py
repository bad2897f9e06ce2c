"""Biinvariant random walks, the normalised CLT statistic and oscillation scans.

The product ``S_k = X_1 ... X_k`` is carried through its adjoint
``S_k* = X_k* S_{k-1}*`` in the factored form ``Q diag(e^l) N`` with ``Q``
unitary, ``l`` a real log-scale vector and ``N`` unit upper triangular. No
entry of the state grows with ``k``; singular values are read off through
exterior powers of ``diag(e^l) N``, so the whole log-spectrum stays accurate
even when the spread ``l_1 - l_n`` is in the thousands.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ConfigError, NumericalBlowup
from .haar import Seed, haar_batch, partition_sizes, run_partitions
from .linalg import batched_qr, singular_log_spectrum, subsets
from .measures import BiinvariantMeasure, measure_moments
from .spherical import expm1_i, haar_profiles

M1_STREAM = 1_000_033
DIRECTION_SEED = 20240917
RANK_TOL = 1e-8


# -- log-scaled product engine ---------------------------------------------------

def _compound_index(n, r):
    sets = np.array(subsets(n, r))
    return sets[:, None, :, None], sets[None, :, None, :]


def log_spectrum_from_factors(ell, nmat):
    """``ln sigma_sing`` of ``diag(e^ell) N`` for stacks, descending.

    Partial sums ``sum_{i<=r} ln sigma_i`` are the log norms of the r-th
    exterior powers, computed with the scale factored out of every row.
    """
    b, n = ell.shape
    partial = np.empty((b, n))
    for r in range(1, n):
        if r == 1:
            comp = nmat
            w = ell
        else:
            ri, ci = _compound_index(n, r)
            comp = np.linalg.det(nmat[:, ri, ci])
            w = ell[:, np.array(subsets(n, r))].sum(axis=-1)
        top = w.max(axis=1)
        scaled = comp * np.exp(w - top[:, None])[:, :, None]
        partial[:, r - 1] = top + np.log(np.linalg.svd(scaled, compute_uv=False)[:, 0])
    partial[:, n - 1] = ell.sum(axis=1)
    out = partial.copy()
    out[:, 1:] -= partial[:, :-1]
    return -np.sort(-out, axis=1)


class ProductState:
    """Batched factored adjoint product ``Q diag(e^ell) N``."""

    def __init__(self, field, n, batch):
        dt = np.complex128 if field.d == 2 else np.float64
        self.q = np.broadcast_to(np.eye(n, dtype=dt), (batch, n, n)).copy()
        self.ell = np.zeros((batch, n))
        self.nmat = np.broadcast_to(np.eye(n, dtype=dt), (batch, n, n)).copy()
        self.steps = 0

    def push(self, x):
        """Right-multiply the product by ``x`` (one matrix per batch row)."""
        a = np.swapaxes(x, -1, -2).conj() @ self.q
        q, r = batched_qr(a)
        d = np.diagonal(r, axis1=-2, axis2=-1)
        mag = np.abs(d)
        if not np.all(mag > 0) or not np.all(np.isfinite(mag)):
            raise NumericalBlowup(f"renormalising QR lost rank at step {self.steps + 1}")
        ph = d / mag
        self.q = q * ph[:, None, :]
        r = r * ph.conj()[:, :, None]
        # M = D^{-1} r D, then strip diag(r) off the rows
        gap = np.triu(self.ell[:, None, :] - self.ell[:, :, None])
        m = (r / mag[:, :, None]) * np.exp(gap)
        self.nmat = m @ self.nmat
        self.ell = self.ell + np.log(mag)
        self.steps += 1
        if not (np.all(np.isfinite(self.ell)) and np.all(np.isfinite(self.nmat))):
            raise NumericalBlowup(f"non-finite factored state at step {self.steps}")

    def log_spectrum(self):
        return log_spectrum_from_factors(self.ell, self.nmat)


def draw_increments(nu: BiinvariantMeasure, size, rng):
    x = nu.sample_chamber(rng, size)
    u1 = haar_batch(nu.field, nu.n, size, rng)
    u2 = haar_batch(nu.field, nu.n, size, rng)
    return (u1 * np.exp(0.5 * x)[:, None, :]) @ u2


def draw_spectral_increments(nu: BiinvariantMeasure, size, rng):
    """``diag(e^{x/2}) W`` with ``W`` Haar.

    In ``u_1 D_1 v_1 u_2 D_2 v_2 ...`` each ``v_i u_{i+1}`` is Haar and
    independent of the rest, and ``u_1`` does not move singular values, so
    these increments give the walk's singular-value process in law at half
    the Haar cost.
    """
    x = nu.sample_chamber(rng, size)
    return np.exp(0.5 * x)[:, :, None] * haar_batch(nu.field, nu.n, size, rng)


def _check_points(k_max, checkpoints):
    if k_max < 1:
        raise ConfigError("k_max must be at least 1")
    cps = sorted(set(int(c) for c in (checkpoints if checkpoints is not None else [k_max])))
    if not cps or cps[0] < 1 or cps[-1] > k_max:
        raise ConfigError(f"checkpoints must lie in 1..{k_max}")
    return cps


def walk_spectra(nu, k_max, checkpoints, trials, rng, keep_increments=False):
    """Run ``trials`` walks in lockstep; ``{k: (trials, n) ln sigma_sing}``."""
    cps = _check_points(k_max, checkpoints)
    state = ProductState(nu.field, nu.n, trials)
    out, incs = {}, []
    want = set(cps)
    draw = draw_increments if keep_increments else draw_spectral_increments
    for k in range(1, cps[-1] + 1):
        x = draw(nu, trials, rng)
        if keep_increments:
            incs.append(x)
        state.push(x)
        if k in want:
            out[k] = state.log_spectrum()
    return out, (np.stack(incs, axis=1) if keep_increments else None)


@dataclass
class WalkTrajectory:
    k_max: int
    checkpoints: list
    increments: np.ndarray | None = None

    def spectrum(self, k):
        return dict(self.checkpoints)[k]

    def as_dict(self):
        return {"k_max": self.k_max,
                "checkpoints": [{"k": k, "log_sigma": v.tolist()} for k, v in self.checkpoints]}


def run_walk(nu: BiinvariantMeasure, k_max: int, checkpoints=None, seed=0,
             keep_increments=False) -> WalkTrajectory:
    """One walk ``S_k = S_{k-1} X_k``; ``ln sigma_sing(S_k)`` at the checkpoints."""
    rng = seed if isinstance(seed, np.random.Generator) else Seed.of(seed).rng()
    spec, incs = walk_spectra(nu, k_max, checkpoints, 1, rng, keep_increments)
    cps = [(k, spec[k][0]) for k in sorted(spec)]
    return WalkTrajectory(k_max, cps, None if incs is None else incs[0])


def direct_product_spectrum(increments):
    """Reference ``ln sigma_sing(X_1 ... X_k)`` by plain multiplication."""
    s = np.eye(increments.shape[-1], dtype=increments.dtype)
    for x in increments:
        s = s @ x
    return singular_log_spectrum(s)


# -- CLT ----------------------------------------------------------------------

@dataclass
class CltSample:
    k: int
    statistics: np.ndarray
    nu_moments: object
    m1_target_se: float = 0.0
    m1_precision_met: bool = True

    @property
    def trials(self):
        return self.statistics.shape[0]


def centering_moments(nu, k, seed, stat_tol=0.1, pilot=10_000, outer=2_000,
                      inner_cap=20_000_000, work_cap=40_000_000, partitions=1):
    """``measure_moments`` with per-coordinate ``se(m_1) <= 0.1 stat_tol / sqrt(k)``.

    A pilot run sizes the inner and outer sample counts; both are capped and
    the returned flag says whether the target was reached.
    """
    target = 0.1 * stat_tol / np.sqrt(k)
    seed = Seed.of(seed)
    est = measure_moments(nu, outer, pilot, seed, partitions)
    if np.all(est.m1_se <= target):
        return est, target, True
    # split the error budget evenly between the two sources
    half = target / np.sqrt(2.0)
    n_in = int(np.ceil(pilot * (np.max(est.m1_inner_se) / half) ** 2)) if np.max(est.m1_inner_se) > 0 else pilot
    n_out = int(np.ceil(outer * (np.max(est.m1_outer_se) / half) ** 2)) if np.max(est.m1_outer_se) > 0 else outer
    n_in = min(max(n_in, pilot), inner_cap)
    n_out = min(max(n_out, outer), max(outer, work_cap // n_in)) if nu.has_random_components else outer
    est = measure_moments(nu, n_out, n_in, seed.derive(1), partitions)
    return est, target, bool(np.all(est.m1_se <= target))


def clt_curve(nu, ks, trials, seed, partitions=1, moments=None, stat_tol=0.1):
    """CLT statistics at every ``k`` in ``ks`` from one ensemble of walks."""
    if trials < 100:
        raise ConfigError("trials must be at least 100")
    ks = sorted(set(int(k) for k in ks))
    seed = Seed.of(seed)
    if moments is None:
        moments, target, ok = centering_moments(nu, ks[-1], seed.derive(M1_STREAM),
                                                stat_tol, partitions=partitions)
    else:
        target, ok = 0.0, True

    def work(size, rng, _):
        return walk_spectra(nu, ks[-1], ks, size, rng)[0]

    parts = run_partitions(work, partition_sizes(trials, partitions), seed, partitions)
    out = []
    for k in ks:
        logs = np.concatenate([p[k] for p in parts])
        t = (2.0 * logs - k * moments.m1) / np.sqrt(k)
        if not np.all(np.isfinite(t)):
            raise NumericalBlowup(f"non-finite CLT statistic at k={k}")
        out.append(CltSample(k, t, moments, target, ok))
    return out


def clt_ensemble(nu, k, trials, seed, partitions=1, moments=None, stat_tol=0.1) -> CltSample:
    """``T = (2 ln sigma_sing(S_k) - k m_1(nu)) / sqrt(k)`` over independent walks."""
    return clt_curve(nu, [k], trials, seed, partitions, moments, stat_tol)[0]


@dataclass
class GaussianReport:
    mean_norm: float
    cov_frobenius_rel_err: float
    mardia_skewness: float | None
    mardia_skewness_p: float | None
    mardia_kurtosis_z: float | None
    per_direction_ks: list
    degenerate: bool
    rank: int
    trials: int
    sample_cov: np.ndarray = field(repr=False, default=None)

    def as_dict(self):
        return {
            "mean_norm": self.mean_norm,
            "cov_frobenius_rel_err": self.cov_frobenius_rel_err,
            "mardia_skewness": self.mardia_skewness,
            "mardia_skewness_p": self.mardia_skewness_p,
            "mardia_kurtosis_z": self.mardia_kurtosis_z,
            "per_direction_ks": [{"direction": d.tolist(), "ks_statistic": s, "p_value": p}
                                 for d, s, p in self.per_direction_ks],
            "degenerate_covariance": self.degenerate, "rank": self.rank, "trials": self.trials,
            "sample_cov": None if self.sample_cov is None else self.sample_cov.tolist(),
        }

    @property
    def min_ks_p(self):
        return min((p for _, _, p in self.per_direction_ks), default=None)


def mardia(z):
    """Mardia's ``(N b1 / 6, p-value, kurtosis z)`` for already-projected data.

    ``b1`` is the squared norm of the third-moment tensor of the whitened
    sample, which avoids the N x N Gram matrix.
    """
    nobs, p = z.shape
    c = z - z.mean(axis=0)
    s = c.T @ c / nobs
    evals, evecs = np.linalg.eigh(s)
    y = c @ (evecs / np.sqrt(evals))
    t3 = np.einsum("ir,is,it->rst", y, y, y) / nobs
    b1 = float(np.sum(t3 ** 2))
    b2 = float(np.mean(np.sum(y * y, axis=1) ** 2))
    skew = nobs * b1 / 6.0
    dof = p * (p + 1) * (p + 2) / 6.0
    kurt_z = (b2 - p * (p + 2)) / np.sqrt(8.0 * p * (p + 2) / nobs)
    return skew, float(stats.chi2.sf(skew, dof)), float(kurt_z)


def gaussian_compare(sample, sigma2=None) -> GaussianReport:
    """Compare CLT statistics with ``N(0, Sigma^2(nu))``.

    Mardia statistics and KS tests run on the numerical range of ``Sigma^2``;
    a rank below ``n`` is flagged, not fatal.
    """
    t = np.asarray(sample.statistics if hasattr(sample, "statistics") else sample, dtype=float)
    if sigma2 is None:
        sigma2 = sample.nu_moments.sigma2
    sigma2 = 0.5 * (np.asarray(sigma2) + np.asarray(sigma2).T)
    nobs, n = t.shape
    if nobs < 100:
        raise ConfigError("need at least 100 trials")
    mean = t.mean(axis=0)
    cov = np.cov(t, rowvar=False, ddof=1).reshape(n, n)
    ref = np.linalg.norm(sigma2)
    err = np.linalg.norm(cov - sigma2)
    rel = float(err / ref) if ref > 0 else float(err)
    evals, evecs = np.linalg.eigh(sigma2)
    top = evals[-1]
    keep = evals > RANK_TOL * top if top > 0 else np.zeros(n, bool)
    rank = int(keep.sum())
    ks_rows = []
    skew = skew_p = kurt_z = None
    if rank:
        basis = evecs[:, keep]
        z = t @ basis
        for j in range(rank):
            v = basis[:, j]
            v = v if v[np.argmax(np.abs(v))] > 0 else -v
            res = stats.kstest(t @ v, "norm", args=(0.0, np.sqrt(evals[keep][j])))
            ks_rows.append((v, float(res.statistic), float(res.pvalue)))
        skew, skew_p, kurt_z = mardia(z)
        skew = float(skew)
    return GaussianReport(float(np.linalg.norm(mean)), rel, skew, skew_p, kurt_z, ks_rows,
                          rank < n, rank, nobs, cov)


# -- oscillation scans -------------------------------------------------------------

def unit_directions(n, count):
    """Fixed pseudo-random unit vectors; the first ``m`` of ``count`` do not depend on ``count``."""
    rng = np.random.Generator(np.random.PCG64(DIRECTION_SEED + n))
    v = rng.standard_normal((count, n))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def log_grid(lo, hi, count, dirs, n):
    radii = np.geomspace(lo, hi, count)
    d = unit_directions(n, dirs)
    return (radii[:, None, None] * d[None, :, :]).reshape(-1, n)


def parse_lambda_grid(spec, n):
    """Grid from ``log:LO:HI:COUNTxDIRS``, a JSON list of vectors or ``a,b;c,d``."""
    if isinstance(spec, (list, tuple, np.ndarray)):
        arr = np.asarray(spec, dtype=float)
    else:
        text = str(spec).strip()
        try:
            if text.startswith("log:"):
                lo, hi, rest = text[4:].split(":")
                count, dirs = (rest.split("x") + ["1"])[:2] if "x" in rest else (rest, "1")
                lo, hi, count, dirs = float(lo), float(hi), int(count), int(dirs)
                if not (0 < lo < hi and count >= 1 and dirs >= 1):
                    raise ValueError
                return log_grid(lo, hi, count, dirs, n)
            if text.startswith("["):
                arr = np.asarray(json.loads(text), dtype=float)
            else:
                arr = np.array([[float(v) for v in row.split(",")] for row in text.split(";") if row.strip()])
        except (ValueError, TypeError, json.JSONDecodeError):
            raise ConfigError(f"malformed lambda grid {spec!r}") from None
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != n or arr.shape[0] == 0:
        raise ConfigError(f"lambda grid must be a list of vectors of length {n}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError("lambda grid entries must be finite")
    return arr


@dataclass
class OscillationScanReport:
    grid: np.ndarray
    ratios2: np.ndarray
    ratios2_se: np.ndarray
    ratios1: np.ndarray
    ratios1_se: np.ndarray
    ratios1_literal: np.ndarray
    m1: np.ndarray
    log_sigma: np.ndarray
    samples: int

    @property
    def norms(self):
        return np.linalg.norm(self.grid, axis=1)

    def _sup(self, r, se):
        i = int(np.argmax(r))
        return float(r[i]), float(se[i])

    @property
    def sup_ratio2(self):
        return self._sup(self.ratios2, self.ratios2_se)

    @property
    def sup_ratio1(self):
        return self._sup(self.ratios1, self.ratios1_se)

    def small_lambda_floor(self, radius=1e-2):
        """Min over radii ``<= radius`` of the per-radius max of ``ratio2`` over directions."""
        norms = np.round(self.norms, 12)
        small = np.unique(norms[norms <= radius])
        if small.size == 0:
            return None
        return float(min(self.ratios2[norms == r].max() for r in small))

    def as_dict(self):
        return {
            "samples": self.samples, "m1": self.m1.tolist(), "log_sigma": self.log_sigma.tolist(),
            "sup_ratio2": self.sup_ratio2[0], "sup_ratio2_std_error": self.sup_ratio2[1],
            "sup_ratio1": self.sup_ratio1[0], "sup_ratio1_std_error": self.sup_ratio1[1],
            "sup_ratio1_literal": float(self.ratios1_literal.max()),
            "small_lambda_floor_ratio2": self.small_lambda_floor(),
            "grid": self.grid.tolist(), "ratios2": self.ratios2.tolist(),
            "ratios2_std_error": self.ratios2_se.tolist(), "ratios1": self.ratios1.tolist(),
            "ratios1_std_error": self.ratios1_se.tolist(),
            "ratios1_literal": self.ratios1_literal.tolist(),
        }


def _abs_mean(vals):
    """``|mean|`` and its standard error, columnwise over a ``(N, m)`` complex array."""
    nobs = vals.shape[0]
    mean = vals.mean(axis=0)
    dev = vals - mean
    var = np.sum(np.abs(dev) ** 2, axis=0) / (nobs - 1)
    return np.abs(mean), np.sqrt(var / nobs)


def oscillation_ratio_scan(g, grid, samples: int, seed, partitions=1, field=None,
                           chunk=256) -> OscillationScanReport:
    """Both oscillation ratios over a grid, all from one Haar sample set.

    ``ratio2 = |phi_{i rho + lambda}(g) - e^{i lambda . m_1(g)}| / |lambda|^2`` and
    ``ratio1 = |phi_{i rho + lambda}(g) - e^{2 i lambda . ln sigma_sing(g)}| / |lambda|``;
    ``ratios1_literal`` uses ``phi_{i rho - lambda}`` against the same exponential.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    norms = np.linalg.norm(grid, axis=1)
    if np.any(norms == 0):
        raise ConfigError("oscillation grid must exclude lambda = 0")
    ps = haar_profiles(g, samples, seed, partitions, field=field)
    f = ps.profiles
    m1 = f.mean(axis=0)
    ls = singular_log_spectrum(np.asarray(g))
    r2, s2, r1, s1, r1l = (np.empty(len(grid)) for _ in range(5))
    d2 = f - m1
    d1 = f - 2.0 * ls
    for lo in range(0, len(grid), chunk):
        sl = slice(lo, lo + chunk)
        lam = grid[sl].T
        a, sa = _abs_mean(expm1_i(d2 @ lam))
        b, sb = _abs_mean(expm1_i(d1 @ lam))
        # phi_{i rho - lambda} - e^{2 i lambda . ln sigma}
        lit = np.abs(np.mean(np.exp(-1j * (f @ lam)), axis=0) - np.exp(2j * (ls @ lam)))
        nn = norms[sl]
        r2[sl], s2[sl] = a / nn ** 2, sa / nn ** 2
        r1[sl], s1[sl] = b / nn, sb / nn
        r1l[sl] = lit / nn
    return OscillationScanReport(grid, r2, s2, r1, s1, r1l, m1, ls, ps.samples)
