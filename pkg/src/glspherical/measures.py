"""K-biinvariant probability measures on GL_n(F).

A biinvariant measure is represented by its law on the Weyl chamber plus
two-sided Haar rotation: a draw is ``g = u1 diag(e^{x/2}) u2`` with ``x`` from
the chamber law, so ``2 ln sigma_sing(g) = x``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .errors import NonFiniteValue, SpecError
from .haar import Seed, haar_batch, haar_chunks
from .linalg import Field
from .spherical import OUTER_STREAM, _chamber_form, _first_second, crossed_estimate

PSD_TOL = 1e-8
# finite-support laws up to this many chamber points are enumerated exactly
ENUM_CAP = 4096


def sort_desc(x):
    """Sort rows descending; ties keep input order."""
    x = np.asarray(x, dtype=float)
    idx = np.argsort(-x, axis=-1, kind="stable")
    return np.take_along_axis(x, idx, axis=-1)


# -- chamber laws ---------------------------------------------------------------

@dataclass(frozen=True)
class Normal:
    mu: float
    sigma: float

    def draw(self, rng, shape):
        return rng.normal(self.mu, self.sigma, shape)

    def to_dict(self):
        return {"normal": {"mu": self.mu, "sigma": self.sigma}}

    values = None


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def draw(self, rng, shape):
        return rng.uniform(self.lo, self.hi, shape)

    def to_dict(self):
        return {"uniform": {"lo": self.lo, "hi": self.hi}}

    values = None


@dataclass(frozen=True)
class LogSpaced:
    """Uniform choice from a finite list of log-coordinates."""

    values: tuple

    def draw(self, rng, shape):
        return np.asarray(self.values)[rng.integers(0, len(self.values), shape)]

    def to_dict(self):
        return {"log_spaced": list(self.values)}


@dataclass(frozen=True)
class Point:
    x: tuple

    @property
    def n(self):
        return len(self.x)

    def sample(self, rng, size):
        return np.tile(np.asarray(self.x, dtype=float), (size, 1))

    def to_dict(self):
        return {"point": list(self.x)}

    def support(self):
        return np.array([self.x], dtype=float), np.ones(1)


@dataclass(frozen=True)
class SortedIID:
    marginal: object
    n: int

    def sample(self, rng, size):
        return sort_desc(self.marginal.draw(rng, (size, self.n)))

    def to_dict(self):
        return {"sorted_iid": {"marginal": self.marginal.to_dict(), "n": self.n}}

    def support(self):
        """Exact ``(points, probabilities)`` for a finite marginal, else ``None``."""
        vals = self.marginal.values
        if vals is None:
            return None
        m = len(vals)
        if math.comb(m + self.n - 1, self.n) > ENUM_CAP:
            return None
        pts, probs = [], []
        for combo in itertools.combinations_with_replacement(range(m), self.n):
            _, counts = np.unique(combo, return_counts=True)
            ways = math.factorial(self.n) // math.prod(math.factorial(c) for c in counts)
            pts.append(sort_desc(np.asarray(vals)[list(combo)]))
            probs.append(ways / m ** self.n)
        return np.array(pts), np.array(probs)


@dataclass(frozen=True)
class Scaled:
    """Base law for ``e^shift g``: chamber points move by ``2 shift (1, ..., 1)``."""

    base: object
    shift: float

    @property
    def n(self):
        return self.base.n

    def sample(self, rng, size):
        return self.base.sample(rng, size) + 2.0 * self.shift

    def to_dict(self):
        return {"scaled": {"base": self.base.to_dict(), "shift": self.shift}}

    def support(self):
        sup = self.base.support()
        return None if sup is None else (sup[0] + 2.0 * self.shift, sup[1])


@dataclass(frozen=True)
class BiinvariantMeasure:
    field: Field
    n: int
    weights: tuple
    laws: tuple

    def __post_init__(self):
        if abs(sum(self.weights) - 1.0) > 1e-12:
            raise SpecError("components", "weights must sum to 1")

    @classmethod
    def from_components(cls, field, components):
        """``components`` is a sequence of ``(weight, law)``; weights are normalised."""
        field = Field.parse(field)
        components = list(components)
        if not components:
            raise SpecError("components", "at least one component is required")
        w = np.array([c[0] for c in components], dtype=float)
        if np.any(~np.isfinite(w)) or np.any(w <= 0):
            raise SpecError("components", "weights must be finite and positive")
        w = w / w.sum()
        laws = tuple(c[1] for c in components)
        n = laws[0].n
        for i, law in enumerate(laws):
            if law.n != n:
                raise SpecError(f"components[{i}].law", f"dimension {law.n} != {n}")
        return cls(field, n, tuple(float(v) for v in w), laws)

    def to_dict(self):
        return {"field": self.field.value, "n": self.n,
                "components": [{"weight": w, "law": law.to_dict()}
                               for w, law in zip(self.weights, self.laws)]}

    @property
    def has_random_components(self):
        """True when some component must be sampled rather than enumerated."""
        return any(law.support() is None for law in self.laws)

    def sample_chamber(self, rng, size):
        """``size`` chamber points, component chosen by weight."""
        comp = rng.choice(len(self.laws), size=size, p=np.array(self.weights)) \
            if len(self.laws) > 1 else np.zeros(size, dtype=int)
        x = np.empty((size, self.n))
        for c, law in enumerate(self.laws):
            sel = np.flatnonzero(comp == c)
            if sel.size:
                x[sel] = law.sample(rng, sel.size)
        if not np.all(np.isfinite(x)):
            raise NonFiniteValue("chamber law emitted non-finite values")
        return x

    def chamber_strata(self, outer_samples: int, rng):
        """Per-component ``(weight, points, probabilities)``.

        Finite-support laws are enumerated exactly. Other components get
        ``ceil(weight * outer_samples)`` random draws (at least 2) with
        ``probabilities = None``.
        """
        strata = []
        for w, law in zip(self.weights, self.laws):
            sup = law.support()
            if sup is not None:
                strata.append((w, sup[0], sup[1]))
                continue
            xs = law.sample(rng, max(2, int(np.ceil(w * outer_samples))))
            if not np.all(np.isfinite(xs)):
                raise NonFiniteValue("chamber law emitted non-finite values")
            strata.append((w, xs, None))
        return strata


# -- parsing ---------------------------------------------------------------------

def _number(value, path):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SpecError(path, f"expected a number, got {value!r}")
    if not np.isfinite(value):
        raise SpecError(path, "must be finite")
    return float(value)


def _vector(value, path):
    if not isinstance(value, (list, tuple)) or not value:
        raise SpecError(path, f"expected a non-empty list of numbers, got {value!r}")
    return tuple(_number(v, f"{path}[{i}]") for i, v in enumerate(value))


def _single_key(doc, path, allowed):
    if not isinstance(doc, dict) or len(doc) != 1:
        raise SpecError(path, f"expected an object with exactly one of {sorted(allowed)}")
    (key, val), = doc.items()
    if key not in allowed:
        raise SpecError(path, f"unknown key {key!r}; expected one of {sorted(allowed)}")
    return key, val


def _parse_marginal(doc, path):
    key, val = _single_key(doc, path, {"normal", "uniform", "log_spaced"})
    path = f"{path}.{key}"
    if key == "normal":
        if not isinstance(val, dict):
            raise SpecError(path, "expected {mu, sigma}")
        mu = _number(val.get("mu", 0.0), f"{path}.mu")
        sigma = _number(val.get("sigma"), f"{path}.sigma")
        if sigma <= 0:
            raise SpecError(f"{path}.sigma", "must be positive")
        return Normal(mu, sigma)
    if key == "uniform":
        if not isinstance(val, dict):
            raise SpecError(path, "expected {lo, hi}")
        lo = _number(val.get("lo"), f"{path}.lo")
        hi = _number(val.get("hi"), f"{path}.hi")
        if not lo < hi:
            raise SpecError(path, "need lo < hi")
        return Uniform(lo, hi)
    if isinstance(val, dict):
        lo = _number(val.get("lo"), f"{path}.lo")
        hi = _number(val.get("hi"), f"{path}.hi")
        count = val.get("count")
        if not isinstance(count, int) or count < 1:
            raise SpecError(f"{path}.count", "must be a positive integer")
        return LogSpaced(tuple(float(v) for v in np.linspace(lo, hi, count)))
    return LogSpaced(_vector(val, path))


def parse_law(doc, path="law"):
    key, val = _single_key(doc, path, {"point", "sorted_iid", "scaled"})
    sub = f"{path}.{key}"
    if key == "point":
        x = _vector(val, sub)
        if any(a < b for a, b in zip(x, x[1:])):
            raise SpecError(sub, "chamber point must be in descending order")
        return Point(x)
    if key == "sorted_iid":
        if not isinstance(val, dict) or "marginal" not in val or "n" not in val:
            raise SpecError(sub, "expected {marginal, n}")
        n = val["n"]
        if isinstance(n, bool) or not isinstance(n, int) or n < 1:
            raise SpecError(f"{sub}.n", "must be a positive integer")
        return SortedIID(_parse_marginal(val["marginal"], f"{sub}.marginal"), n)
    if not isinstance(val, dict) or "base" not in val:
        raise SpecError(sub, "expected {base, shift}")
    return Scaled(parse_law(val["base"], f"{sub}.base"), _number(val.get("shift", 0.0), f"{sub}.shift"))


def parse_measure(doc) -> BiinvariantMeasure:
    """Validate a measure specification document.

    ``{"field": "real"|"complex", "n": int, "components": [{"weight": w,
    "law": {...}}, ...]}``. Law forms: ``{"point": [x1..xn]}`` (descending),
    ``{"sorted_iid": {"marginal": M, "n": n}}`` and
    ``{"scaled": {"base": law, "shift": s}}``; marginals ``{"normal": {mu,
    sigma}}``, ``{"uniform": {lo, hi}}``, ``{"log_spaced": [v...]}`` or
    ``{"log_spaced": {lo, hi, count}}``.
    """
    if not isinstance(doc, dict):
        raise SpecError("", "measure specification must be an object")
    unknown = set(doc) - {"field", "n", "components"}
    if unknown:
        raise SpecError("", f"unknown keys {sorted(unknown)}")
    try:
        field = Field.parse(doc.get("field", "real"))
    except ValueError as exc:
        raise SpecError("field", str(exc)) from None
    comps = doc.get("components")
    if not isinstance(comps, list) or not comps:
        raise SpecError("components", "expected a non-empty list")
    parsed = []
    for i, comp in enumerate(comps):
        path = f"components[{i}]"
        if not isinstance(comp, dict) or "law" not in comp:
            raise SpecError(path, "expected {weight, law}")
        w = _number(comp.get("weight", 1.0), f"{path}.weight")
        if w <= 0:
            raise SpecError(f"{path}.weight", "must be positive")
        parsed.append((w, parse_law(comp["law"], f"{path}.law")))
    n = doc.get("n", parsed[0][1].n)
    if isinstance(n, bool) or not isinstance(n, int) or n < 1:
        raise SpecError("n", "must be a positive integer")
    for i, (_, law) in enumerate(parsed):
        if law.n != n:
            raise SpecError(f"components[{i}].law", f"dimension {law.n} does not match n={n}")
    return BiinvariantMeasure.from_components(field, parsed)


def load_measure(source) -> BiinvariantMeasure:
    """Parse a measure from a dict, inline JSON/YAML text or a file path."""
    if isinstance(source, BiinvariantMeasure):
        return source
    if isinstance(source, dict):
        return parse_measure(source)
    text = str(source)
    if not text.lstrip().startswith(("{", "[")):
        p = Path(text)
        if not p.is_file():
            raise SpecError("", f"measure file not found: {text}")
        text = p.read_text()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SpecError("", f"cannot parse measure document: {exc}") from None
    return parse_measure(doc)


def point_measure(x, field="real") -> BiinvariantMeasure:
    x = tuple(float(v) for v in x)
    return BiinvariantMeasure.from_components(field, [(1.0, Point(x))])


# -- sampling ---------------------------------------------------------------------

def sample_group_elements(nu: BiinvariantMeasure, size: int, rng):
    """``size`` draws ``g = u1 diag(e^{x/2}) u2``; returns ``(g, x)`` stacks."""
    x = nu.sample_chamber(rng, size)
    u1 = haar_batch(nu.field, nu.n, size, rng)
    u2 = haar_batch(nu.field, nu.n, size, rng)
    g = (u1 * np.exp(0.5 * x)[:, None, :]) @ u2
    return g, x


def sample_group_element(nu: BiinvariantMeasure, seed):
    """One draw ``(g, x)`` from ``nu``."""
    rng = seed if isinstance(seed, np.random.Generator) else Seed.of(seed).rng()
    g, x = sample_group_elements(nu, 1, rng)
    return g[0], x[0]


# -- modified moments ------------------------------------------------------------

@dataclass(frozen=True)
class MeasureMoments:
    m1: np.ndarray
    m1_se: np.ndarray
    m1_inner_se: np.ndarray
    m1_outer_se: np.ndarray
    m2: np.ndarray
    m2_se: np.ndarray
    sigma2: np.ndarray
    eigenvalues: np.ndarray
    positive_definite: bool
    min_eigenvalue: float
    kernel_direction: np.ndarray | None
    inner_samples: int
    outer_samples: int

    def as_dict(self):
        return {
            "m1": self.m1.tolist(), "m1_std_error": self.m1_se.tolist(),
            "m1_inner_std_error": self.m1_inner_se.tolist(),
            "m1_outer_std_error": self.m1_outer_se.tolist(),
            "m2": self.m2.tolist(), "m2_std_error": self.m2_se.tolist(),
            "sigma2": self.sigma2.tolist(),
            "sigma2_eigenvalues": self.eigenvalues.tolist(),
            "positive_definite": self.positive_definite,
            "min_eigenvalue": self.min_eigenvalue,
            "kernel_direction": None if self.kernel_direction is None else self.kernel_direction.tolist(),
            "inner_samples": self.inner_samples, "outer_samples": self.outer_samples,
        }


def definiteness(sigma2, tol=PSD_TOL):
    """``(eigenvalues, positive_definite, min_eigenvalue, kernel_direction)``."""
    sym = 0.5 * (sigma2 + sigma2.T)
    evals, evecs = np.linalg.eigh(sym)
    top = max(evals[-1], 0.0)
    pd = bool(top > 0 and evals[0] > tol * top)
    kernel = None
    if not pd:
        v = evecs[:, 0]
        kernel = v if v.sum() >= 0 else -v
    return evals, pd, float(evals[0]), kernel


def measure_moments(nu: BiinvariantMeasure, outer_samples: int, inner_samples: int, seed,
                    partitions: int = 1) -> MeasureMoments:
    """Nested Monte Carlo ``m_1(nu)`` and ``Sigma^2(nu) = E m_2 - m_1^t m_1``."""
    seed = Seed.of(seed)
    n = nu.n
    ks = haar_chunks(nu.field, n, inner_samples, seed, partitions)
    strata = nu.chamber_strata(outer_samples, seed.derive(OUTER_STREAM).rng())
    est = crossed_estimate(strata, _chamber_form, ks, _first_second)
    mean = np.real(est.mean)
    iu = np.triu_indices(n)
    m1 = mean[:n]
    m2 = np.empty((n, n))
    m2_se = np.empty((n, n))
    m2[iu] = mean[n:]
    m2[(iu[1], iu[0])] = mean[n:]
    se = np.asarray(est.std_error)
    m2_se[iu] = se[n:]
    m2_se[(iu[1], iu[0])] = se[n:]
    sigma2 = m2 - np.outer(m1, m1)
    evals, pd, lmin, kernel = definiteness(sigma2)
    return MeasureMoments(
        m1, se[:n], np.asarray(est.inner_error)[:n], np.asarray(est.outer_error)[:n],
        m2, m2_se, sigma2, evals, pd, lmin, kernel, inner_samples, est.outer_samples)
