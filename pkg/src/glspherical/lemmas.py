"""Randomised verification of the matrix lemmas behind the spherical-function estimates."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .haar import CHUNK, MCEstimate, RunningStats, Seed, haar_batch
from .linalg import (DET_FLOOR, Field, batched_minor_logs, det_identity_check,
                     log_minor_independence_check, raw_minor_coefficients, relabel_distinct_first,
                     stacked_det_check, subsets)

FAULTS = ("glech-det",)


@dataclass(frozen=True)
class NegMomentResult:
    estimate: MCEstimate
    outliers: int
    max_share: float
    running: list

    def as_dict(self):
        return {"estimate": self.estimate.as_dict(), "outliers": self.outliers,
                "max_sample_share": self.max_share,
                "running_mean": [{"samples": s, "mean": m} for s, m in self.running]}


def block_det_neg_moment(field, n: int, r: int, eps: float, samples: int, seed) -> NegMomentResult:
    """Monte Carlo ``int_K |det k_r|^{-2 eps} dk`` with ``k_r`` the leading r x r block.

    Samples with ``|det k_r| < DET_FLOOR`` are excluded and counted as
    outliers. ``max_share`` is the largest single-sample share of the total,
    ``running`` the running mean after each block: a heavy tail shows up as
    jumps in either.
    """
    field = Field.parse(field)
    if not 0 <= eps < 0.5:
        raise ValueError("eps must lie in [0, 1/2)")
    if not 1 <= r <= n:
        raise ValueError(f"need 1 <= r <= n, got r={r}, n={n}")
    rng = Seed.of(seed).rng()
    acc = RunningStats()
    outliers, total, top = 0, 0.0, 0.0
    running = []
    done = 0
    while done < samples:
        b = min(CHUNK, samples - done)
        ks = haar_batch(field, n, b, rng)
        if r == n or eps == 0:
            # |det k| = 1 on K; the integrand is identically one
            vals = np.ones(b)
        else:
            dets = np.abs(np.linalg.det(ks[:, :r, :r]))
            bad = dets < DET_FLOOR
            outliers += int(bad.sum())
            vals = dets[~bad] ** (-2.0 * eps)
        acc.push(vals)
        total += float(vals.sum())
        top = max(top, float(vals.max(initial=0.0)))
        done += b
        running.append((done, float(acc.mean[0])))
    est = acc.estimate(squeeze=True)
    return NegMomentResult(est, outliers, top / total if total else 0.0, running)


@dataclass
class LemmaConfig:
    instances: int = 1000
    dims: tuple = (2, 3, 4)
    fields: tuple = ("real", "complex")
    neg_moment_samples: int = 200_000
    seed: int = 0
    inject_fault: str | None = None


@dataclass
class LemmaResult:
    name: str
    passed: bool
    max_deviation: float
    tolerance: float
    instances: int
    detail: dict = field(default_factory=dict)

    def as_dict(self):
        return asdict(self)


def _ball_rows(field, r, rng):
    """``r`` random rows of length ``r`` inside the closed unit ball."""
    z = rng.standard_normal((r, r))
    if field is Field.COMPLEX:
        z = z + 1j * rng.standard_normal((r, r))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    rad = rng.uniform(0.0, 1.0, (r, 1)) ** (1.0 / (field.d * r))
    return z * rad


def check_pos_coeff(cfg: LemmaConfig, seed: Seed) -> LemmaResult:
    neg = sum_dev = rec_dev = 0.0
    count = 0
    for fi, fname in enumerate(cfg.fields):
        fld = Field.parse(fname)
        for n in cfg.dims:
            rng = seed.derive(fi, n).rng()
            us = haar_batch(fld, n, cfg.instances, rng)
            a = rng.uniform(0.1, 10.0, (cfg.instances, 10, n))
            for r in range(1, n + 1):
                c = raw_minor_coefficients(us, r)
                neg = max(neg, float(-c.min()))
                sum_dev = max(sum_dev, float(np.abs(c.sum(axis=1) - 1).max()))
                prods = np.stack([a[:, :, list(I)].prod(axis=-1) for I in subsets(n, r)], axis=-1)
                recon = np.einsum("bjs,bs->bj", prods, c)
                m = np.swapaxes(us.conj(), -1, -2)[:, None] @ (a[..., :, None] * us[:, None])
                direct = np.exp(batched_minor_logs(m)[..., r - 1])
                rec_dev = max(rec_dev, float(np.abs(recon / direct - 1).max()))
            count += cfg.instances
    passed = neg <= 1e-12 and sum_dev <= 1e-10 and rec_dev <= 1e-9
    return LemmaResult("pos-coeff", passed, max(neg, sum_dev, rec_dev), 1e-10, count,
                       {"min_coefficient_violation": neg, "sum_deviation": sum_dev,
                        "reconstruction_rel_deviation": rec_dev})


def check_glech_det(cfg: LemmaConfig, seed: Seed) -> LemmaResult:
    dev, count = 0.0, 0
    for fi, fname in enumerate(cfg.fields):
        fld = Field.parse(fname)
        for n in cfg.dims:
            us = haar_batch(fld, n, cfg.instances, seed.derive(fi, n).rng())
            if cfg.inject_fault == "glech-det":
                # break unitarity in one corner entry
                us = us.copy()
                us[:, 0, 0] *= 1.5
            for r in range(1, n):
                d1 = np.abs(np.linalg.det(us[:, :r, :r]))
                d2 = np.abs(np.linalg.det(us[:, r:, r:]))
                dev = max(dev, float(np.abs(d1 - d2).max()))
            count += cfg.instances
    return LemmaResult("glech-det", dev <= 1e-10, dev, 1e-10, count,
                       {"fault_injected": cfg.inject_fault == "glech-det"})


def check_det_p(cfg: LemmaConfig, seed: Seed) -> LemmaResult:
    dev, count = 0.0, 0
    for fi, fname in enumerate(cfg.fields):
        fld = Field.parse(fname)
        for r in (1, 2, 3, 4):
            rng = seed.derive(fi, r).rng()
            for _ in range(cfg.instances):
                rows = _ball_rows(fld, r, rng)
                lhs, rhs = stacked_det_check(list(rows))
                dev = max(dev, abs(lhs - rhs))
                count += 1
    return LemmaResult("det-P", dev <= 1e-9, dev, 1e-9, count)


def _det_scale(x):
    """Natural magnitude of ``sum(x) * prod(x_0 - x_j)`` for relative comparison."""
    return float(np.abs(x).sum() * np.prod(np.abs(x[0]) + np.abs(x[1:])))


def check_det_rechnung(cfg: LemmaConfig, seed: Seed) -> LemmaResult:
    dev, count = 0.0, 0
    for n in cfg.dims:
        rng = seed.derive(n).rng()
        for x in rng.uniform(-5.0, 5.0, (cfg.instances, n)):
            lhs, rhs = det_identity_check(x)
            dev = max(dev, abs(lhs - rhs) / _det_scale(x))
            count += 1
    return LemmaResult("det-rechnung", dev <= 1e-9, dev, 1e-9, count)


def check_lin_unab(cfg: LemmaConfig, seed: Seed) -> LemmaResult:
    dev, count, zero = 0.0, 0, 0
    for n in cfg.dims:
        rng = seed.derive(n).rng()
        for a in rng.uniform(-3.0, 3.0, (cfg.instances, n)):
            d = log_minor_independence_check(a)
            x = relabel_distinct_first(a)
            _, rhs = det_identity_check(x)
            dev = max(dev, abs(d - rhs) / _det_scale(x))
            zero += int(d == 0.0)
            count += 1
    return LemmaResult("lin-unab", dev <= 1e-9 and zero == 0, dev, 1e-9, count,
                       {"vanishing_determinants": zero})


def check_int_finite(cfg: LemmaConfig, seed: Seed) -> LemmaResult:
    res = block_det_neg_moment(Field.COMPLEX, 2, 1, 0.25, cfg.neg_moment_samples, seed)
    est = res.estimate
    z = abs(est.mean - 4.0 / 3.0) / est.std_error
    return LemmaResult("int-finite", bool(z <= 4.0), float(abs(est.mean - 4.0 / 3.0)),
                       float(4.0 * est.std_error), est.samples,
                       {"estimate": float(est.mean), "std_error": float(est.std_error),
                        "oracle": 4.0 / 3.0, "z": float(z), "outliers": res.outliers,
                        "max_sample_share": res.max_share})


CHECKS = (("pos-coeff", check_pos_coeff), ("glech-det", check_glech_det), ("det-P", check_det_p),
          ("det-rechnung", check_det_rechnung), ("lin-unab", check_lin_unab),
          ("int-finite", check_int_finite))


def run_lemma_suite(cfg: LemmaConfig | None = None) -> list:
    """Run every lemma check; one :class:`LemmaResult` per lemma."""
    cfg = cfg or LemmaConfig()
    if cfg.inject_fault not in (None,) + FAULTS:
        raise ValueError(f"unknown fault {cfg.inject_fault!r}")
    seed = Seed.of(cfg.seed)
    return [fn(cfg, seed.derive(i)) for i, (_, fn) in enumerate(CHECKS)]
