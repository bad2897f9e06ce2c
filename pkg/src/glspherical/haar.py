"""Haar sampling on U_n(F) and streaming Monte Carlo estimation.

Randomness is organised as seed *streams*: a :class:`Seed` names a
``numpy.random.SeedSequence`` and :meth:`Seed.derive` yields independent child
streams, one per partition. A computation split into ``p`` partitions is
therefore reproducible bit for bit for fixed ``(seed, samples, p)``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteIntegrand
from .linalg import Field, batched_qr

CHUNK = 4096


@dataclass(frozen=True)
class Seed:
    value: int = 0
    stream: int = 0
    path: tuple = field(default=(), repr=False)

    def __post_init__(self):
        for name in ("value", "stream"):
            v = getattr(self, name)
            if not 0 <= int(v) < 2**64:
                raise ValueError(f"seed {name} must be a 64-bit unsigned integer, got {v}")

    @classmethod
    def of(cls, seed) -> "Seed":
        if isinstance(seed, Seed):
            return seed
        if seed is None:
            return cls()
        return cls(int(seed))

    def derive(self, *keys: int) -> "Seed":
        return Seed(self.value, self.stream, self.path + tuple(int(k) for k in keys))

    def sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.value, spawn_key=(self.stream,) + self.path)

    def rng(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.sequence()))


@dataclass(frozen=True)
class MCEstimate:
    """Monte Carlo mean with standard error; fields may be arrays."""

    mean: object
    std_error: object
    samples: int

    def __getitem__(self, idx):
        return MCEstimate(np.asarray(self.mean)[idx], np.asarray(self.std_error)[idx], self.samples)

    def as_dict(self):
        mean = np.asarray(self.mean)
        out = {"std_error": np.asarray(self.std_error).tolist(), "samples": self.samples}
        if np.iscomplexobj(mean):
            out["mean_re"] = mean.real.tolist()
            out["mean_im"] = mean.imag.tolist()
        else:
            out["mean"] = mean.tolist()
        return out


class RunningStats:
    """Single-pass mean and variance over batches (Chan et al. merge).

    Each batch is centred on its first row before averaging, so a constant
    integrand yields exactly zero variance.
    """

    def __init__(self):
        self.count = 0
        self.mean = None
        self.m2 = None

    def push(self, batch):
        batch = np.asarray(batch)
        if batch.ndim == 1:
            batch = batch[:, None]
        b = batch.shape[0]
        if b == 0:
            return self
        shift = batch[0]
        bmean = shift + (batch - shift).mean(axis=0)
        dev = batch - bmean
        bm2 = np.sum((dev * dev.conj()).real, axis=0)
        return self._merge(b, bmean, bm2)

    def merge(self, other: "RunningStats"):
        if other.count:
            self._merge(other.count, other.mean, other.m2)
        return self

    def _merge(self, nb, mb, m2b):
        if self.count == 0:
            self.count, self.mean, self.m2 = nb, mb, m2b
            return self
        na = self.count
        n = na + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * (nb / n)
        self.m2 = self.m2 + m2b + (delta * delta.conj()).real * (na * nb / n)
        self.count = n
        return self

    def estimate(self, squeeze=False) -> MCEstimate:
        if self.count < 2:
            raise ValueError("need at least two samples for a standard error")
        var = self.m2 / (self.count - 1)
        se = np.sqrt(var / self.count)
        mean = self.mean
        if squeeze:
            mean, se = mean[0], se[0]
        return MCEstimate(mean, se, self.count)


def stream_estimate(values, chunk=CHUNK) -> MCEstimate:
    """Streaming estimate over the leading axis of ``values`` in fixed chunks."""
    values = np.asarray(values)
    squeeze = values.ndim == 1
    flat = values.reshape(values.shape[0], -1)
    acc = RunningStats()
    for lo in range(0, flat.shape[0], chunk):
        acc.push(flat[lo:lo + chunk])
    est = acc.estimate()
    shape = values.shape[1:]
    if squeeze:
        return MCEstimate(est.mean[0], est.std_error[0], est.samples)
    return MCEstimate(est.mean.reshape(shape), est.std_error.reshape(shape), est.samples)


def haar_batch(field, n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """``size`` independent Haar unitaries, shape ``(size, n, n)``.

    QR of a Ginibre matrix with the phases of ``diag(R)`` moved into ``Q``.
    Probability-zero rank deficiencies are redrawn.
    """
    field = Field.parse(field)
    out = np.empty((size, n, n), dtype=field.dtype)
    todo = np.arange(size)
    while todo.size:
        z = _ginibre(field, n, todo.size, rng)
        q, r = batched_qr(z)
        d = np.diagonal(r, axis1=-2, axis2=-1)
        mag = np.abs(d)
        ok = np.all(mag > 0, axis=-1)
        ph = d[ok] / mag[ok]
        out[todo[ok]] = q[ok] * ph[:, None, :]
        todo = todo[~ok]
    return out


def _ginibre(field, n, size, rng):
    if field is Field.REAL:
        return rng.standard_normal((size, n, n))
    scale = np.sqrt(0.5)
    return (rng.standard_normal((size, n, n)) + 1j * rng.standard_normal((size, n, n))) * scale


def sample_haar(field, n: int, seed) -> np.ndarray:
    """One Haar-distributed element of U_n(F)."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else Seed.of(seed).rng()
    return haar_batch(field, n, 1, rng)[0]


def partition_sizes(total: int, parts: int):
    parts = max(1, min(int(parts), total)) if total else 1
    base, extra = divmod(total, parts)
    return [base + (i < extra) for i in range(parts)]


def run_partitions(fn, sizes, seed: Seed, threads=None):
    """Call ``fn(size, rng, index)`` for each partition; results in partition order."""
    jobs = [(s, seed.derive(i).rng(), i) for i, s in enumerate(sizes)]
    if len(jobs) == 1 or (threads or 1) <= 1:
        return [fn(*job) for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda job: fn(*job), jobs))


def haar_chunks(field, n: int, samples: int, seed, partitions: int = 1):
    """Yield the Haar sample set block by block, partition by partition.

    Concatenating the blocks gives exactly :func:`haar_sample_set`.
    """
    seed = Seed.of(seed)
    for i, size in enumerate(partition_sizes(samples, partitions)):
        rng = seed.derive(i).rng()
        for lo in range(0, size, CHUNK):
            yield haar_batch(field, n, min(CHUNK, size - lo), rng)


def haar_sample_set(field, n: int, samples: int, seed, partitions: int = 1, threads=None):
    """Deterministic array of Haar samples, concatenated in partition order."""
    seed = Seed.of(seed)

    def draw(size, rng, _):
        parts = []
        for lo in range(0, size, CHUNK):
            parts.append(haar_batch(field, n, min(CHUNK, size - lo), rng))
        return np.concatenate(parts) if parts else np.empty((0, n, n), Field.parse(field).dtype)

    chunks = run_partitions(draw, partition_sizes(samples, partitions), seed, threads or partitions)
    return np.concatenate(chunks)


def haar_expect(f, field, n: int, samples: int, seed, partitions: int = 1,
                threads=None, vectorized=True) -> MCEstimate:
    """Streaming Haar expectation of ``f`` with standard errors.

    ``f`` maps a stack ``(b, n, n)`` of unitaries to ``(b,)`` or ``(b, m)``
    values; with ``vectorized=False`` it is called once per matrix.
    Partial accumulators are merged in partition order.
    """
    if samples < 2:
        raise ValueError("samples must be at least 2")
    seed = Seed.of(seed)

    def work(size, rng, part):
        acc = RunningStats()
        done = 0
        while done < size:
            b = min(CHUNK, size - done)
            ks = haar_batch(field, n, b, rng)
            vals = f(ks) if vectorized else np.array([f(k) for k in ks])
            vals = np.asarray(vals)
            flat = vals.reshape(b, -1)
            bad = ~np.all(np.isfinite(flat), axis=1)
            if np.any(bad):
                i = int(np.argmax(bad))
                raise NonFiniteIntegrand(
                    f"integrand returned {flat[i]} at sample {done + i} of partition {part}",
                    sample_index=(part, done + i), sample=ks[i])
            acc.push(flat)
            done += b
        return acc, vals.shape[1:]

    results = run_partitions(work, partition_sizes(samples, partitions), seed, threads or partitions)
    total = RunningStats()
    for acc, _ in results:
        total.merge(acc)
    shape = results[0][1]
    est = total.estimate()
    if shape == ():
        return MCEstimate(est.mean[0], est.std_error[0], est.samples)
    return MCEstimate(est.mean.reshape(shape), est.std_error.reshape(shape), est.samples)
