"""Dense linear algebra over R and C for principal minors and singular spectra.

Matrices are plain numpy arrays. Batched variants operate on stacks of shape
``(..., n, n)``.
"""
from __future__ import annotations

import enum
import itertools

import numpy as np

from .errors import FactorizationFailure, SingularInput

DET_FLOOR = 1e-150
COEF_TOL = 1e-12


class Field(enum.Enum):
    REAL = "real"
    COMPLEX = "complex"

    @property
    def d(self) -> int:
        """Dimension over R."""
        return 1 if self is Field.REAL else 2

    @property
    def dtype(self):
        return np.float64 if self is Field.REAL else np.complex128

    @classmethod
    def parse(cls, value) -> "Field":
        if isinstance(value, Field):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown field {value!r}; expected 'real' or 'complex'") from None


def unitary_tol(n: int) -> float:
    return 1e-12 * n


def unitarity_defect(u) -> float:
    u = np.asarray(u)
    n = u.shape[-1]
    return float(np.linalg.norm(u.conj().T @ u - np.eye(n)))


def check_unitary(u, tol=None):
    u = np.asarray(u)
    if u.ndim != 2 or u.shape[0] != u.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {u.shape}")
    tol = unitary_tol(u.shape[0]) if tol is None else tol
    defect = unitarity_defect(u)
    if not defect <= tol:
        raise ValueError(f"matrix is not unitary: ||u*u - I||_F = {defect:.3e} > {tol:.3e}")
    return u


def gram(g):
    """Return ``g g*``."""
    g = np.asarray(g)
    return g @ np.swapaxes(g, -1, -2).conj()


def principal_minor_logs(p) -> np.ndarray:
    """Logs of the leading principal minors of a positive definite matrix.

    Computed from the Cholesky factor ``p = L L*`` as running sums of
    ``2 ln L[j, j]``, so no minor is ever formed explicitly.

    Raises :class:`FactorizationFailure` when ``p`` is not numerically
    positive definite.
    """
    p = np.asarray(p)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise FactorizationFailure("matrix has non-finite entries")
    if not np.array_equal(p, p.conj().T):
        raise ValueError("matrix is not Hermitian as stored")
    return batched_minor_logs(p[None])[0]


def batched_minor_logs(p) -> np.ndarray:
    """Leading log-minors for a stack of Hermitian positive definite matrices.

    Only the lower triangle is read.
    """
    p = np.asarray(p)
    try:
        chol = np.linalg.cholesky(p)
    except np.linalg.LinAlgError:
        bad = _first_failing(p)
        raise FactorizationFailure(
            f"Cholesky factorization failed at stack index {bad}: matrix is not "
            "numerically positive definite", index=bad) from None
    diag = np.real(np.diagonal(chol, axis1=-2, axis2=-1))
    return np.cumsum(2.0 * np.log(diag), axis=-1)


def _first_failing(p):
    flat = p.reshape((-1,) + p.shape[-2:])
    for i, m in enumerate(flat):
        try:
            np.linalg.cholesky(m)
        except np.linalg.LinAlgError:
            return int(i)
    return None


def batched_qr(a):
    """QR of a stack ``(b, n, n)``; the diagonal of ``r`` carries arbitrary phases.

    ``n = 2`` uses a closed form that is elementwise over the stack and avoids
    the per-matrix overhead of LAPACK's batched QR; larger ``n`` uses LAPACK.
    """
    a = np.asarray(a)
    if a.shape[-1] != 2:
        return np.linalg.qr(a)
    c0, c1 = a[:, :, 0], a[:, :, 1]
    norm = np.sqrt(np.sum((c0 * c0.conj()).real, axis=1))
    safe = np.where(norm > 0, norm, 1.0)
    q0 = np.where((norm > 0)[:, None], c0 / safe[:, None], np.array([1.0, 0.0]))
    q1 = np.stack([-q0[:, 1].conj(), q0[:, 0].conj()], axis=1)
    q = np.stack([q0, q1], axis=2)
    r = np.zeros_like(q)
    r[:, 0, 0] = norm
    r[:, 0, 1] = np.sum(q0.conj() * c1, axis=1)
    r[:, 1, 1] = np.sum(q1.conj() * c1, axis=1)
    return q, r


def singular_log_spectrum(g) -> np.ndarray:
    """``ln`` of the singular values of ``g``, descending."""
    g = np.asarray(g)
    if not np.all(np.isfinite(g)):
        raise SingularInput("matrix has non-finite entries")
    s = np.linalg.svd(g, compute_uv=False)
    if s[-1] <= DET_FLOOR:
        raise SingularInput(f"smallest singular value {s[-1]:.3e} below floor {DET_FLOOR:g}")
    return np.log(s)


def subsets(n: int, r: int):
    return list(itertools.combinations(range(n), r))


def minor_coefficients(u, r: int, tol=COEF_TOL) -> dict:
    """Coefficients ``c_I(u) = Delta_r(u* P_I u)`` over all r-subsets ``I``.

    ``Delta_r(u* diag(a) u) = sum_I c_I prod_{i in I} a_i``; the coefficients
    are nonnegative and sum to one. Values within ``tol`` below zero are
    clamped to zero. Keys are 0-based index tuples.
    """
    u = check_unitary(u)
    n = u.shape[0]
    if not 1 <= r <= n:
        raise ValueError(f"need 1 <= r <= n, got r={r}, n={n}")
    raw = raw_minor_coefficients(u[None], r)
    out = {}
    for I, c in zip(subsets(n, r), raw[0]):
        out[I] = 0.0 if -tol <= c < 0.0 else float(c)
    return out


def raw_minor_coefficients(u, r: int) -> np.ndarray:
    """Unclamped ``c_I`` for a stack of unitaries, shape ``(batch, C(n, r))``."""
    u = np.asarray(u)
    n = u.shape[-1]
    out = []
    for I in subsets(n, r):
        rows = u[:, list(I), :]
        # leading r x r block of u* P_I u
        block = rows[:, :, :r].conj().swapaxes(-1, -2) @ rows[:, :, :r]
        out.append(np.real(np.linalg.det(block)))
    return np.stack(out, axis=-1)


def block_det_pair(u, r: int):
    """``(|det u[:r, :r]|, |det u[r:, r:]|)``; equal for unitary ``u``."""
    u = np.asarray(u)
    n = u.shape[0]
    if not 1 <= r <= n - 1:
        raise ValueError(f"need 1 <= r <= n-1, got r={r}, n={n}")
    return abs(np.linalg.det(u[:r, :r])), abs(np.linalg.det(u[r:, r:]))


def swap_partial_sums(x) -> np.ndarray:
    """Matrix with entry ``(r, j) = sum_{l <= r} x[pi_j(l)]``.

    ``pi_j`` transposes indices 0 and j.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    m = np.empty((n, n))
    for j in range(n):
        perm = np.arange(n)
        perm[[0, j]] = perm[[j, 0]]
        m[:, j] = np.cumsum(x[perm])
    return m


def det_identity_check(x):
    """``(det of the swapped partial-sum matrix, sum(x) * prod_{j>0}(x0 - xj))``."""
    x = np.asarray(x, dtype=float)
    lhs = float(np.linalg.det(swap_partial_sums(x)))
    rhs = float(x.sum() * np.prod(x[0] - x[1:]))
    return lhs, rhs


def _ball_root(y):
    """``(I - y* y)^{1/2}`` for a row vector with ``||y|| <= 1``."""
    r = y.shape[0]
    s2 = float(np.vdot(y, y).real)
    outer = np.outer(y.conj(), y)
    if s2 == 0.0:
        return np.eye(r, dtype=outer.dtype)
    # I - y*y has eigenvalue 1 - s2 along y*, 1 elsewhere
    return np.eye(r) - (1.0 - np.sqrt(max(1.0 - s2, 0.0))) / s2 * outer


def ball_map(ys) -> np.ndarray:
    """Stack rows ``y_j (I - y_{j-1}* y_{j-1})^{1/2} ... (I - y_1* y_1)^{1/2}``."""
    ys = [np.asarray(y) for y in ys]
    r = len(ys)
    rows = []
    acc = np.eye(r, dtype=np.result_type(*ys, float))
    for y in ys:
        if y.shape != (r,):
            raise ValueError(f"each row must have length {r}")
        rows.append(y @ acc)
        acc = _ball_root(y) @ acc
    return np.array(rows)


def stacked_det_check(ys):
    """``(|det P(y_1..y_r)|, |det [y_1; ...; y_r]|)``."""
    ys = [np.asarray(y) for y in ys]
    for j, y in enumerate(ys):
        if np.linalg.norm(y) > 1.0 + 1e-12:
            raise ValueError(f"row {j} lies outside the unit ball")
    return abs(np.linalg.det(ball_map(ys))), abs(np.linalg.det(np.array(ys)))


def relabel_distinct_first(a) -> np.ndarray:
    """Move the first entry that differs from all others to position 0.

    Returns ``a`` unchanged when ``a[0]`` is already distinct or when no
    entry is distinct.
    """
    a = np.asarray(a, dtype=float)
    vals, counts = np.unique(a, return_counts=True)
    mult = counts[np.searchsorted(vals, a)]
    if mult[0] == 1 or not np.any(mult == 1):
        return a
    i = int(np.argmax(mult == 1))
    a = a.copy()
    a[[0, i]] = a[[i, 0]]
    return a


def log_minor_independence_check(a) -> float:
    """Determinant of ``(ln Delta_r(k_j* diag(e^a) k_j))_{r,j}``.

    ``k_j`` runs over the permutation matrices swapping coordinates 0 and j,
    applied after :func:`relabel_distinct_first`.
    """
    a = relabel_distinct_first(a)
    n = a.shape[0]
    diag = np.diag(np.exp(a))
    m = np.empty((n, n))
    for j in range(n):
        k = np.eye(n)
        k[[0, j]] = k[[j, 0]]
        m[:, j] = principal_minor_logs(k.T @ diag @ k)
    return float(np.linalg.det(m))
