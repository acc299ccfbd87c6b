"""Dense symmetric eigendecomposition and the small helpers PCA slicing needs.

Everything here runs in float64 regardless of the dtype of the inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, PreconditionError


@dataclass(frozen=True)
class EigenDecomposition:
    eigenvalues: np.ndarray  # (d,), descending
    eigenvectors: np.ndarray  # (d, d), column j pairs with eigenvalues[j]

    def reconstruct(self) -> np.ndarray:
        q = self.eigenvectors
        return (q * self.eigenvalues) @ q.T


def _round_robin(d: int):
    """Yield d-1 (or d) rounds of disjoint index pairs covering every (p, q) once.

    Circle-method tournament schedule; an odd d gets a phantom player whose
    pairings are dropped.
    """
    players = list(range(d)) + ([-1] if d % 2 else [])
    m = len(players)
    for _ in range(m - 1):
        ps, qs = [], []
        for j in range(m // 2):
            a, b = players[j], players[m - 1 - j]
            if a < 0 or b < 0:
                continue
            ps.append(min(a, b))
            qs.append(max(a, b))
        yield np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)
        players = [players[0], players[-1]] + players[1:-1]


def sym_eig(a, *, tol: float = 1e-13, max_sweeps: int = 60, sym_tol: float = 1e-9) -> EigenDecomposition:
    """Eigendecomposition of a real symmetric matrix by cyclic Jacobi rotations.

    Rotations within one round of the tournament ordering act on disjoint
    index pairs, so they commute and are applied together as vectorized
    column/row updates. Iteration stops once the off-diagonal Frobenius norm
    falls below ``tol`` times the full norm.

    Returns eigenvalues sorted descending with unit-norm eigenvectors as
    columns in the same order.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise PreconditionError(f"sym_eig needs a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise PreconditionError("sym_eig input has non-finite entries")
    asym = np.max(np.abs(a - a.T)) if a.size else 0.0
    if asym > sym_tol:
        raise PreconditionError(f"sym_eig input is not symmetric (max |a - a^T| = {asym:.3e})")
    d = a.shape[0]
    a = 0.5 * (a + a.T)
    v = np.eye(d)
    if d <= 1:
        return EigenDecomposition(np.diag(a).copy(), v)

    total = np.linalg.norm(a)
    if total == 0.0:
        return EigenDecomposition(np.zeros(d), v)
    rounds = list(_round_robin(d))

    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= tol * total:
            break
        for p, q in rounds:
            apq = a[p, q]
            nz = np.abs(apq) > 1e-300
            if not np.any(nz):
                continue
            p, q, apq = p[nz], q[nz], apq[nz]
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t[theta == 0] = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c

            # A <- J^T A J with J = [[c, s], [-s, c]] on each (p, q) plane
            ap, aq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            ap, aq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * ap - s[:, None] * aq
            a[q, :] = s[:, None] * ap + c[:, None] * aq
            a[p, q] = 0.0
            a[q, p] = 0.0

            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
    else:
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off > tol * total:
            raise NumericalError(
                f"Jacobi eigendecomposition of a {d}x{d} matrix did not converge "
                f"in {max_sweeps} sweeps (off-diagonal norm {off:.3e})"
            )

    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return EigenDecomposition(w[order], v[:, order])


def gram_accumulate(acc, x) -> np.ndarray:
    """Return ``acc + x^T x`` in float64; x holds one activation per row."""
    acc = np.asarray(acc, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if acc.ndim != 2 or acc.shape[0] != acc.shape[1]:
        raise PreconditionError(f"accumulator must be square, got {acc.shape}")
    if x.ndim != 2 or x.shape[1] != acc.shape[0]:
        raise PreconditionError(f"rows of width {x.shape[-1]} do not match a {acc.shape[0]}x{acc.shape[0]} accumulator")
    return acc + x.T @ x


def random_orthogonal(d: int, seed: int = 0) -> np.ndarray:
    """Haar-distributed d x d orthogonal matrix, deterministic in ``seed``."""
    if d < 1:
        raise PreconditionError("random_orthogonal needs d >= 1")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    # sign fix makes the distribution Haar rather than QR-biased
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def truncation_error(x, q, k: int) -> float:
    """Squared Frobenius error of reconstructing x from its first k rotated coordinates."""
    x = np.asarray(x, dtype=np.float64)
    p = np.asarray(q, dtype=np.float64)[:, :k]
    resid = x - (x @ p) @ p.T
    return float(np.sum(resid * resid))
