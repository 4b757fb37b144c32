"""Small dense numerical kernels.

Matrices are plain ``numpy.ndarray`` objects of dtype float32 in row-major
(C) order. All functions here are pure: they never mutate their inputs.

The Jacobi solvers iterate in float64 and hand back float32 results; a
float32 iteration cannot reach the 1e-10 off-diagonal stopping rule.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, InvalidInputError
from .validation import as_matrix, check_count

JACOBI_TOL = 1e-10
JACOBI_MAX_SWEEPS = 100


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``s = u @ diag(singular_values) @ v.T``.

    ``v`` holds right singular vectors as columns, ordered by descending
    singular value, with the first nonzero entry of each column positive.
    """

    u: np.ndarray
    singular_values: np.ndarray
    v: np.ndarray
    sweeps: int = 0


def matmul(a, b):
    """Matrix product with a fixed, sequential accumulation order.

    ``out[i, j]`` is accumulated as ``((a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...``
    in float32, which is exactly what a naive triple loop produces. The loop
    runs over the inner dimension only; rows and columns are vectorised.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise InvalidInputError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float32)
    for p in range(a.shape[1]):
        out += a[:, p : p + 1] * b[p : p + 1, :]
    return out


def _round_robin(n):
    """Yield rounds of disjoint (p, q) index pairs covering every pair once.

    Classic circle-method tournament; ``n`` odd gets a bye slot that is
    dropped from the output.
    """
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    for _ in range(m - 1):
        pairs = []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p >= 0 and q >= 0:
                pairs.append((min(p, q), max(p, q)))
        if pairs:
            yield np.array(pairs, dtype=np.intp).T
        players = [players[0], players[-1]] + players[1:-1]


def _fix_signs(v, u=None):
    """Make the first nonzero entry of every column of ``v`` positive."""
    scale = np.max(np.abs(v), axis=0, keepdims=True)
    significant = np.abs(v) > 1e-12 * np.where(scale > 0, scale, 1.0)
    first = np.argmax(significant, axis=0)
    signs = np.sign(v[first, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    v = v * signs
    if u is not None:
        u = u * signs
    return v, u


def _hestenes(a):
    """One-sided Jacobi on a tall float64 matrix. Returns (A @ V, V, sweeps)."""
    n = a.shape[1]
    v = np.eye(n)
    sweeps = 0
    for sweeps in range(1, JACOBI_MAX_SWEEPS + 1):
        worst = 0.0
        for p, q in _round_robin(n):
            ap, aq = a[:, p], a[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            denom = np.sqrt(alpha * beta)
            rel = np.where(denom > 0, np.abs(gamma) / np.where(denom > 0, denom, 1.0), 0.0)
            worst = max(worst, float(rel.max(initial=0.0)))
            active = rel > JACOBI_TOL
            if not active.any():
                continue
            zeta = np.where(active, (beta - alpha) / np.where(active, 2.0 * gamma, 1.0), 0.0)
            t = np.where(active, np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta)), 0.0)
            t[active & (zeta == 0)] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if worst <= JACOBI_TOL:
            break
    return a, v, sweeps


def svd(s):
    """Thin SVD by one-sided (Hestenes) Jacobi with parallel pair ordering."""
    s = as_matrix(s, "s")
    m, n = s.shape
    if m < n:
        t = svd(s.T)
        v, u = _fix_signs(t.u, t.v)
        return SvdResult(u=u, singular_values=t.singular_values, v=v, sweeps=t.sweeps)
    av, v, sweeps = _hestenes(s.astype(np.float64))
    sigma = np.linalg.norm(av, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, av, v = sigma[order], av[:, order], v[:, order]
    u = np.divide(av, sigma, out=np.zeros_like(av), where=sigma > 0)
    v, u = _fix_signs(v, u)
    return SvdResult(
        u=u.astype(np.float32),
        singular_values=sigma.astype(np.float32),
        v=v.astype(np.float32),
        sweeps=sweeps,
    )


def jacobi_eigh(g):
    """Eigen-decomposition of a symmetric matrix by cyclic two-sided Jacobi.

    Returns ``(eigenvalues, eigenvectors)`` in float64, eigenvalues sorted
    descending and eigenvector signs normalised like :func:`svd`.
    """
    a = np.array(g, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("matrix contains NaN or Inf")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    floor = 1e-300 + 1e-18 * np.linalg.norm(a)
    for _ in range(JACOBI_MAX_SWEEPS):
        worst = 0.0
        for p, q in _round_robin(n):
            app, aqq, apq = a[p, p], a[q, q], a[p, q]
            scale = np.sqrt(np.abs(app * aqq))
            rel = np.abs(apq) / np.maximum(scale, floor)
            active = (rel > JACOBI_TOL) & (np.abs(apq) > floor)
            worst = max(worst, float(np.where(np.abs(apq) > floor, rel, 0.0).max(initial=0.0)))
            if not active.any():
                continue
            p, q = p[active], q[active]
            app, aqq, apq = app[active], aqq[active], apq[active]
            tau = (aqq - app) / (2.0 * apq)
            t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            j = np.eye(n)
            j[p, p] = c
            j[q, q] = c
            j[p, q] = s
            j[q, p] = -s
            a = j.T @ a @ j
            v = v @ j
        if worst <= JACOBI_TOL:
            break
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    v, _ = _fix_signs(v[:, order])
    return w[order], v


def right_singular_vectors(s):
    """Right singular basis of a tall matrix via the Gram route (eig of SᵀS).

    Returns ``(singular_values, v)`` with ``v`` square and orthogonal.
    """
    s = as_matrix(s, "s")
    s64 = s.astype(np.float64)
    w, v = jacobi_eigh(s64.T @ s64)
    sigma = np.sqrt(np.clip(w, 0.0, None))
    return sigma.astype(np.float32), v.astype(np.float32)


def rope(x, position, theta_base=10000.0):
    """Rotary position embedding on interleaved pairs ``(x[2i], x[2i+1])``.

    ``x`` may be a single head vector or any array whose last axis is the
    head dimension; ``position`` is a scalar or an array broadcastable to
    ``x.shape[:-1]``.
    """
    x = np.asarray(x, dtype=np.float32)
    d_head = x.shape[-1]
    if d_head % 2:
        raise ConfigurationError(f"RoPE needs an even head dimension, got {d_head}")
    pos = np.asarray(position, dtype=np.float64)[..., None]
    inv_freq = float(theta_base) ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    angles = pos * inv_freq
    cos = np.cos(angles).astype(np.float32)
    sin = np.sin(angles).astype(np.float32)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty(np.broadcast_shapes(x.shape, cos.shape[:-1] + (d_head,)), dtype=np.float32)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def softmax(scores, scale=1.0):
    """Numerically stable softmax of ``scores * scale`` along the last axis."""
    z = np.asarray(scores, dtype=np.float32)
    if z.size == 0 or z.shape[-1] == 0:
        raise InvalidInputError("softmax of an empty array")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("softmax input contains NaN or Inf")
    z = z * np.float32(scale)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def random_orthogonal(dim, seed):
    """Haar-distributed orthogonal matrix: Gaussian sample, QR, sign fix."""
    dim = check_count(dim, "dim", minimum=1)
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return q.astype(np.float32)


def orthogonality_residual(p):
    """``max |P Pᵀ - I|`` computed in float64."""
    p = np.asarray(p, dtype=np.float64)
    return float(np.max(np.abs(p @ p.T - np.eye(p.shape[0]))))


__all__ = [
    "SvdResult",
    "jacobi_eigh",
    "matmul",
    "orthogonality_residual",
    "random_orthogonal",
    "right_singular_vectors",
    "rope",
    "softmax",
    "svd",
]
