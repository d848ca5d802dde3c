"""Dense linear-algebra kernels.

The SVD is a one-sided (Hestenes) Jacobi iteration run on the triangular
factor of a thin QR decomposition.  Rotations are applied in round-robin
order so every round rotates ``p/2`` disjoint column pairs at once.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

JACOBI_TOL = 1e-12
MAX_SWEEPS = 80
# rows of vt are unit vectors, so at least one entry exceeds 1/sqrt(d)
_SIGN_TOL = 1e-8


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.vt


def as_matrix(x, name: str = "x") -> np.ndarray:
    """Validate and return ``x`` as a finite 2-D float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"{name} must have at least one row and column, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def _round_robin(p: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings for one Jacobi sweep: p-1 rounds of disjoint (i, j) pairs."""
    n = p + (p % 2)
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        pairs = [(players[i], players[n - 1 - i]) for i in range(n // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a < p and b < p]
        if pairs:
            idx = np.array(pairs, dtype=np.intp)
            rounds.append((idx[:, 0], idx[:, 1]))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi(a: np.ndarray, tol: float = JACOBI_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonalise the columns of square ``a``.

    Returns ``(w, j)`` with ``a @ j = w``, ``j`` orthogonal and the columns of
    ``w`` mutually orthogonal.
    """
    p = a.shape[1]
    # row i holds column i of w followed by column i of j
    cols = np.hstack([a.T, np.eye(p)])
    if p > 1:
        rounds = _round_robin(p)
        for _ in range(MAX_SWEEPS):
            off = 0.0
            for I, J in rounds:
                wi, wj = cols[I, :p], cols[J, :p]
                alpha = np.einsum("ij,ij->i", wi, wi)
                beta = np.einsum("ij,ij->i", wj, wj)
                gamma = np.einsum("ij,ij->i", wi, wj)
                scale = np.sqrt(alpha * beta)
                active = (scale > 0) & (np.abs(gamma) > tol * scale)
                if not active.any():
                    continue
                off = max(off, float(np.max(np.abs(gamma[active]) / scale[active])))
                I, J = I[active], J[active]
                gamma = gamma[active]
                zeta = (beta[active] - alpha[active]) / (2.0 * gamma)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
                c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
                s = c * t[:, None]
                ci, cj = cols[I], cols[J]
                cols[I] = c * ci - s * cj
                cols[J] = s * ci + c * cj
            if off <= tol:
                break
    return cols[:, :p].T.copy(), cols[:, p:].T.copy()


def _complete_columns(q: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace the columns of ``q`` not flagged ``good`` by an orthonormal
    completion of the good ones (deterministic: projected axis vectors,
    largest residual first)."""
    q = q.copy()
    p = q.shape[0]
    basis = q[:, good]
    for col in np.flatnonzero(~good):
        resid = np.eye(p)
        for _ in range(2):
            resid -= basis @ (basis.T @ resid)
        norms = np.linalg.norm(resid, axis=0)
        e = resid[:, int(np.argmax(norms))] / norms.max()
        basis = np.column_stack([basis, e])
        q[:, col] = e
    return q


def _fix_signs(u: np.ndarray, vt: np.ndarray) -> None:
    for row in range(vt.shape[0]):
        nz = np.flatnonzero(np.abs(vt[row]) > _SIGN_TOL)
        if nz.size and vt[row, nz[0]] < 0:
            vt[row] *= -1.0
            u[:, row] *= -1.0


def _svd_full(x: np.ndarray) -> SvdResult:
    n, d = x.shape
    tall = n >= d
    # normalise so squared column norms neither underflow nor overflow
    scale = float(np.abs(x).max())
    if scale > 0:
        x = x / scale
    q, r = np.linalg.qr(x if tall else x.T, mode="reduced")
    w, j = _jacobi(r)
    sigma = np.linalg.norm(w, axis=0)
    p = sigma.size
    smax = sigma.max(initial=0.0)
    good = sigma > (p * np.finfo(float).eps * smax if smax > 0 else np.inf)
    dirs = np.zeros_like(w)
    dirs[:, good] = w[:, good] / sigma[good]
    dirs = _complete_columns(dirs, good)
    sigma = np.where(good, sigma, 0.0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    if tall:
        u = (q @ dirs)[:, order]
        vt = j[:, order].T.copy()
    else:
        u = j[:, order].copy()
        vt = (q @ dirs)[:, order].T.copy()
    _fix_signs(u, vt)
    return SvdResult(u=u, sigma=sigma * scale, vt=vt)


def svd_truncated(x, k: int) -> SvdResult:
    """Top-``k`` singular triplets of ``x``.

    Right-singular vectors are returned as the rows of ``vt`` with their
    first nonzero coordinate made positive, so the result is deterministic.
    """
    x = as_matrix(x)
    kmax = min(x.shape)
    if not 1 <= k <= kmax:
        raise ValueError(f"k must be in [1, {kmax}], got {k}")
    full = _svd_full(x)
    return SvdResult(u=full.u[:, :k].copy(), sigma=full.sigma[:k].copy(), vt=full.vt[:k].copy())


def svd_randomized(x, k: int, oversample: int = 5, seed: int = 0, n_iter: int = 1) -> SvdResult:
    """Randomized range-finder SVD with ``n_iter`` power iterations."""
    x = as_matrix(x)
    kmax = min(x.shape)
    if k < 1 or oversample < 0 or k + oversample > kmax:
        raise ValueError(f"need 1 <= k and k + oversample <= {kmax}, got k={k}, oversample={oversample}")
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal((x.shape[1], k + oversample))
    q, _ = np.linalg.qr(x @ omega)
    for _ in range(n_iter):
        z, _ = np.linalg.qr(x.T @ q)
        q, _ = np.linalg.qr(x @ z)
    small = _svd_full(q.T @ x)
    u = q @ small.u[:, :k]
    return SvdResult(u=u, sigma=small.sigma[:k].copy(), vt=small.vt[:k].copy())


def component_cosine_similarity(v_prev, v_new) -> np.ndarray:
    """Absolute cosine similarity between matching rows of two component matrices."""
    a = np.asarray(v_prev, dtype=np.float64)
    b = np.asarray(v_new, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("zero-norm component row")
    cos = np.abs(np.einsum("ij,ij->i", a, b)) / (na * nb)
    return np.clip(cos, 0.0, 1.0)


def random_orthogonal(d: int, seed: int) -> np.ndarray:
    """Haar-distributed orthogonal ``d x d`` matrix."""
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def principal_angles(v1, v2) -> np.ndarray:
    """Principal angles (radians) between the row spaces of two orthonormal-row matrices."""
    a = np.asarray(v1, dtype=np.float64)
    b = np.asarray(v2, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError("row spaces live in different dimensions")
    cos = _svd_full(a @ b.T).sigma
    # sine form stays accurate for tiny angles
    resid = b - (b @ a.T) @ a
    sin = np.sort(_svd_full(resid).sigma)[: min(a.shape[0], b.shape[0])] if resid.any() else np.zeros(min(a.shape[0], b.shape[0]))
    cos = np.clip(cos[: sin.size], 0.0, 1.0)
    return np.where(cos > np.sqrt(0.5), np.arcsin(np.clip(sin, 0.0, 1.0)), np.arccos(cos))
