"""First-order building blocks: block soft-thresholding, an ADMM for
equality-constrained group sparsity, and an active-set nonnegative
least-squares solver."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def block_soft_threshold(blocks: list[np.ndarray], thresh: float) -> list[np.ndarray]:
    """Proximal map of thresh * sum of block Euclidean norms."""
    out = []
    for b in blocks:
        nrm = np.linalg.norm(b)
        scale = 0.0 if nrm <= thresh else 1.0 - thresh / nrm
        out.append(scale * b)
    return out


def _split_rows(z: np.ndarray, block_rows: int) -> list[np.ndarray]:
    return [z[i : i + block_rows] for i in range(0, z.shape[0], block_rows)]


@dataclass
class AffineGroupLassoResult:
    value: float
    solution: np.ndarray
    residual: float
    iterations: int
    converged: bool


def admm_affine_group_lasso(
    select: np.ndarray,
    rhs: np.ndarray,
    block_rows: int,
    tol: float = 1e-8,
    max_iter: int = 100_000,
    rho: float = 1.0,
) -> AffineGroupLassoResult:
    """Minimize the sum of row-block Frobenius norms of Z subject to
    select @ Z = rhs.

    Z is (K, D) with contiguous blocks of ``block_rows`` rows; ``select`` is
    (R, K). Splitting ADMM: alternate projection onto the affine constraint
    with block soft-thresholding, warm-started from the minimum-norm (equal
    split) solution. Stops once the split gap and the subgradient condition on
    the scaled dual both fall below ``tol``.
    """
    if select.ndim != 2 or rhs.ndim != 2 or select.shape[0] != rhs.shape[0]:
        raise ValueError("need select (R, K) and rhs (R, D)")
    k = select.shape[1]
    if k % block_rows:
        raise ValueError("row count must divide into equal blocks")
    pinv = np.linalg.pinv(select)
    particular = pinv @ rhs

    def project(v: np.ndarray) -> np.ndarray:
        return v - pinv @ (select @ v - rhs)

    z = particular.copy()
    zs = z.copy()
    u = np.zeros_like(z)
    scale = max(1.0, float(np.linalg.norm(rhs)))
    residual = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        z = project(zs - u)
        zs_blocks = block_soft_threshold(_split_rows(z + u, block_rows), 1.0 / rho)
        zs_prev, zs = zs, np.vstack(zs_blocks)
        u += z - zs
        if it % 10 == 0 or it == max_iter:
            split = np.linalg.norm(z - zs) / scale
            drift = rho * np.linalg.norm(zs - zs_prev) / scale
            residual = max(split, drift, _subgrad_residual(z, rho * u, block_rows))
            if residual <= tol:
                break
            # residual balancing, factor-10 rule on the split residuals
            if split > 10 * drift and rho < 1e8:
                rho *= 2.0
                u /= 2.0
            elif drift > 10 * split and rho > 1e-8:
                rho /= 2.0
                u *= 2.0
    value = sum(np.linalg.norm(b) for b in _split_rows(z, block_rows))
    return AffineGroupLassoResult(
        value=float(value),
        solution=z,
        residual=float(residual),
        iterations=it,
        converged=residual <= tol,
    )


def _subgrad_residual(z: np.ndarray, dual: np.ndarray, block_rows: int) -> float:
    """Distance of the dual from the subdifferential of the block-norm sum."""
    worst = 0.0
    for zb, db in zip(_split_rows(z, block_rows), _split_rows(dual, block_rows)):
        nrm = np.linalg.norm(zb)
        if nrm > 1e-12 * max(1.0, np.linalg.norm(z)):
            worst = max(worst, float(np.linalg.norm(db - zb / nrm)))
        else:
            worst = max(worst, max(0.0, float(np.linalg.norm(db)) - 1.0))
    return worst


def nnls_gram(
    gram: np.ndarray,
    target: np.ndarray,
    tol: float = 1e-12,
    max_iter: int | None = None,
) -> np.ndarray:
    """Lawson-Hanson active-set solve of min ||b - A x||^2 over x >= 0, given
    gram = A'A and target = A'b.

    Working on the Gram matrix keeps the inner solves at the size of the
    passive set. Rank-deficient passive sets fall back to least squares.
    """
    n = gram.shape[0]
    if max_iter is None:
        max_iter = 3 * max(n, 10)
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    scale = max(float(np.abs(target).max(initial=0.0)), 1.0)
    for _ in range(max_iter):
        grad = target - gram @ x
        grad[passive] = -np.inf
        j = int(np.argmax(grad))
        if grad[j] <= tol * scale:
            break
        passive[j] = True
        while True:
            idx = np.where(passive)[0]
            sub = np.linalg.lstsq(gram[np.ix_(idx, idx)], target[idx], rcond=None)[0]
            if sub.min(initial=np.inf) > 0:
                x[:] = 0.0
                x[idx] = sub
                break
            cur = x[idx]
            mask = sub <= 0
            steps = cur[mask] / (cur[mask] - sub[mask])
            alpha = steps.min(initial=0.0)
            x[idx] = cur + alpha * (sub - cur)
            drop = idx[x[idx] <= 1e-14 * scale]
            x[drop] = 0.0
            passive[drop] = False
            if not passive.any():
                break
    return x


def nnls(a: np.ndarray, b: np.ndarray, ridge: float = 0.0, **kw) -> np.ndarray:
    """min ||b - A x||^2 + ridge ||x||^2 over x >= 0.

    A small ridge selects the minimum-norm solution among ties.
    """
    gram = a.T @ a
    if ridge:
        gram = gram + ridge * np.eye(gram.shape[0])
    return nnls_gram(gram, a.T @ b, **kw)
