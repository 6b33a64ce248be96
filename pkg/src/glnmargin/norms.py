"""Norms induced on per-context predictors: the group-sparsity norm of deep
gated linear networks (variational and closed form), the frozen-gate ReLU
norm, the squared predictor-table norm as a quadratic form in zeta, and the
context-sharing consistency constraints."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import BetaTable
from .prox import admm_affine_group_lasso


class InfeasibleBetaError(ValueError):
    """A predictor table violating the context-sharing constraints cannot be
    produced by shared first-layer weights."""


@dataclass(frozen=True)
class QuadFormM:
    """The predictor-table squared norm as a quadratic form in zeta.

    For zeta of shape (H, C, D), summing ||beta_gamma||^2 over all C**H global
    contexts equals scale * <zeta, M zeta> with scale = C**(H-2) and
    M[(h,c,d),(h',c',d')] = delta_dd' * (1 + C*delta_hh'*delta_cc' - delta_hh').

    M acts per input dimension with three invariant subspaces:

    * the all-ones direction over (h, c), eigenvalue C*H;
    * block-constant, zero-sum-across-units directions, eigenvalue 0 (these
      are exactly the gauge shifts that leave every predictor unchanged);
    * directions whose within-unit sums vanish, eigenvalue C.

    All operations below use this structure and never materialize M.
    """

    units: int
    contexts: int
    dim: int

    @property
    def scale(self) -> float:
        return float(self.contexts) ** (self.units - 2)

    def _check(self, zeta: np.ndarray) -> np.ndarray:
        zeta = np.asarray(zeta, dtype=np.float64)
        if zeta.shape != (self.units, self.contexts, self.dim):
            raise ValueError(
                f"zeta must be {(self.units, self.contexts, self.dim)}, got {zeta.shape}"
            )
        return zeta

    def apply(self, zeta: np.ndarray) -> np.ndarray:
        """M @ zeta (without the C**(H-2) scale)."""
        zeta = self._check(zeta)
        total = zeta.sum(axis=(0, 1))
        unit_sums = zeta.sum(axis=1)
        return total[None, None, :] + self.contexts * zeta - unit_sums[:, None, :]

    def quad(self, zeta: np.ndarray) -> float:
        """scale * <zeta, M zeta>, the squared norm of the full predictor table."""
        zeta = self._check(zeta)
        total = zeta.sum(axis=(0, 1))
        unit_sums = zeta.sum(axis=1)
        raw = (
            np.dot(total, total)
            + self.contexts * float((zeta**2).sum())
            - float((unit_sums**2).sum())
        )
        return self.scale * raw

    def _decompose(self, zeta: np.ndarray):
        unit_means = zeta.mean(axis=1)
        grand = unit_means.mean(axis=0)
        gauge = unit_means - grand[None, :]
        resid = zeta - unit_means[:, None, :]
        return grand, gauge, resid

    def gauge_part(self, zeta: np.ndarray) -> np.ndarray:
        """Projection onto the null space: per-unit constant shifts summing to
        zero across units."""
        zeta = self._check(zeta)
        _, gauge, _ = self._decompose(zeta)
        return np.broadcast_to(gauge[:, None, :], zeta.shape).copy()

    def pinv_apply(self, zeta: np.ndarray) -> np.ndarray:
        """Pseudo-inverse of the scaled form, restricted to the complement of
        the gauge directions."""
        zeta = self._check(zeta)
        grand, _, resid = self._decompose(zeta)
        c, h = float(self.contexts), float(self.units)
        lead = grand / (self.scale * c * h)
        rest = resid / (self.scale * c)
        return np.broadcast_to(lead[None, None, :], zeta.shape) + rest

    def sqrt_apply(self, zeta: np.ndarray) -> np.ndarray:
        """Symmetric PSD square root of the scaled form."""
        zeta = self._check(zeta)
        grand, _, resid = self._decompose(zeta)
        c, h = float(self.contexts), float(self.units)
        lead = grand * np.sqrt(self.scale * c * h)
        rest = resid * np.sqrt(self.scale * c)
        return np.broadcast_to(lead[None, None, :], zeta.shape) + rest


def l2_norm_beta(zeta: np.ndarray) -> float:
    """Squared Euclidean norm of the predictor table parameterized by zeta
    (H, C, D), computed through the block structure of the quadratic form."""
    zeta = np.asarray(zeta, dtype=np.float64)
    if zeta.ndim != 3:
        raise ValueError(f"zeta must be (H, C, D), got {zeta.shape}")
    form = QuadFormM(units=zeta.shape[0], contexts=zeta.shape[1], dim=zeta.shape[2])
    return form.quad(zeta)


def frelu_norm(zeta: np.ndarray) -> float:
    """Sum of row norms of the frozen-gate parameterization (H, D)."""
    zeta = np.asarray(zeta, dtype=np.float64)
    if zeta.ndim != 2:
        raise ValueError(f"zeta must be (H, D), got {zeta.shape}")
    if not np.all(np.isfinite(zeta)):
        raise ValueError("zeta must be finite")
    return float(np.linalg.norm(zeta, axis=1).sum())


@dataclass(frozen=True)
class EquivarianceReport:
    max_violation: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_violation <= self.tol


def check_equivariance(table: BetaTable, tol: float = 1e-10) -> EquivarianceReport:
    """Largest violation of the context-sharing constraints: for every unit h
    and local contexts c != c', the difference between predictors that differ
    only in unit h's context must not depend on the shared contexts."""
    cube = table.betas.reshape((table.contexts,) * table.units + (table.dim,))
    worst = 0.0
    for h in range(table.units):
        base = np.take(cube, 0, axis=h)
        for c in range(1, table.contexts):
            diff = np.take(cube, c, axis=h) - base
            flat = diff.reshape(-1, table.dim)
            dev = flat - flat[0]
            if dev.size:
                worst = max(worst, float(np.linalg.norm(dev, axis=1).max()))
    return EquivarianceReport(max_violation=worst, tol=tol)


def free_context_set(units: int, contexts: int) -> list[tuple[int, ...]]:
    """The (C-1)H+1 contexts with at most one unit away from local context 1."""
    out = [tuple([1] * units)]
    for h in range(units):
        for c in range(2, contexts + 1):
            gamma = [1] * units
            gamma[h] = c
            out.append(tuple(gamma))
    return out


def complete_predictors(
    free: dict[tuple[int, ...], np.ndarray], units: int, contexts: int
) -> BetaTable:
    """Extend predictors given on the free context set to the full table.

    Walking units left to right, a context whose last non-1 entry sits at unit
    h with value c is filled as beta[single(c, h)] + beta[gamma with that entry
    reset to 1] - beta[all-ones]; the result satisfies the context-sharing
    constraints exactly.
    """
    expected = free_context_set(units, contexts)
    if set(free) != set(expected):
        raise ValueError(
            f"free set must be the {len(expected)} contexts with at most one"
            f" non-1 entry, got {len(free)} keys"
        )
    dim = next(iter(free.values())).shape[0]
    ones = tuple([1] * units)
    table: dict[tuple[int, ...], np.ndarray] = {k: np.asarray(v, dtype=np.float64) for k, v in free.items()}
    keys = sorted(
        itertools.product(range(1, contexts + 1), repeat=units),
        key=lambda g: sum(x != 1 for x in g),
    )
    for gamma in keys:
        if gamma in table:
            continue
        h = max(i for i, g in enumerate(gamma) if g != 1)
        single = [1] * units
        single[h] = gamma[h]
        reduced = list(gamma)
        reduced[h] = 1
        table[gamma] = table[tuple(single)] + table[tuple(reduced)] - table[ones]
    betas = np.zeros((contexts**units, dim))
    out = BetaTable(units=units, contexts=contexts, betas=betas)
    for gamma, vec in table.items():
        betas[out.index(gamma)] = vec
    return out


def _corner(table: BetaTable, *gamma: int) -> np.ndarray:
    return table.vector(gamma)


@dataclass(frozen=True)
class VariationalNorm:
    value: float
    zeta: np.ndarray
    residual: float
    iterations: int


def gln_norm_variational(
    table: BetaTable, tol: float = 1e-8, max_iter: int = 100_000
) -> VariationalNorm:
    """Minimum over decompositions beta_gamma = sum_h zeta[h, gamma_h] of the
    sum of per-unit block norms: the group-sparsity norm gradient descent
    drives deep gated linear networks toward.

    The minimizing zeta need not be unique but the value is. Raises
    :class:`InfeasibleBetaError` when no decomposition exists.
    """
    scale = max(1.0, float(np.linalg.norm(table.betas, axis=1).max(initial=0.0)))
    report = check_equivariance(table, tol=10 * max(tol, 1e-9) * scale)
    if not report.ok:
        raise InfeasibleBetaError(
            f"predictor table violates context-sharing constraints by {report.max_violation:.3e}"
        )
    h, c = table.units, table.contexts
    select = np.zeros((c**h, h * c))
    for row, gamma in enumerate(table.keys()):
        for unit, local in enumerate(gamma):
            select[row, unit * c + (local - 1)] = 1.0
    result = admm_affine_group_lasso(
        select, table.betas, block_rows=c, tol=tol, max_iter=max_iter
    )
    zeta = result.solution.reshape(h, c, table.dim)
    return VariationalNorm(
        value=result.value,
        zeta=zeta,
        residual=result.residual,
        iterations=result.iterations,
    )


@dataclass(frozen=True)
class ClosedNorm2x2:
    value: float
    alpha: float


def gln_norm_closed_2x2(table: BetaTable) -> ClosedNorm2x2:
    """Closed form of the table norm for two units with two contexts each:

        sqrt((||b11 - b12|| + ||b11 - b21||)^2 + ||b12 + b21||^2)

    together with the interpolation weight alpha = ||b11 - b21|| / (||b11 -
    b12|| + ||b11 - b21||), defined as 1/2 when both differences vanish. The
    value is sqrt(2) times the variational minimum; the fixed factor changes
    no minimizer.
    """
    if table.units != 2 or table.contexts != 2:
        raise ValueError("closed form needs exactly two units with two contexts")
    b11 = _corner(table, 1, 1)
    b12 = _corner(table, 1, 2)
    b21 = _corner(table, 2, 1)
    d12 = np.linalg.norm(b11 - b12)
    d21 = np.linalg.norm(b11 - b21)
    cross = np.linalg.norm(b12 + b21)
    value = float(np.sqrt((d12 + d21) ** 2 + cross**2))
    alpha = 0.5 if d12 + d21 == 0 else float(d21 / (d12 + d21))
    return ClosedNorm2x2(value=value, alpha=alpha)


def gln_norm_pair_form(table: BetaTable) -> float:
    """Equivalent squared closed form: the table's squared Euclidean norm plus
    half the sum over contexts of the products of distances to both context
    neighbors."""
    if table.units != 2 or table.contexts != 2:
        raise ValueError("pair form needs exactly two units with two contexts")
    sq = float((table.betas**2).sum())
    cross = 0.0
    for i, j in itertools.product((1, 2), repeat=2):
        b = _corner(table, i, j)
        flip_i = _corner(table, 3 - i, j)
        flip_j = _corner(table, i, 3 - j)
        cross += float(np.linalg.norm(b - flip_i) * np.linalg.norm(b - flip_j))
    return sq + 0.5 * cross


def write_norm_report(path: str | Path, value: float, alpha: float | None = None,
                      residual: float | None = None, iterations: int | None = None) -> None:
    payload = {"value": value}
    if alpha is not None:
        payload["alpha"] = alpha
    if residual is not None:
        payload["residual"] = residual
    if iterations is not None:
        payload["iterations"] = iterations
    Path(path).write_text(json.dumps(payload, indent=1))


def write_beta_table_csv(table: BetaTable, path: str | Path) -> None:
    """CSV rows ``gamma_tuple,beta_components...`` in table order."""
    with open(path, "w") as fh:
        comps = ",".join(f"beta_{i}" for i in range(table.dim))
        fh.write(f"gamma_tuple,{comps}\n")
        for gamma in table.keys():
            vec = table.vector(gamma)
            tag = "".join(str(g) for g in gamma)
            fh.write(tag + "," + ",".join(f"{v:.17g}" for v in vec) + "\n")
