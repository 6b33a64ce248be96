"""Fixed-margin convex programs over lifted features, their first-order
solvers, and stationarity certification of candidate solutions."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve

from .data import Dataset
from .gating import ContextFunction
from .models import (
    FRelu,
    GatedModel,
    ReluNet,
    ShallowGLN,
    TwoLayerGLN,
    model_degree,
    scale_model,
    scores,
    w_to_zeta,
)
from .norms import QuadFormM
from .prox import nnls_gram

GROUP_LASSO = "group_lasso"
QUAD_M = "quad_m"
PLAIN_L2 = "plain_l2"

FAMILIES = ("gln", "frelu", "shallow", "plain")

_DEFAULT_KIND = {
    "gln": GROUP_LASSO,
    "frelu": GROUP_LASSO,
    "shallow": PLAIN_L2,
    "plain": PLAIN_L2,
}


class NotSeparatedError(ValueError):
    """A candidate with a nonpositive margin cannot be margin-normalized."""


@dataclass
class LiftedProblem:
    """Sparse margin program: rows of ``phi`` place y_n * x_n into the variable
    blocks selected by the sample's context, so phi @ zeta reproduces the
    per-sample scores.

    ``groups`` partitions the flat variable index range into the blocks whose
    norms the group-sparsity objective sums. ``dropped_rows`` lists samples
    whose constraint can never hold (frozen-gate rows with no open gates).
    """

    phi: sp.csr_matrix
    groups: list[np.ndarray]
    kind: str
    family: str
    dim: int
    units: int = 0
    contexts: int = 0
    context_keys: tuple[tuple[int, ...], ...] = ()
    dropped_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n(self) -> int:
        return self.phi.shape[0]

    @property
    def size(self) -> int:
        return self.phi.shape[1]

    def qform(self) -> QuadFormM | None:
        if self.kind != QUAD_M:
            return None
        return QuadFormM(units=self.units, contexts=self.contexts, dim=self.dim)


@dataclass
class SolverResult:
    zeta: np.ndarray
    lambdas: np.ndarray
    objective: float
    feas_residual: float
    stat_residual: float
    compl_residual: float
    iterations: int
    status: str

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(
                {
                    "objective": self.objective,
                    "feas_residual": self.feas_residual,
                    "stat_residual": self.stat_residual,
                    "compl_residual": self.compl_residual,
                    "iterations": self.iterations,
                    "status": self.status,
                },
                indent=1,
            )
        )


@dataclass
class KKTReport:
    """Stationarity certificate for a margin-normalized candidate."""

    support: dict[tuple[int, ...], np.ndarray]
    lambdas: np.ndarray
    stat_residual: float
    compl_residual: float
    min_margin: float

    @property
    def support_indices(self) -> np.ndarray:
        if not self.support:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(list(self.support.values())))


def lift(
    dataset: Dataset,
    family: str,
    kind: str | None = None,
) -> LiftedProblem:
    """Build the margin program for a dataset with assigned contexts.

    Families: ``gln`` places each sample into the H blocks its context picks,
    ``frelu`` into the open-gate blocks only, ``shallow`` into one block per
    reachable global context, ``plain`` is the single-block standard program.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    kind = kind or _DEFAULT_KIND[family]
    if kind not in (GROUP_LASSO, QUAD_M, PLAIN_L2):
        raise ValueError(f"unknown objective kind {kind!r}")
    if kind == QUAD_M and family != "gln":
        raise ValueError("the quadratic table norm applies to the gln family only")
    X, y = dataset.inputs, dataset.labels
    n, d = X.shape
    ctx = dataset.contexts
    if family != "plain" and ctx is None:
        raise ValueError(f"family {family!r} needs per-sample contexts")

    rows: list[int] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    dropped: list[int] = []
    col_range = np.arange(d)

    if family == "plain":
        groups = [np.arange(d)]
        for i in range(n):
            rows.extend([i] * d)
            cols.append(col_range)
            vals.append(y[i] * X[i])
        units = contexts = 0
        keys: tuple[tuple[int, ...], ...] = ()
        size = d
    elif family == "gln":
        units = ctx.shape[1]
        contexts = int(ctx.max())
        if ctx.min() < 1:
            raise ValueError("gln contexts must be >= 1")
        size = units * contexts * d
        groups = [np.arange(h * contexts * d, (h + 1) * contexts * d) for h in range(units)]
        for i in range(n):
            for h in range(units):
                start = (h * contexts + (ctx[i, h] - 1)) * d
                rows.extend([i] * d)
                cols.append(start + col_range)
                vals.append(y[i] * X[i])
        keys = ()
    elif family == "frelu":
        units = ctx.shape[1]
        if ctx.min() < 0 or ctx.max() > 1:
            raise ValueError("frelu contexts must be 0/1 gate patterns")
        contexts = 2
        size = units * d
        groups = [np.arange(h * d, (h + 1) * d) for h in range(units)]
        for i in range(n):
            open_gates = np.where(ctx[i] == 1)[0]
            if open_gates.size == 0:
                dropped.append(i)
                continue
            for h in open_gates:
                rows.extend([i] * d)
                cols.append(h * d + col_range)
                vals.append(y[i] * X[i])
        keys = ()
    else:  # shallow
        units = ctx.shape[1]
        contexts = int(ctx.max())
        seen: dict[tuple[int, ...], int] = {}
        for i in range(n):
            seen.setdefault(tuple(int(g) for g in ctx[i]), len(seen))
        keys = tuple(seen)
        size = len(keys) * d
        groups = [np.arange(k * d, (k + 1) * d) for k in range(len(keys))]
        for i in range(n):
            block = seen[tuple(int(g) for g in ctx[i])]
            rows.extend([i] * d)
            cols.append(block * d + col_range)
            vals.append(y[i] * X[i])

    if dropped:
        warnings.warn(
            f"{len(dropped)} sample(s) have no open gates; their margin "
            "constraints are unsatisfiable and were excluded",
            stacklevel=2,
        )
        keep = np.setdiff1d(np.arange(n), np.array(dropped))
        remap = {int(old): new for new, old in enumerate(keep)}
        rows = [remap[r] for r in rows]
        n = keep.size

    phi = sp.csr_matrix(
        (np.concatenate(vals) if vals else np.zeros(0),
         (np.array(rows, dtype=np.int64),
          np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64))),
        shape=(n, size),
    )
    return LiftedProblem(
        phi=phi,
        groups=groups,
        kind=kind,
        family=family,
        dim=d,
        units=units,
        contexts=contexts,
        context_keys=keys,
        dropped_rows=np.array(dropped, dtype=np.int64),
    )


def _group_stat_residual(
    zeta: np.ndarray, dual_head: np.ndarray, groups: list[np.ndarray]
) -> float:
    """Distance of phi' lambda from the subdifferential of the block-norm sum."""
    worst = 0.0
    scale = max(1.0, float(np.linalg.norm(zeta)))
    for g in groups:
        zg = zeta[g]
        hg = dual_head[g]
        nrm = np.linalg.norm(zg)
        if nrm > 1e-10 * scale:
            worst = max(worst, float(np.linalg.norm(hg - zg / nrm)))
        else:
            worst = max(worst, max(0.0, float(np.linalg.norm(hg)) - 1.0))
    return worst


def _farkas_infeasible(phi: sp.csr_matrix, lam: np.ndarray, tol: float = 1e-8) -> bool:
    """A normalized nonnegative combination annihilating phi' certifies that no
    point satisfies every margin constraint."""
    total = lam.sum()
    if total <= 0:
        return False
    mu = lam / total
    return float(np.abs(phi.T @ mu).max(initial=0.0)) <= tol


def solve_group_lasso_margin(
    problem: LiftedProblem,
    tol: float = 1e-8,
    max_iter: int = 50_000,
) -> SolverResult:
    """Minimize the sum of block norms subject to unit margins.

    ADMM with three blocks: an equality-coupled copy for the margin slack
    (dual ascent keeps the margin multipliers nonnegative), a consensus copy
    soft-thresholded per group, and a quadratic subproblem solved through a
    cached factorization of I + phi phi'. Terminates when primal feasibility,
    the stationarity residual, and complementary slackness all fall below
    ``tol``.
    """
    if problem.kind != GROUP_LASSO:
        raise ValueError(f"expected a {GROUP_LASSO} problem, got {problem.kind}")
    phi = problem.phi
    n, p = phi.shape
    if n == 0:
        raise ValueError("no usable margin constraints")
    gram = (phi @ phi.T).toarray()
    factor = cho_factor(gram + np.eye(n), lower=True)

    zeta = np.zeros(p)
    z = np.zeros(p)
    s = np.zeros(n)
    y_dual = np.zeros(n)
    u = np.zeros(p)
    rho = 1.0
    check_every = 25

    feas = stat = compl = np.inf
    status = "max_iter"
    it = 0
    z_prev = z.copy()
    s_prev = s.copy()
    for it in range(1, max_iter + 1):
        a = s + 1.0 - y_dual
        q = phi.T @ a + (z - u)
        zeta = q - phi.T @ cho_solve(factor, phi @ q)
        margins_in = phi @ zeta
        s = np.maximum(0.0, margins_in - 1.0 + y_dual)
        v = zeta + u
        z_prev, s_prev2 = z, s_prev
        z = _block_shrink(v, problem.groups, 1.0 / rho)
        y_dual += margins_in - s - 1.0
        u += zeta - z
        if it % check_every == 0 or it == max_iter:
            lam = np.maximum(rho * y_dual, 0.0)
            margins = phi @ z
            obj = sum(float(np.linalg.norm(z[g])) for g in problem.groups)
            feas = float(np.maximum(0.0, 1.0 - margins).max(initial=0.0))
            stat = _group_stat_residual(z, phi.T @ lam, problem.groups)
            compl = float(np.abs(lam * (1.0 - margins)).max(initial=0.0)) / (1.0 + obj)
            if max(feas, stat, compl) <= tol:
                status = "optimal"
                break
            if feas > max(10 * tol, 1e-6) and _farkas_infeasible(phi, lam):
                status = "infeasible"
                break
            # residual balancing, factor-10 rule
            pri = np.sqrt(
                float(np.linalg.norm(zeta - z)) ** 2
                + float(np.linalg.norm(margins_in - s - 1.0)) ** 2
            )
            dua = rho * np.sqrt(
                float(np.linalg.norm(z - z_prev)) ** 2
                + float(np.linalg.norm(s - s_prev2)) ** 2
            )
            if pri > 10 * dua and rho < 1e8:
                rho *= 2.0
                y_dual /= 2.0
                u /= 2.0
            elif dua > 10 * pri and rho > 1e-8:
                rho /= 2.0
                y_dual *= 2.0
                u *= 2.0
        s_prev = s.copy()

    lam = np.maximum(rho * y_dual, 0.0)
    margins = phi @ z
    obj = sum(float(np.linalg.norm(z[g])) for g in problem.groups)
    feas = float(np.maximum(0.0, 1.0 - margins).max(initial=0.0))
    stat = _group_stat_residual(z, phi.T @ lam, problem.groups)
    compl = float(np.abs(lam * (1.0 - margins)).max(initial=0.0)) / (1.0 + obj)
    if status not in ("optimal", "infeasible"):
        status = "optimal" if max(feas, stat, compl) <= tol else "max_iter"
    return SolverResult(
        zeta=z,
        lambdas=lam,
        objective=obj,
        feas_residual=feas,
        stat_residual=stat,
        compl_residual=compl,
        iterations=it,
        status=status,
    )


def _block_shrink(v: np.ndarray, groups: list[np.ndarray], thresh: float) -> np.ndarray:
    out = np.zeros_like(v)
    for g in groups:
        block = v[g]
        nrm = np.linalg.norm(block)
        if nrm > thresh:
            out[g] = (1.0 - thresh / nrm) * block
    return out


def solve_quad_margin(
    problem: LiftedProblem,
    tol: float = 1e-8,
    max_iter: int = 50_000,
    init_zeta: np.ndarray | None = None,
) -> SolverResult:
    """Minimize (1/2) zeta' Q zeta subject to unit margins, Q the scaled table
    quadratic form or the identity, by projected gradient ascent on the
    nonnegative dual.

    For the table form the gauge null space is removed by working with the
    pseudo-inverse on its orthogonal complement; the gauge component of
    ``init_zeta``, which affects neither margins nor objective, is carried
    through to the returned point.
    """
    if problem.kind not in (QUAD_M, PLAIN_L2):
        raise ValueError(f"expected a quadratic problem, got {problem.kind}")
    phi = problem.phi
    n, p = phi.shape
    if n == 0:
        raise ValueError("no usable margin constraints")
    qform = problem.qform()

    def pinv_cols(mat: np.ndarray) -> np.ndarray:
        # mat is (p, k); apply Q^+ column by column
        if qform is None:
            return mat
        out = np.empty_like(mat)
        for j in range(mat.shape[1]):
            out[:, j] = qform.pinv_apply(
                mat[:, j].reshape(qform.units, qform.contexts, qform.dim)
            ).ravel()
        return out

    phit = phi.T.toarray() if sp.issparse(phi) else phi.T
    kq = pinv_cols(phit)  # (p, n) = Q^+ phi'
    kernel = phi @ kq  # (n, n)
    kernel = np.asarray(kernel)

    # largest eigenvalue by power iteration fixes the safe step size
    v = np.ones(n) / np.sqrt(n)
    lip = 1.0
    for _ in range(200):
        w = kernel @ v
        nrm = np.linalg.norm(w)
        if nrm == 0:
            break
        v = w / nrm
        lip = nrm
    step = 1.0 / max(lip, 1e-12)

    lam = np.zeros(n)
    feas = stat = compl = np.inf
    status = "max_iter"
    it = 0
    for it in range(1, max_iter + 1):
        grad = 1.0 - kernel @ lam
        lam_new = np.maximum(0.0, lam + step * grad)
        moved = np.linalg.norm(lam_new - lam)
        lam = lam_new
        if it % 25 == 0 or it == max_iter or moved == 0.0:
            margins = kernel @ lam
            feas = float(np.maximum(0.0, 1.0 - margins).max(initial=0.0))
            obj = 0.5 * float(lam @ margins)
            gap = float(lam @ (1.0 - margins))
            pg_res = float(
                np.linalg.norm(lam - np.maximum(0.0, lam + step * (1.0 - margins)))
            ) / step
            compl = abs(gap) / (1.0 + abs(obj))
            stat = pg_res / (1.0 + float(np.linalg.norm(lam)))
            if max(feas, stat, compl) <= tol:
                status = "optimal"
                break
            if feas > max(10 * tol, 1e-6) and lam.sum() > 1e8 and _farkas_infeasible(
                phi, lam
            ):
                status = "infeasible"
                break
            if moved == 0.0 and feas > tol:
                status = "infeasible" if _farkas_infeasible(phi, lam) else "max_iter"
                break

    zeta = kq @ lam
    if init_zeta is not None and qform is not None:
        zeta = zeta + qform.gauge_part(
            init_zeta.reshape(qform.units, qform.contexts, qform.dim)
        ).ravel()
    margins = phi @ zeta
    obj = _quad_objective(problem, zeta)
    feas = float(np.maximum(0.0, 1.0 - margins).max(initial=0.0))
    compl = float(abs(lam @ (1.0 - margins))) / (1.0 + abs(obj))
    head = qform.apply(zeta.reshape(qform.units, qform.contexts, qform.dim)).ravel() * qform.scale if qform else zeta
    stat = float(np.linalg.norm(head - phi.T @ lam)) / (1.0 + float(np.linalg.norm(lam)))
    if status not in ("optimal", "infeasible"):
        status = "optimal" if max(feas, stat, compl) <= tol else "max_iter"
    return SolverResult(
        zeta=zeta,
        lambdas=lam,
        objective=obj,
        feas_residual=feas,
        stat_residual=stat,
        compl_residual=compl,
        iterations=it,
        status=status,
    )


def _quad_objective(problem: LiftedProblem, zeta: np.ndarray) -> float:
    qform = problem.qform()
    if qform is None:
        return 0.5 * float(zeta @ zeta)
    return 0.5 * qform.quad(zeta.reshape(qform.units, qform.contexts, qform.dim))


def dual_objective(problem: LiftedProblem, result: SolverResult) -> float:
    """Lagrangian dual value at the returned multipliers; matches the primal
    objective at an optimum."""
    return float(result.lambdas.sum()) - _quad_objective(problem, result.zeta) * 2 + _quad_objective(problem, result.zeta)


def margin_normalize(
    candidate: GatedModel | np.ndarray,
    dataset: Dataset,
    family: str | None = None,
) -> GatedModel | np.ndarray:
    """Scale a candidate so every context's minimum margin is at least one,
    with equality in the tightest context.

    The scale is max over contexts of m^(-1/degree): degree 2 for two-layer
    weights, 1 for zeta-style parameterizations. Raises
    :class:`NotSeparatedError` when any context's margin is nonpositive.
    """
    margins, groups = _context_margins(candidate, dataset, family)
    mins = np.array([margins[g].min() for g in groups.values()])
    if mins.min(initial=np.inf) <= 0:
        raise NotSeparatedError(
            f"not separated: minimum per-context margin {mins.min():.3e} <= 0"
        )
    degree = model_degree(candidate) if not isinstance(candidate, np.ndarray) else 1
    alpha = float((mins ** (-1.0 / degree)).max())
    if isinstance(candidate, np.ndarray):
        return alpha * candidate
    return scale_model(candidate, alpha)


def _context_margins(candidate, dataset: Dataset, family: str | None):
    """Per-sample margins plus sample indices grouped by global context."""
    if isinstance(candidate, np.ndarray):
        if family != "plain":
            raise ValueError("raw vectors are only supported for the plain family")
        score = dataset.inputs @ candidate
        ctx_keys = [(0,)] * dataset.n
    else:
        score = scores(candidate, dataset.inputs, dataset.contexts)
        if isinstance(candidate, ReluNet):
            ctx_keys = [(0,)] * dataset.n
        else:
            ctx_keys = [tuple(int(g) for g in c) for c in dataset.contexts]
    margins = dataset.labels * score
    groups: dict[tuple[int, ...], np.ndarray] = {}
    order: dict[tuple[int, ...], list[int]] = {}
    for i, key in enumerate(ctx_keys):
        order.setdefault(key, []).append(i)
    for key, idx in order.items():
        groups[key] = np.array(idx, dtype=np.int64)
    return margins, groups


def kkt_certify(
    candidate: GatedModel | np.ndarray,
    dataset: Dataset,
    family: str,
    margin_tol: float = 1e-4,
    dual_tol: float = 1e-10,
) -> KKTReport:
    """Certify stationarity of a margin-normalized candidate.

    Per context, the support set collects samples within ``margin_tol``
    (relative) of that context's minimum margin. Nonnegative multipliers on
    the support are fitted by least squares to the stationarity equation of
    the matching margin program (block norms rescale their blocks by the block
    norm; plain and per-context programs use the raw sum of support vectors).
    A small ridge keeps the fitted multipliers minimum-norm among ties.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    zeta, target_blocks = _stationarity_target(candidate, family)
    margins, groups = _context_margins(candidate, dataset, family)
    if not np.all(np.isfinite(margins)) or margins.size == 0:
        raise ValueError("empty or non-finite margins; support set would be empty")

    support: dict[tuple[int, ...], np.ndarray] = {}
    for key, idx in groups.items():
        mmin = margins[idx].min()
        keep = idx[np.abs(margins[idx] - mmin) <= margin_tol * abs(mmin)]
        support[key] = keep
    sup = np.unique(np.concatenate(list(support.values())))
    if sup.size == 0:
        raise ValueError("empty support set; margin_tol too small")

    problem = lift(dataset, family=family, kind=_DEFAULT_KIND[family])
    a = problem.phi[sup].T.toarray()  # (p, |S|)
    if target_blocks is not None:
        for g, nrm in target_blocks:
            a[g] *= nrm
    target = zeta
    gram = a.T @ a
    ridge = dual_tol * max(float(np.trace(gram)) / max(gram.shape[0], 1), 1.0)
    lam_s = nnls_gram(gram + ridge * np.eye(gram.shape[0]), a.T @ target)
    resid = target - a @ lam_s
    denom = float(np.linalg.norm(target))
    stat = float(np.linalg.norm(resid)) / max(denom, 1e-300)
    lam = np.zeros(dataset.n)
    lam[sup] = lam_s
    compl = float(np.abs(lam_s * (margins[sup] - 1.0)).max(initial=0.0))
    return KKTReport(
        support=support,
        lambdas=lam,
        stat_residual=stat,
        compl_residual=compl,
        min_margin=float(margins.min()),
    )


def _stationarity_target(candidate, family: str):
    """Flat target vector and per-block rescalings for the stationarity fit."""
    if family == "plain":
        if isinstance(candidate, np.ndarray):
            return candidate.copy(), None
        raise ValueError("plain certification takes a raw weight vector")
    if family == "gln":
        zeta3 = w_to_zeta(candidate) if isinstance(candidate, TwoLayerGLN) else np.asarray(candidate)
        units, contexts, dim = zeta3.shape
        flat = zeta3.ravel().copy()
        blocks = []
        for h in range(units):
            g = np.arange(h * contexts * dim, (h + 1) * contexts * dim)
            blocks.append((g, float(np.linalg.norm(zeta3[h]))))
        return flat, blocks
    if family == "frelu":
        zeta2 = candidate.zeta if isinstance(candidate, FRelu) else np.asarray(candidate)
        units, dim = zeta2.shape
        flat = zeta2.ravel().copy()
        blocks = [
            (np.arange(h * dim, (h + 1) * dim), float(np.linalg.norm(zeta2[h])))
            for h in range(units)
        ]
        return flat, blocks
    if family == "shallow":
        if not isinstance(candidate, ShallowGLN):
            raise ValueError("shallow certification takes a ShallowGLN")
        return candidate.betas.ravel().copy(), None
    raise ValueError(f"unknown family {family!r}")


def dump_problem(problem: LiftedProblem, path: str | Path) -> None:
    """Plain-text dump: dimensions, objective kind, group blocks, then one
    ``row col value`` triplet per stored entry."""
    coo = problem.phi.tocoo()
    with open(path, "w") as fh:
        fh.write(f"kind {problem.kind}\n")
        fh.write(f"family {problem.family}\n")
        fh.write(f"rows {problem.n} cols {problem.size} dim {problem.dim}\n")
        fh.write(f"units {problem.units} contexts {problem.contexts}\n")
        for i, g in enumerate(problem.groups):
            fh.write(f"group {i} {g[0]} {g[-1] + 1}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {v:.17g}\n")
