"""Model families: two-layer and shallow gated linear networks, ReLU networks,
and frozen-gate ReLU networks, with per-context predictors, losses, gradients."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.special import expit

BETA_TABLE_CAP = 4096

LOSS_KINDS = ("exponential", "logistic")


@dataclass
class TwoLayerGLN:
    """First-layer tensor w1 (H, C, D) and readout w2 (H,). Predictors are
    degree-2 homogeneous in the weights."""

    w1: np.ndarray
    w2: np.ndarray

    def __post_init__(self):
        if self.w1.ndim != 3 or self.w2.shape != (self.w1.shape[0],):
            raise ValueError(
                f"inconsistent shapes w1 {self.w1.shape}, w2 {self.w2.shape}"
            )

    @property
    def units(self) -> int:
        return self.w1.shape[0]

    @property
    def contexts(self) -> int:
        return self.w1.shape[1]

    @property
    def dim(self) -> int:
        return self.w1.shape[2]


@dataclass
class ShallowGLN:
    """An independent linear predictor per materialized global context.

    ``context_keys`` lists the context tuples backing the rows of ``betas``;
    contexts outside the table predict zero.
    """

    context_keys: tuple[tuple[int, ...], ...]
    betas: np.ndarray

    def __post_init__(self):
        if self.betas.shape[0] != len(self.context_keys):
            raise ValueError("one beta row per context key required")
        self._index = {k: i for i, k in enumerate(self.context_keys)}

    @property
    def dim(self) -> int:
        return self.betas.shape[1]

    def row_of(self, gamma: tuple[int, ...]) -> int | None:
        return self._index.get(tuple(int(g) for g in gamma))


@dataclass
class FRelu:
    """Frozen-gate ReLU network stored directly in its zeta form (H, D);
    the closed-gate branch of every unit is identically zero."""

    zeta: np.ndarray

    def __post_init__(self):
        if self.zeta.ndim != 2:
            raise ValueError(f"zeta must be (H, D), got {self.zeta.shape}")

    @property
    def units(self) -> int:
        return self.zeta.shape[0]

    @property
    def dim(self) -> int:
        return self.zeta.shape[1]


@dataclass
class ReluNet:
    """First layer (H, D) with ReLU units and a linear readout (H,)."""

    weights: np.ndarray
    readout: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 2 or self.readout.shape != (self.weights.shape[0],):
            raise ValueError(
                f"inconsistent shapes weights {self.weights.shape}, readout {self.readout.shape}"
            )

    @property
    def units(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


GatedModel = TwoLayerGLN | ShallowGLN | FRelu | ReluNet


def model_degree(model: GatedModel) -> int:
    """Homogeneity degree of the score in the model's weights."""
    return 2 if isinstance(model, TwoLayerGLN) else 1


def weight_arrays(model: GatedModel) -> dict[str, np.ndarray]:
    return {f.name: getattr(model, f.name) for f in fields(model) if f.name != "context_keys"}


def copy_model(model: GatedModel) -> GatedModel:
    kw = {k: v.copy() for k, v in weight_arrays(model).items()}
    if isinstance(model, ShallowGLN):
        kw["context_keys"] = model.context_keys
    return type(model)(**kw)


def scale_model(model: GatedModel, alpha: float) -> GatedModel:
    kw = {k: alpha * v for k, v in weight_arrays(model).items()}
    if isinstance(model, ShallowGLN):
        kw["context_keys"] = model.context_keys
    return type(model)(**kw)


def flatten_weights(model: GatedModel) -> np.ndarray:
    return np.concatenate([v.ravel() for v in weight_arrays(model).values()])


def gln_beta(model: TwoLayerGLN, gamma: np.ndarray) -> np.ndarray:
    """Linear predictor selected by a global context: sum_h w2[h] * w1[h, gamma_h]."""
    gamma = np.asarray(gamma, dtype=np.int64)
    if gamma.shape != (model.units,):
        raise ValueError(f"context must have {model.units} entries")
    if gamma.min() < 1 or gamma.max() > model.contexts:
        raise ValueError(f"context entries must lie in 1..{model.contexts}")
    picked = model.w1[np.arange(model.units), gamma - 1]
    return model.w2 @ picked


@dataclass(frozen=True)
class BetaTable:
    """All per-context predictors of a width-H, C-context model, ordered by
    itertools.product(range(1, C+1), repeat=H)."""

    units: int
    contexts: int
    betas: np.ndarray

    def __post_init__(self):
        if self.betas.shape[0] != self.contexts**self.units:
            raise ValueError("need one predictor per global context")

    @property
    def dim(self) -> int:
        return self.betas.shape[1]

    def index(self, gamma) -> int:
        idx = 0
        for g in gamma:
            if not 1 <= g <= self.contexts:
                raise ValueError(f"context entry {g} out of range 1..{self.contexts}")
            idx = idx * self.contexts + (int(g) - 1)
        return idx

    def vector(self, gamma) -> np.ndarray:
        return self.betas[self.index(gamma)]

    def keys(self):
        return itertools.product(range(1, self.contexts + 1), repeat=self.units)


def beta_table(model: TwoLayerGLN, cap: int = BETA_TABLE_CAP) -> BetaTable:
    """Materialize every context's predictor. Refuses when C**H exceeds ``cap``;
    use :func:`gln_beta` on demand instead."""
    total = model.contexts**model.units
    if total > cap:
        raise ValueError(f"{total} contexts exceed materialization cap {cap}")
    grids = np.meshgrid(*[np.arange(model.contexts)] * model.units, indexing="ij")
    gammas = np.stack([g.ravel() for g in grids], axis=1)  # 0-based, product order
    betas = np.zeros((total, model.dim))
    for h in range(model.units):
        betas += model.w2[h] * model.w1[h, gammas[:, h]]
    return BetaTable(units=model.units, contexts=model.contexts, betas=betas)


def scores(model: GatedModel, inputs: np.ndarray, contexts: np.ndarray | None) -> np.ndarray:
    """Scores for (N, D) inputs under per-sample global contexts (N, H).

    ReLU networks compute their own gating and ignore ``contexts``.
    """
    inputs = np.atleast_2d(inputs)
    n = inputs.shape[0]
    if isinstance(model, ReluNet):
        hidden = np.maximum(inputs @ model.weights.T, 0.0)
        return hidden @ model.readout
    if contexts is None:
        raise ValueError("gated models need per-sample contexts")
    contexts = np.asarray(contexts, dtype=np.int64)
    if contexts.shape != (n, model_units(model)):
        raise ValueError(f"contexts must be (N, {model_units(model)})")
    if isinstance(model, TwoLayerGLN):
        if contexts.min() < 1 or contexts.max() > model.contexts:
            raise ValueError(f"context entries must lie in 1..{model.contexts}")
        out = np.zeros(n)
        rows = np.arange(n)
        for h in range(model.units):
            proj = inputs @ model.w1[h].T  # (N, C)
            out += model.w2[h] * proj[rows, contexts[:, h] - 1]
        return out
    if isinstance(model, FRelu):
        if contexts.min() < 0 or contexts.max() > 1:
            raise ValueError("frozen-gate contexts must be 0/1")
        return ((inputs @ model.zeta.T) * contexts).sum(axis=1)
    if isinstance(model, ShallowGLN):
        out = np.zeros(n)
        for i in range(n):
            row = model.row_of(tuple(contexts[i]))
            if row is not None:
                out[i] = model.betas[row] @ inputs[i]
        return out
    raise TypeError(f"unsupported model type {type(model)!r}")


def model_units(model: GatedModel) -> int:
    if isinstance(model, ShallowGLN):
        return len(model.context_keys[0]) if model.context_keys else 0
    return model.units


def forward(model: GatedModel, x: np.ndarray, gamma: np.ndarray | None = None) -> float:
    """Score of one input under one global context."""
    ctx = None if gamma is None else np.asarray(gamma)[None, :]
    return float(scores(model, x[None, :], ctx)[0])


def loss_values(margins: np.ndarray, loss_kind: str) -> np.ndarray:
    if loss_kind == "exponential":
        return np.exp(-margins)
    if loss_kind == "logistic":
        return np.logaddexp(0.0, -margins)
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def loss_slopes(margins: np.ndarray, loss_kind: str) -> np.ndarray:
    """Derivative of the per-sample loss in its margin argument."""
    if loss_kind == "exponential":
        return -np.exp(-margins)
    if loss_kind == "logistic":
        return -expit(-margins)
    raise ValueError(f"unknown loss kind {loss_kind!r}")


class GradWorkspace:
    """Precomputed context masks so repeated gradient calls skip the grouping."""

    def __init__(self, model: GatedModel, dataset):
        self.masks = None
        self.shallow_rows = None
        ctx = dataset.contexts
        if isinstance(model, TwoLayerGLN):
            self.masks = [
                [np.where(ctx[:, h] == c + 1)[0] for c in range(model.contexts)]
                for h in range(model.units)
            ]
        elif isinstance(model, ShallowGLN):
            rows = np.full(dataset.n, -1, dtype=np.int64)
            for i in range(dataset.n):
                r = model.row_of(tuple(ctx[i]))
                rows[i] = -1 if r is None else r
            self.shallow_rows = rows


def loss_and_grad(
    model: GatedModel,
    dataset,
    loss_kind: str,
    workspace: GradWorkspace | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Total loss sum_n l(y_n * score_n) and exact gradients per weight array.

    The loss total is accumulated with compensated summation so late-training
    values far below machine epsilon times N remain meaningful.
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    X, y, ctx = dataset.inputs, dataset.labels, dataset.contexts
    if ctx is None and not isinstance(model, ReluNet):
        raise ValueError("gated models need a dataset with contexts")
    margins = y * scores(model, X, ctx)
    loss = math.fsum(loss_values(margins, loss_kind))
    resid = loss_slopes(margins, loss_kind) * y  # dL/dscore_n

    if isinstance(model, TwoLayerGLN):
        ws = workspace or GradWorkspace(model, dataset)
        rows = np.arange(dataset.n)
        g1 = np.zeros_like(model.w1)
        g2 = np.zeros_like(model.w2)
        for h in range(model.units):
            proj = X @ model.w1[h].T
            g2[h] = resid @ proj[rows, ctx[:, h] - 1]
            for c, mask in enumerate(ws.masks[h]):
                if mask.size:
                    g1[h, c] = model.w2[h] * (resid[mask] @ X[mask])
        return loss, {"w1": g1, "w2": g2}
    if isinstance(model, FRelu):
        g = (ctx * resid[:, None]).T @ X
        return loss, {"zeta": g}
    if isinstance(model, ShallowGLN):
        ws = workspace or GradWorkspace(model, dataset)
        g = np.zeros_like(model.betas)
        valid = ws.shallow_rows >= 0
        np.add.at(g, ws.shallow_rows[valid], resid[valid, None] * X[valid])
        return loss, {"betas": g}
    if isinstance(model, ReluNet):
        pre = X @ model.weights.T
        hidden = np.maximum(pre, 0.0)
        g_read = hidden.T @ resid
        gate = (pre > 0).astype(np.float64) * resid[:, None]
        g_w = model.readout[:, None] * (gate.T @ X)
        return loss, {"weights": g_w, "readout": g_read}
    raise TypeError(f"unsupported model type {type(model)!r}")


def w_to_zeta(model: TwoLayerGLN) -> np.ndarray:
    """Collapse the two layers into the per-unit products (H, C, D)."""
    return model.w2[:, None, None] * model.w1


def zeta_to_w(zeta: np.ndarray) -> TwoLayerGLN:
    """Balanced two-layer factorization: |w2_h| = ||w1_h|| = sqrt(||zeta_h||),
    with zero blocks mapping to zero factors."""
    zeta = np.asarray(zeta, dtype=np.float64)
    if zeta.ndim != 3:
        raise ValueError(f"zeta must be (H, C, D), got {zeta.shape}")
    if not np.all(np.isfinite(zeta)):
        raise ValueError("zeta must be finite")
    units = zeta.shape[0]
    w1 = np.zeros_like(zeta)
    w2 = np.zeros(units)
    for h in range(units):
        mag = np.linalg.norm(zeta[h])
        if mag > 0:
            w2[h] = np.sqrt(mag)
            w1[h] = zeta[h] / np.sqrt(mag)
    return TwoLayerGLN(w1=w1, w2=w2)


def frelu_from_relu(net: ReluNet) -> FRelu:
    """Snapshot a ReLU network into its frozen-gate form: zeta_h = readout_h * w_h.

    Paired with the net's own gate pattern this reproduces the ReLU outputs at
    the freezing instant.
    """
    return FRelu(zeta=net.readout[:, None] * net.weights)


def save_model(model: GatedModel, path: str | Path, loss_kind: str | None = None,
               context_function: str | None = None) -> None:
    """JSON checkpoint: family, shapes, weights at 17 significant digits."""
    payload: dict = {"family": type(model).__name__, "schema": 1}
    if loss_kind:
        payload["loss_kind"] = loss_kind
    if context_function:
        payload["context_function"] = context_function
    for name, arr in weight_arrays(model).items():
        payload[name] = {
            "shape": list(arr.shape),
            "values": [f"{v:.17g}" for v in arr.ravel()],
        }
    if isinstance(model, ShallowGLN):
        payload["context_keys"] = [list(k) for k in model.context_keys]
    Path(path).write_text(json.dumps(payload, indent=1))


def load_model(path: str | Path) -> GatedModel:
    payload = json.loads(Path(path).read_text())
    family = payload["family"]
    kinds = {c.__name__: c for c in (TwoLayerGLN, ShallowGLN, FRelu, ReluNet)}
    if family not in kinds:
        raise ValueError(f"unknown model family {family!r}")
    kw = {}
    for f in fields(kinds[family]):
        if f.name == "context_keys":
            kw[f.name] = tuple(tuple(k) for k in payload["context_keys"])
        else:
            spec = payload[f.name]
            kw[f.name] = np.array(
                [float(v) for v in spec["values"]]
            ).reshape(spec["shape"])
    return kinds[family](**kw)
