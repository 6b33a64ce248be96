"""Halfspace context functions: sampling, evaluation, and gate extraction."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset

NORMAL_STD = 36.0
CUTOFF_STD = 9.0


@dataclass(frozen=True)
class HalfspaceGate:
    """One separating hyperplane: fires 1 when normal @ x - cutoff >= 0."""

    normal: np.ndarray
    cutoff: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.normal)) or not np.any(self.normal):
            raise ValueError("gate normal must be finite and nonzero")


class ContextFunction:
    """Per-unit banks of halfspace gates mapping an input to a global context.

    Each of the ``units`` hidden units owns ``log2(contexts)`` gates whose
    joint sign pattern selects one of ``contexts`` local contexts, encoded as
    1 + sum_k 2**k * gate_k (so single-gate units give contexts {1, 2}).
    Immutable after construction; evaluation is reentrant.
    """

    def __init__(self, gates: list[list[HalfspaceGate]]):
        if not gates or not gates[0]:
            raise ValueError("need at least one unit with one gate")
        per_unit = len(gates[0])
        if any(len(g) != per_unit for g in gates):
            raise ValueError("every unit must carry the same number of gates")
        self._gates = tuple(tuple(g) for g in gates)
        self.units = len(gates)
        self.gates_per_unit = per_unit
        self.contexts = 2**per_unit
        self.dim = gates[0][0].normal.shape[0]
        # (units, gates_per_unit, dim) and (units, gates_per_unit) views
        self._normals = np.stack([[g.normal for g in unit] for unit in gates])
        self._cutoffs = np.array([[g.cutoff for g in unit] for unit in gates])

    @property
    def gates(self) -> tuple[tuple[HalfspaceGate, ...], ...]:
        return self._gates

    def gate_bits(self, inputs: np.ndarray) -> np.ndarray:
        """Raw gate activations for (N, D) inputs: (N, units, gates_per_unit) in {0,1}."""
        inputs = np.atleast_2d(inputs)
        if inputs.shape[1] != self.dim:
            raise ValueError(f"expected dimension {self.dim}, got {inputs.shape[1]}")
        proj = np.einsum("nd,ukd->nuk", inputs, self._normals)
        return (proj - self._cutoffs[None, :, :] >= 0).astype(np.int64)

    def assign(self, inputs: np.ndarray) -> np.ndarray:
        """Global contexts for (N, D) inputs: (N, units) integers in 1..contexts."""
        bits = self.gate_bits(inputs)
        weights = 2 ** np.arange(self.gates_per_unit)
        return 1 + bits @ weights


def median_cutoff(projections: np.ndarray) -> float:
    """Cutoff splitting the projections in half: midpoint of the ceil(N/2)-th
    and following order statistics (1-indexed)."""
    s = np.sort(np.asarray(projections, dtype=np.float64))
    n = s.shape[0]
    if n < 2:
        raise ValueError("median cutoff needs at least two points")
    k = (n + 1) // 2
    return 0.5 * (s[k - 1] + s[k])


def sample_contexts(
    dim: int,
    units: int,
    contexts: int,
    data: Dataset | None = None,
    median: bool = False,
    seed: int = 0,
) -> ContextFunction:
    """Sample a context function with Normal(0, 36^2) hyperplane normals and
    Normal(0, 9^2) cutoffs.

    ``contexts`` must be a power of two; units with more than two contexts
    compose multiple hyperplanes. With ``median`` set, every gate's cutoff is
    replaced by the median cutoff so each side holds half the training data.
    """
    if contexts < 2 or contexts & (contexts - 1):
        raise ValueError(f"contexts must be a power of two >= 2, got {contexts}")
    if median and data is None:
        raise ValueError("median cutoffs require training data")
    per_unit = contexts.bit_length() - 1
    rng = np.random.default_rng(seed)
    normals = rng.normal(0.0, NORMAL_STD, size=(units, per_unit, dim))
    cutoffs = rng.normal(0.0, CUTOFF_STD, size=(units, per_unit))
    gates: list[list[HalfspaceGate]] = []
    for u in range(units):
        unit = []
        for k in range(per_unit):
            cut = cutoffs[u, k]
            if median:
                cut = median_cutoff(data.inputs @ normals[u, k])
            unit.append(HalfspaceGate(normal=normals[u, k], cutoff=float(cut)))
        gates.append(unit)
    return ContextFunction(gates)


def assign_context(cf: ContextFunction, x: np.ndarray) -> np.ndarray:
    """Global context of a single D-vector: (units,) integers in 1..contexts."""
    return cf.assign(x[None, :])[0]


def assign_dataset(cf: ContextFunction, dataset: Dataset) -> Dataset:
    """Attach per-sample global contexts to a dataset."""
    return dataset.with_contexts(cf.assign(dataset.inputs))


def relu_gates(weights: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Active-unit pattern of a ReLU first layer: 1 where the pre-activation is
    strictly positive, 0 otherwise (the zero branch contributes nothing)."""
    inputs = np.atleast_2d(inputs)
    if inputs.shape[1] != weights.shape[1]:
        raise ValueError(
            f"expected dimension {weights.shape[1]}, got {inputs.shape[1]}"
        )
    return (inputs @ weights.T > 0).astype(np.int64)


def save_context_function(cf: ContextFunction, path: str | Path) -> None:
    """Plain-text dump, one line per gate: ``unit, cutoff, normal components``."""
    with open(path, "w") as fh:
        for u, unit in enumerate(cf.gates):
            for gate in unit:
                comps = ", ".join(f"{v:.17g}" for v in gate.normal)
                fh.write(f"{u}, {gate.cutoff:.17g}, {comps}\n")


def load_context_function(path: str | Path) -> ContextFunction:
    per_unit: dict[int, list[HalfspaceGate]] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        unit = int(parts[0])
        cutoff = float(parts[1])
        normal = np.array([float(p) for p in parts[2:]])
        per_unit.setdefault(unit, []).append(HalfspaceGate(normal, cutoff))
    gates = [per_unit[u] for u in sorted(per_unit)]
    return ContextFunction(gates)
