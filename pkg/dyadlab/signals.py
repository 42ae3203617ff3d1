"""Step functions resolved at the finest lattice level, weights and A2 characteristics."""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from dyadlab.lattice import CubeId, Lattice
from dyadlab.logger import dyadlab_logger as logger
from dyadlab.utils import array_hash, rng_stream, write_csv

WEIGHT_STREAM = 3


@dataclass(frozen=True, eq=False)
class StepFunction:
    lattice: Lattice
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.shape != (self.lattice.n_cells,):
            raise ValueError(
                f"Lattice mismatch: expected {self.lattice.n_cells} cell values, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("Step function values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def integral(self) -> float:
        return float(self.values.sum()) * self.lattice.cell_volume

    def l1_norm(self) -> float:
        return float(np.abs(self.values).sum()) * self.lattice.cell_volume

    def l2_norm(self) -> float:
        return float(np.sqrt(np.sum(self.values**2) * self.lattice.cell_volume))

    def sup_norm(self) -> float:
        return float(np.abs(self.values).max())

    def restrict(self, Q: CubeId) -> "StepFunction":
        mask = np.zeros(self.lattice.n_cells)
        mask[self.lattice.cells(Q)] = 1.0
        return StepFunction(self.lattice, self.values * mask)

    def __add__(self, other: "StepFunction") -> "StepFunction":
        check_same_lattice(self, other)
        return StepFunction(self.lattice, self.values + other.values)

    def __sub__(self, other: "StepFunction") -> "StepFunction":
        check_same_lattice(self, other)
        return StepFunction(self.lattice, self.values - other.values)

    def scaled(self, c: float) -> "StepFunction":
        return StepFunction(self.lattice, c * self.values)


@dataclass(frozen=True, eq=False)
class Weight(StepFunction):
    def __post_init__(self) -> None:
        super().__post_init__()
        if self.values.min() <= 0:
            raise ValueError(f"Weight values must be strictly positive, min is {self.values.min()}")

    def measure(self, Q: CubeId) -> float:
        return float(self.values[self.lattice.cells(Q)].sum()) * self.lattice.cell_volume

    def reciprocal(self) -> "Weight":
        return Weight(self.lattice, 1.0 / self.values)

    def density(self, Q: CubeId) -> float:
        return self.measure(Q) / Q.volume

    def scaled(self, c: float) -> "Weight":
        return Weight(self.lattice, c * self.values)


def check_same_lattice(*functions: StepFunction) -> None:
    first = functions[0].lattice
    for f in functions[1:]:
        if f.lattice != first:
            raise ValueError("Lattice mismatch between step functions")


def constant(lat: Lattice, c: float = 1.0) -> StepFunction:
    return StepFunction(lat, np.full(lat.n_cells, float(c)))


def lebesgue(lat: Lattice) -> Weight:
    return Weight(lat, np.ones(lat.n_cells))


def reciprocal(w: Weight) -> Weight:
    return w.reciprocal()


def average(f: StepFunction, Q: CubeId) -> float:
    return float(f.values[f.lattice.cells(Q)].mean())


def weighted_average(f: StepFunction, mu: StepFunction, Q: CubeId) -> float:
    """mu(Q)^-1 times the integral of f dmu over Q, and 0 when mu(Q) = 0."""
    check_same_lattice(f, mu)
    cells = f.lattice.cells(Q)
    mass = float(mu.values[cells].sum())
    if mass == 0:
        return 0.0
    return float(np.dot(f.values[cells], mu.values[cells])) / mass


def level_averages(f: StepFunction) -> dict[int, np.ndarray]:
    lat = f.lattice
    return {k: s / (lat.n_cells // lat.n_cubes(k)) for k, s in lat.aggregate(f.values).items()}


def _max_over_cubes(lat: Lattice, products: dict[int, np.ndarray]) -> tuple[float, CubeId]:
    best, best_cube = -np.inf, lat.cube(0, 0)
    # coarse levels first so ties resolve to the largest cube
    for k in reversed(lat.levels):
        idx = int(np.argmax(products[k]))
        if products[k][idx] > best:
            best, best_cube = float(products[k][idx]), lat.cube(k, idx)
    return best, best_cube


def a2_constant(w: Weight) -> tuple[float, CubeId]:
    """Dyadic [w]_A2: max over lattice cubes of <w>_Q <w^-1>_Q, with the maximizing cube."""
    return joint_a2(w, w.reciprocal())


def joint_a2(u: Weight, v: Weight) -> tuple[float, CubeId]:
    check_same_lattice(u, v)
    au, av = level_averages(u), level_averages(v)
    return _max_over_cubes(u.lattice, {k: au[k] * av[k] for k in au})


def a2_products(w: Weight) -> dict[int, np.ndarray]:
    """<w>_Q <w^-1>_Q for every cube, keyed by level."""
    aw, awi = level_averages(w), level_averages(w.reciprocal())
    return {k: aw[k] * awi[k] for k in aw}


def power_weight(lat: Lattice, a: float, center: Sequence[float]) -> Weight:
    """|x - center|**a sampled at cell midpoints, periodic distance clipped at half a cell."""
    if abs(a) >= lat.dimension:
        raise ValueError(f"Power exponent must satisfy |a| < {lat.dimension}, got {a}")
    center_arr = np.asarray(center, dtype=np.float64).reshape(lat.dimension, 1)
    mid = (np.indices((lat.side_cells,) * lat.dimension).reshape(lat.dimension, -1) + 0.5) / lat.side_cells
    diff = np.abs(mid - center_arr) % 1.0
    diff = np.minimum(diff, 1.0 - diff)
    dist = np.maximum(np.sqrt(np.sum(diff**2, axis=0)), 0.5 / lat.side_cells)
    return Weight(lat, dist**a)


def _cascade_field(lat: Lattice, seed: int) -> np.ndarray:
    field = np.zeros(lat.n_cells)
    for k in range(lat.k_min, 0):
        eps = rng_stream(seed, WEIGHT_STREAM, -k).standard_normal(lat.n_cubes(k))
        field += eps[lat.labels(k)]
    return field


def random_a2_weight(lat: Lattice, target: float, seed: int, rtol: float = 0.05) -> Weight:
    """
    Lognormal multiplicative cascade whose dyadic A2 constant is tuned to ``target``.

    The cascade strength is bracketed by doubling and then bisected until the
    A2 constant is within ``rtol`` of the target.
    """
    if target < 1:
        raise ValueError(f"A2 target must be >= 1, got {target}")
    field = _cascade_field(lat, seed)

    def make(beta: float) -> Weight:
        log_w = beta * field
        return Weight(lat, np.exp(log_w - log_w.mean()))

    def a2_of(beta: float) -> float:
        return a2_constant(make(beta))[0]

    if target == 1 or np.ptp(field) == 0:
        return make(0.0)
    lo, hi = 0.0, 0.25
    while a2_of(hi) < target:
        lo, hi = hi, 2 * hi
        if hi > 1e3:
            raise ValueError(f"Could not reach A2 target {target} with the cascade")
    beta = hi
    for _ in range(200):
        beta = 0.5 * (lo + hi)
        value = a2_of(beta)
        if abs(value / target - 1) <= rtol:
            break
        if value < target:
            lo = beta
        else:
            hi = beta
    logger.debug(f"random_a2_weight: target={target}, beta={beta:.6g}")
    return make(beta)


def distribution_function(
    f: StepFunction, thresholds: Sequence[float] | np.ndarray, measure: StepFunction | None = None
) -> np.ndarray:
    """m({|f| > t}) for each threshold; ``measure`` defaults to Lebesgue measure."""
    t = np.asarray(thresholds, dtype=np.float64)
    if t.size and (np.any(t <= 0) or np.any(np.diff(t) <= 0)):
        raise ValueError("Thresholds must be positive and strictly increasing")
    mass = np.ones(f.lattice.n_cells) if measure is None else measure.values
    if measure is not None:
        check_same_lattice(f, measure)
    order = np.argsort(np.abs(f.values), kind="stable")
    sorted_abs = np.abs(f.values)[order]
    tail = np.concatenate([np.cumsum(mass[order][::-1])[::-1], [0.0]]) * f.lattice.cell_volume
    return tail[np.searchsorted(sorted_abs, t, side="right")]


def write_step_function(f: StepFunction, path: Path | str) -> Path:
    """CSV of (cell, value); weights carry their A2 constant in a JSON header line."""
    preamble = None
    if isinstance(f, Weight):
        a2, cube = a2_constant(f)
        preamble = json.dumps(
            {"a2": a2, "a2_cube": cube.ref().model_dump(), "hash": array_hash(f.values), "a2_kind": "dyadic"}
        )
    return write_csv(path, ["cell", "value"], enumerate(f.values), preamble=preamble)
