"""Standard and weighted Haar systems with fast cascade transforms.

Haar index ``j`` runs over the bits of a d-digit binary number, coordinate 0
most significant; child order ``eta`` uses the same convention. Index 0 is the
normalized indicator ``|Q|^-1/2 1_Q`` and appears only in generalized shifts.
"""

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from dyadlab.lattice import CubeId, Lattice
from dyadlab.signals import StepFunction, check_same_lattice
from dyadlab.utils import write_csv


@lru_cache(maxsize=None)
def haar_matrix(d: int) -> np.ndarray:
    """Row j gives the signs of h^j on the children of a cube."""
    base = np.array([[1.0, 1.0], [-1.0, 1.0]])
    out = np.ones((1, 1))
    for _ in range(d):
        out = np.kron(out, base)
    out.setflags(write=False)
    return out


@dataclass
class HaarCoefficients:
    lattice: Lattice
    root_average: np.ndarray | float
    # level -> array (..., n_cubes(level), 2**d - 1), levels k_min+1 .. 0
    details: dict[int, np.ndarray] = field(default_factory=dict)

    def coefficient(self, Q: CubeId, j: int) -> float:
        return float(self.details[Q.level][..., Q.flat, j - 1])

    def count(self) -> int:
        return sum(v.shape[-2] * v.shape[-1] for v in self.details.values()) + 1

    def squared_norm(self) -> float:
        return float(np.sum(self.root_average**2) + sum(np.sum(v**2) for v in self.details.values()))


def _check_haar(lat: Lattice, Q: CubeId, j: int) -> None:
    if not 1 <= j <= lat.n_children - 1:
        raise ValueError(f"Haar index must lie in [1, {lat.n_children - 1}], got {j}")
    if Q.level == lat.k_min:
        raise ValueError(f"Cube {Q} is at the finest level and carries no Haar function")


def standard_haar(lat: Lattice, Q: CubeId, j: int) -> StepFunction:
    """Tensor Haar function h^j_Q: |Q|^-1/2 times +-1 on the children of Q."""
    _check_haar(lat, Q, j)
    signs = haar_matrix(lat.dimension)[j]
    values = np.zeros(lat.n_cells)
    for eta, child in enumerate(lat.children(Q)):
        values[lat.cells(child)] = signs[eta] / np.sqrt(Q.volume)
    return StepFunction(lat, values)


def coefficient_pyramid(lat: Lattice, values: np.ndarray) -> dict[int, np.ndarray]:
    """
    All inner products <f, h^j_Q>, j = 0 .. 2**d - 1, for batched cell values.

    Returns level -> array (..., n_cubes(level), 2**d); the finest level only
    carries j = 0.
    """
    values = np.asarray(values, dtype=np.float64)
    integrals = lat.aggregate(values * lat.cell_volume)
    H = haar_matrix(lat.dimension)
    pyramid = {lat.k_min: (values * np.sqrt(lat.cell_volume))[..., None]}
    for k in range(lat.k_min + 1, 1):
        child = integrals[k - 1][..., lat.children_table(k)]
        pyramid[k] = (child @ H.T) / np.sqrt(2.0 ** (k * lat.dimension))
    return pyramid


def synthesize_pyramid(lat: Lattice, pyramid: dict[int, np.ndarray]) -> np.ndarray:
    """Cell values of sum over Q, j of pyramid[level][Q, j] h^j_Q; missing levels count as zero."""
    H = haar_matrix(lat.dimension)
    batch = next(iter(pyramid.values())).shape[:-2] if pyramid else ()
    running = np.zeros(batch + (1,))
    for k in range(0, lat.k_min, -1):
        n_next = lat.n_cubes(k - 1)
        nxt = np.zeros(batch + (n_next,))
        table = lat.children_table(k)
        nxt[..., table] = running[..., :, None]
        if k in pyramid:
            nxt[..., table] += (pyramid[k] @ H) / np.sqrt(2.0 ** (k * lat.dimension))
        running = nxt
    if lat.k_min in pyramid:
        running = running + pyramid[lat.k_min][..., 0] / np.sqrt(lat.cell_volume)
    return running


def analyze(f: StepFunction) -> HaarCoefficients:
    lat = f.lattice
    pyramid = coefficient_pyramid(lat, f.values)
    return HaarCoefficients(
        lattice=lat,
        root_average=float(pyramid[0][0, 0]),
        details={k: v[..., 1:] for k, v in pyramid.items() if k > lat.k_min},
    )


def synthesize(c: HaarCoefficients, lat: Lattice | None = None) -> StepFunction:
    if lat is not None and lat != c.lattice:
        raise ValueError("Lattice mismatch between coefficients and target lattice")
    lat = c.lattice
    pyramid = {}
    for k, detail in c.details.items():
        full = np.zeros(detail.shape[:-1] + (lat.n_children,))
        full[..., 1:] = detail
        pyramid[k] = full
    pyramid.setdefault(0, np.zeros((1, lat.n_children)))
    pyramid[0] = pyramid[0].copy()
    pyramid[0][..., 0] = c.root_average
    return StepFunction(lat, synthesize_pyramid(lat, pyramid))


def haar_function_values(
    lat: Lattice, level: int, cubes: np.ndarray, coeffs: np.ndarray
) -> np.ndarray:
    """
    Dense cell values ``(T, N)`` of sum_j coeffs[t, j] h^j over cube ``cubes[t]``.

    At the finest level only the j = 0 coefficient is used.
    """
    cubes = np.asarray(cubes, dtype=np.int64)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    scale = 1.0 / np.sqrt(2.0 ** (level * lat.dimension))
    rows = np.arange(cubes.size)
    if level == lat.k_min:
        arr = np.zeros((cubes.size, lat.n_cubes(level)))
        arr[rows, cubes] = coeffs[:, 0] * scale
        return arr[:, lat.labels(level)]
    children = lat.children_table(level)[cubes]
    arr = np.zeros((cubes.size, lat.n_cubes(level - 1)))
    arr[rows[:, None], children] = (coeffs @ haar_matrix(lat.dimension)) * scale
    return arr[:, lat.labels(level - 1)]


def write_haar_coefficients(c: HaarCoefficients, path: Path | str) -> Path:
    def rows():
        yield (0, "", 0, float(c.root_average))
        for k in sorted(c.details, reverse=True):
            for flat, coeffs in enumerate(c.details[k]):
                index = " ".join(str(i) for i in c.lattice.cube(k, flat).index)
                for j, value in enumerate(coeffs, start=1):
                    yield (k, index, j, float(value))

    return write_csv(path, ["level", "cube_index", "j", "value"], rows())


@dataclass(frozen=True, eq=False)
class WeightedHaarBasis:
    cube: CubeId
    # each entry: values on the children of the cube, child order as in the lattice
    child_values: list[np.ndarray]
    functions: list[StepFunction]

    def __len__(self) -> int:
        return len(self.functions)


def child_masses(mu: StepFunction, Q: CubeId) -> np.ndarray:
    lat = mu.lattice
    return np.array([mu.values[lat.cells(child)].sum() * lat.cell_volume for child in lat.children(Q)])


def weighted_haar_basis(mu: StepFunction, Q: CubeId) -> WeightedHaarBasis:
    """
    Orthonormal basis of the mu-mean-zero functions on Q constant on its children.

    Gram-Schmidt in L2(mu) runs over the constant and then the indicators of the
    positive-measure children in child order; the constant is dropped at the end.
    """
    lat = mu.lattice
    if Q.level == lat.k_min:
        raise ValueError(f"Cube {Q} is at the finest level and carries no Haar functions")
    masses = child_masses(mu, Q)
    positive = np.flatnonzero(masses > 0)
    candidates = [np.where(masses > 0, 1.0, 0.0)]
    for eta in positive[:-1]:
        e = np.zeros(masses.size)
        e[eta] = 1.0
        candidates.append(e)

    basis: list[np.ndarray] = []
    for vec in candidates if positive.size else []:
        v = vec.copy()
        for b in basis:
            v -= np.sum(masses * v * b) * b
        v /= np.sqrt(np.sum(masses * v * v))
        basis.append(v)
    child_values = basis[1:]
    children = lat.children(Q)
    functions = []
    for vals in child_values:
        values = np.zeros(lat.n_cells)
        for eta, child in enumerate(children):
            values[lat.cells(child)] = vals[eta]
        functions.append(StepFunction(lat, values))
    return WeightedHaarBasis(cube=Q, child_values=child_values, functions=functions)


def weighted_expectations(f: StepFunction, mu: StepFunction) -> dict[int, np.ndarray]:
    """E^mu_Q f for every cube, 0 on cubes of zero mu-measure."""
    check_same_lattice(f, mu)
    lat = f.lattice
    num = lat.aggregate(f.values * mu.values)
    den = lat.aggregate(mu.values)
    return {k: np.divide(num[k], den[k], out=np.zeros_like(num[k]), where=den[k] > 0) for k in num}


def weighted_delta(f: StepFunction, mu: StepFunction, Q: CubeId) -> StepFunction:
    """Martingale difference: sum over children J of E^mu_J f 1_J minus E^mu_Q f 1_Q."""
    check_same_lattice(f, mu)
    lat = f.lattice
    if Q.level == lat.k_min:
        raise ValueError(f"Cube {Q} is at the finest level and has no martingale difference")
    expectations = weighted_expectations(f, mu)
    values = np.zeros(lat.n_cells)
    parent_mean = expectations[Q.level][Q.flat]
    for child in lat.children(Q):
        values[lat.cells(child)] = expectations[child.level][child.flat] - parent_mean
    return StepFunction(lat, values)
