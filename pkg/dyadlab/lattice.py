"""Finite dyadic lattices on the periodic unit cube.

A lattice with finest level ``k_min`` has ``M = 2**-k_min`` cells per side and
``N = M**d`` cells in total; every value array in the package is indexed by
cell in C order. A cube at level ``k`` starts at cell ``s_k + m * L_k`` per
coordinate, where ``L_k = 2**(k - k_min)`` and
``s_k = sum(omega_j * 2**(j - k_min) for k_min <= j < k)``.
"""

import itertools
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np

from dyadlab.report_output import CubeRef, LatticeDescriptor, MonteCarloEstimate
from dyadlab.utils import render_template, rng_stream

LATTICE_STREAM = 1
PI_BAD_STREAM = 2


@dataclass(frozen=True, order=True)
class CubeId:
    level: int
    index: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.level > 0:
            raise ValueError(f"Cube level must be <= 0, got {self.level}")
        n = 1 << -self.level
        object.__setattr__(self, "index", tuple(int(i) % n for i in self.index))

    @property
    def dimension(self) -> int:
        return len(self.index)

    @property
    def side(self) -> float:
        return 2.0**self.level

    @property
    def volume(self) -> float:
        return 2.0 ** (self.level * self.dimension)

    @property
    def flat(self) -> int:
        n = 1 << -self.level
        return int(np.ravel_multi_index(self.index, (n,) * self.dimension))

    def ref(self) -> CubeRef:
        return CubeRef(level=self.level, index=list(self.index))


@dataclass(frozen=True)
class GoodnessParams:
    r0: int
    gamma: float

    def __post_init__(self) -> None:
        if self.r0 < 1:
            raise ValueError(f"r0 must be a positive integer, got {self.r0}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")

    @classmethod
    def from_smoothness(cls, d: int, alpha: float, r0: int) -> "GoodnessParams":
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"Smoothness alpha must lie in (0, 1], got {alpha}")
        return cls(r0=r0, gamma=alpha / (2 * (d + alpha)))


@dataclass(frozen=True)
class Lattice:
    dimension: int
    k_min: int
    # shifts[j - k_min] is omega_j for k_min <= j < 0
    shifts: tuple[tuple[int, ...], ...]
    seed: int | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        _validate_range(self.dimension, self.k_min)
        if len(self.shifts) != -self.k_min:
            raise ValueError(f"Expected {-self.k_min} shift vectors, got {len(self.shifts)}")
        for bits in self.shifts:
            if len(bits) != self.dimension or any(b not in (0, 1) for b in bits):
                raise ValueError(f"Shift vectors must be {self.dimension} bits, got {bits}")

    @property
    def side_cells(self) -> int:
        return 1 << -self.k_min

    @property
    def n_cells(self) -> int:
        return self.side_cells**self.dimension

    @property
    def cell_volume(self) -> float:
        return 1.0 / self.n_cells

    @property
    def levels(self) -> range:
        return range(self.k_min, 1)

    @property
    def n_children(self) -> int:
        return 1 << self.dimension

    def omega(self, j: int) -> np.ndarray:
        return np.asarray(self.shifts[j - self.k_min], dtype=np.int64)

    def cubes_per_side(self, level: int) -> int:
        return 1 << -level

    def n_cubes(self, level: int) -> int:
        return self.cubes_per_side(level) ** self.dimension

    def cube_cells(self, level: int) -> int:
        """Side length of a level cube in cells."""
        return 1 << (level - self.k_min)

    def offset(self, level: int) -> np.ndarray:
        s = np.zeros(self.dimension, dtype=np.int64)
        for j in range(self.k_min, level):
            s += self.omega(j) << (j - self.k_min)
        return s

    def _check_level(self, level: int) -> None:
        if not self.k_min <= level <= 0:
            raise ValueError(f"Level {level} outside lattice range [{self.k_min}, 0]")

    @cached_property
    def _coords(self) -> np.ndarray:
        return np.indices((self.side_cells,) * self.dimension).reshape(self.dimension, -1)

    @cached_property
    def _labels(self) -> dict[int, np.ndarray]:
        labels = {}
        for k in self.levels:
            per_coord = ((self._coords - self.offset(k)[:, None]) % self.side_cells) // self.cube_cells(k)
            labels[k] = np.ravel_multi_index(tuple(per_coord), (self.cubes_per_side(k),) * self.dimension)
        return labels

    @cached_property
    def _children(self) -> dict[int, np.ndarray]:
        eta = np.array(list(itertools.product((0, 1), repeat=self.dimension)), dtype=np.int64)
        tables = {}
        for k in range(self.k_min + 1, 1):
            n = self.cubes_per_side(k)
            m = np.indices((n,) * self.dimension).reshape(self.dimension, -1).T
            child = (2 * m[:, None, :] + eta[None, :, :] + self.omega(k - 1)) % (2 * n)
            tables[k] = np.ravel_multi_index(tuple(np.moveaxis(child, -1, 0)), (2 * n,) * self.dimension)
        return tables

    @cached_property
    def _parents(self) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        tables = {}
        for k in range(self.k_min, 0):
            n = self.cubes_per_side(k)
            m = np.indices((n,) * self.dimension).reshape(self.dimension, -1)
            rel = (m - self.omega(k)[:, None]) % n
            parent = np.ravel_multi_index(tuple(rel // 2), (n // 2,) * self.dimension)
            position = np.ravel_multi_index(tuple(rel % 2), (2,) * self.dimension)
            tables[k] = (parent, position)
        return tables

    def labels(self, level: int) -> np.ndarray:
        """Flat level-``level`` cube index of every cell."""
        self._check_level(level)
        return self._labels[level]

    def children_table(self, level: int) -> np.ndarray:
        """Array ``(n_cubes(level), 2**d)`` of flat child indices, child order in C order of the bits."""
        if not self.k_min < level <= 0:
            raise ValueError(f"Cubes at level {level} have no children in range [{self.k_min}, 0]")
        return self._children[level]

    def parent_table(self, level: int) -> tuple[np.ndarray, np.ndarray]:
        if not self.k_min <= level < 0:
            raise ValueError(f"Cubes at level {level} have no parent in range [{self.k_min}, 0]")
        return self._parents[level]

    def descendants(self, level: int, cubes: np.ndarray, depth: int) -> np.ndarray:
        """Flat indices ``(len(cubes), 2**(d*depth))`` of the depth-``depth`` descendants."""
        if level - depth < self.k_min:
            raise ValueError(f"Depth {depth} below level {level} passes the finest level {self.k_min}")
        out = np.asarray(cubes, dtype=np.int64)[:, None]
        for k in range(level, level - depth, -1):
            out = self.children_table(k)[out].reshape(out.shape[0], -1)
        return out

    def aggregate(self, values: np.ndarray) -> dict[int, np.ndarray]:
        """Per-level sums over cubes of cell values, trailing axis indexed by cell."""
        values = np.asarray(values)
        if values.shape[-1] != self.n_cells:
            raise ValueError(f"Lattice mismatch: expected {self.n_cells} cells, got {values.shape[-1]}")
        sums = {self.k_min: values}
        for k in range(self.k_min + 1, 1):
            sums[k] = sums[k - 1][..., self.children_table(k)].sum(axis=-1)
        return sums

    def cube(self, level: int, flat: int) -> CubeId:
        self._check_level(level)
        n = self.cubes_per_side(level)
        return CubeId(level, tuple(int(i) for i in np.unravel_index(flat, (n,) * self.dimension)))

    def cubes(self, level: int) -> Iterator[CubeId]:
        for flat in range(self.n_cubes(level)):
            yield self.cube(level, flat)

    def all_cubes(self) -> Iterator[CubeId]:
        for k in reversed(self.levels):
            yield from self.cubes(k)

    def start(self, Q: CubeId) -> np.ndarray:
        """First cell of ``Q`` per coordinate."""
        self._check_cube(Q)
        return (self.offset(Q.level) + np.asarray(Q.index) * self.cube_cells(Q.level)) % self.side_cells

    def cells(self, Q: CubeId) -> np.ndarray:
        start = self.start(Q)
        size = self.cube_cells(Q.level)
        ranges = [(start[c] + np.arange(size)) % self.side_cells for c in range(self.dimension)]
        grid = np.meshgrid(*ranges, indexing="ij")
        return np.ravel_multi_index(tuple(g.ravel() for g in grid), (self.side_cells,) * self.dimension)

    def indicator(self, Q: CubeId) -> np.ndarray:
        out = np.zeros(self.n_cells)
        out[self.cells(Q)] = 1.0
        return out

    def cube_containing(self, point: Sequence[float], level: int) -> CubeId:
        self._check_level(level)
        cell = [int(math.floor((x % 1.0) * self.side_cells)) for x in point]
        flat_cell = int(np.ravel_multi_index(tuple(cell), (self.side_cells,) * self.dimension))
        return self.cube(level, int(self.labels(level)[flat_cell]))

    def _check_cube(self, Q: CubeId) -> None:
        if Q.dimension != self.dimension:
            raise ValueError(f"Lattice mismatch: cube of dimension {Q.dimension} on a {self.dimension}-d lattice")
        self._check_level(Q.level)

    def children(self, Q: CubeId) -> list[CubeId]:
        self._check_cube(Q)
        if Q.level == self.k_min:
            raise ValueError(f"Cube {Q} is at the finest level {self.k_min} and has no children")
        return [self.cube(Q.level - 1, int(c)) for c in self.children_table(Q.level)[Q.flat]]

    def parent(self, Q: CubeId) -> CubeId:
        self._check_cube(Q)
        if Q.level == 0:
            raise ValueError(f"Cube {Q} is the root and has no parent")
        parent, _ = self.parent_table(Q.level)
        return self.cube(Q.level + 1, int(parent[Q.flat]))

    def ancestor(self, Q: CubeId, order: int) -> CubeId:
        self._check_cube(Q)
        if order < 0 or Q.level + order > 0:
            raise ValueError(f"Ancestor of order {order} of level-{Q.level} cube lies above the root")
        for _ in range(order):
            Q = self.parent(Q)
        return Q

    def contains(self, R: CubeId, Q: CubeId) -> bool:
        if Q.level > R.level:
            return False
        return self.ancestor(Q, R.level - Q.level) == R

    def descriptor(self) -> LatticeDescriptor:
        return LatticeDescriptor(
            dimension=self.dimension,
            k_min=self.k_min,
            seed=self.seed,
            shifts=[list(bits) for bits in self.shifts],
        )

    def with_shifts(self, shifts: dict[int, Sequence[int]], seed: int | None = None) -> "Lattice":
        updated = list(self.shifts)
        for j, bits in shifts.items():
            updated[j - self.k_min] = tuple(int(b) for b in bits)
        return Lattice(self.dimension, self.k_min, tuple(updated), seed)


@dataclass(frozen=True)
class Navigation:
    children: list[CubeId]
    parent: CubeId | None
    ancestors: list[CubeId]

    def ancestor(self, order: int) -> CubeId:
        return self.ancestors[order]


def _validate_range(d: int, k_min: int) -> None:
    if d not in (1, 2):
        raise ValueError(f"Dimension must be 1 or 2, got {d}")
    if k_min > -1:
        raise ValueError(f"k_min must be <= -1, got {k_min}")


def standard_lattice(d: int, k_min: int) -> Lattice:
    _validate_range(d, k_min)
    return Lattice(d, k_min, tuple((0,) * d for _ in range(-k_min)))


def sample_lattice(d: int, k_min: int, seed: int) -> Lattice:
    """Each omega_j is uniform on {0,1}^d, drawn from its own stream keyed by (seed, level)."""
    _validate_range(d, k_min)
    shifts = tuple(
        tuple(int(b) for b in rng_stream(seed, LATTICE_STREAM, -j).integers(0, 2, size=d))
        for j in range(k_min, 0)
    )
    return Lattice(d, k_min, shifts, seed)


def navigate(lat: Lattice, Q: CubeId) -> Navigation:
    """Children (empty at the finest level), parent and the full ancestor chain of ``Q``."""
    children = lat.children(Q) if Q.level > lat.k_min else []
    parent = lat.parent(Q) if Q.level < 0 else None
    ancestors = [Q]
    while ancestors[-1].level < 0:
        ancestors.append(lat.parent(ancestors[-1]))
    return Navigation(children=children, parent=parent, ancestors=ancestors)


def _gap_cells(a: np.ndarray, la: int, b: np.ndarray, lb: int, M: int) -> np.ndarray:
    overlap = ((b - a) % M < la) | ((a - b) % M < lb)
    gap = np.minimum((b - (a + la)) % M, (a - (b + lb)) % M)
    return np.where(overlap, 0, gap)


def set_distance(lat: Lattice, Q: CubeId, R: CubeId) -> float:
    """Periodic Euclidean distance between the closed cubes."""
    gap = _gap_cells(
        lat.start(Q), lat.cube_cells(Q.level), lat.start(R), lat.cube_cells(R.level), lat.side_cells
    )
    return float(np.sqrt(np.sum(gap.astype(np.float64) ** 2))) / lat.side_cells


def long_distance(lat: Lattice, Q: CubeId, R: CubeId) -> float:
    return set_distance(lat, Q, R) + Q.side + R.side


def boundary_distance(lat: Lattice, Q: CubeId, R: CubeId) -> float:
    """dist(Q, boundary of R) for Q inside R, otherwise the set distance."""
    if not lat.contains(R, Q):
        return set_distance(lat, Q, R)
    o = (lat.start(Q) - lat.start(R)) % lat.side_cells
    inner = np.minimum(o, lat.cube_cells(R.level) - lat.cube_cells(Q.level) - o)
    return float(inner.min()) / lat.side_cells


def badness_threshold(Q_level: int, R_level: int, gamma: float) -> float:
    return 2.0 ** (Q_level * gamma + R_level * (1.0 - gamma))


def is_bad(lat: Lattice, Q: CubeId, p: GoodnessParams) -> bool:
    """
    Whether some lattice cube R with l(Q) < 2**-r0 l(R) has dist(Q, boundary R) below
    l(Q)**gamma * l(R)**(1-gamma).

    Only the ancestors of Q need checking: any other cube R of the same level is
    separated from Q by the boundary of the ancestor.
    """
    lat._check_cube(Q)
    for level in range(Q.level + p.r0 + 1, 1):
        R = lat.ancestor(Q, level - Q.level)
        if boundary_distance(lat, Q, R) < badness_threshold(Q.level, level, p.gamma):
            return True
    return False


def is_good_to_level(lat: Lattice, Q: CubeId, p: GoodnessParams, level: int) -> bool:
    """Goodness of Q tested only against ancestors up to ``level``."""
    for k in range(Q.level + p.r0 + 1, level + 1):
        R = lat.ancestor(Q, k - Q.level)
        if boundary_distance(lat, Q, R) < badness_threshold(Q.level, k, p.gamma):
            return False
    return True


def bad_offsets(offsets: np.ndarray, s: int, gamma: float) -> np.ndarray:
    """
    Badness of cubes against an ancestor ``s`` levels up.

    ``offsets`` are positions inside the ancestor in units of the cube side,
    shape ``(..., d)``; the result reduces the trailing axis.
    """
    dist = np.minimum(offsets, (1 << s) - 1 - offsets).min(axis=-1)
    return dist < 2.0 ** (s * (1.0 - gamma))


def estimate_pi_bad(
    d: int, r0: int, gamma: float, q_level: int, n_samples: int, seed: int
) -> MonteCarloEstimate:
    """
    Monte Carlo estimate of the probability that a cube at ``q_level`` is bad.

    The cube is held at the origin and the lattice variables above its level are
    resampled; each level draws from its own stream so that estimates for
    different ``r0`` share samples.
    """
    params = GoodnessParams(r0=r0, gamma=gamma)
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    if q_level > -(r0 + 1):
        raise ValueError(f"q_level {q_level} leaves no ancestor {r0 + 1} levels up within the root")
    shift_sum = np.zeros((n_samples, d), dtype=np.int64)
    bad = np.zeros(n_samples, dtype=bool)
    for s in range(1, -q_level + 1):
        omega = rng_stream(seed, PI_BAD_STREAM, -(q_level + s - 1)).integers(0, 2, size=(n_samples, d))
        shift_sum += omega << (s - 1)
        offsets = (-shift_sum) % (1 << s)
        if s > params.r0:
            bad |= bad_offsets(offsets, s, params.gamma)
    p = float(bad.mean())
    return MonteCarloEstimate(
        estimate=p,
        standard_error=math.sqrt(p * (1.0 - p) / n_samples),
        n_samples=n_samples,
        seed=seed,
    )


def lattice_record(lat: Lattice) -> str:
    return render_template(
        "lattice_record.txt.jinja",
        lattice=lat,
        levels=[(j, lat.shifts[j - lat.k_min]) for j in range(lat.k_min, 0)],
    )


_RECORD_LINE = re.compile(r"^level\s+(-?\d+)\s+([01](?:\s+[01])*)$")


def parse_lattice_record(text: str) -> Lattice:
    header: dict[str, str] = {}
    shifts: dict[int, tuple[int, ...]] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        match = _RECORD_LINE.match(line)
        if match:
            shifts[int(match.group(1))] = tuple(int(b) for b in match.group(2).split())
            continue
        parts = line.split()
        if len(parts) != 2 or parts[0] not in ("dimension", "k_min", "seed"):
            raise ValueError(f"Malformed lattice record line: '{line}'")
        header[parts[0]] = parts[1]
    if "dimension" not in header or "k_min" not in header:
        raise ValueError("Lattice record is missing the dimension or k_min line")
    d, k_min = int(header["dimension"]), int(header["k_min"])
    missing = [j for j in range(k_min, 0) if j not in shifts]
    if missing:
        raise ValueError(f"Lattice record is missing levels {missing}")
    seed = header.get("seed")
    return Lattice(
        d,
        k_min,
        tuple(shifts[j] for j in range(k_min, 0)),
        None if seed in (None, "none") else int(seed),
    )
