"""Calderon-Zygmund decomposition, slicings, density classes, stopping forests and their audits."""

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from dyadlab.lattice import CubeId, Lattice
from dyadlab.logger import dyadlab_logger as logger
from dyadlab.report_output import AbstractJNReport, DistributionCurve, PackingReport
from dyadlab.shift import ElementaryShift, apply_values, restrict, restrict_levels
from dyadlab.signals import (
    StepFunction,
    Weight,
    a2_constant,
    a2_products,
    check_same_lattice,
    distribution_function,
    level_averages,
)
from dyadlab.utils import fit_linear, rng_stream

CARLESON_STREAM = 8
PHI_STREAM = 9

# slack for comparisons of float sums
_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class CZDecomposition:
    lam: float
    f: StepFunction
    g: StepFunction
    bad_parts: dict[CubeId, StepFunction] = field(default_factory=dict)
    root_selected: bool = False

    @property
    def cubes(self) -> list[CubeId]:
        return list(self.bad_parts)


def _cz_select(f: StepFunction, lam: float) -> dict[int, np.ndarray]:
    lat = f.lattice
    abs_avg = level_averages(StepFunction(lat, np.abs(f.values)))
    selected: dict[int, np.ndarray] = {}
    covered = np.zeros(1, dtype=bool)
    for k in range(0, lat.k_min - 1, -1):
        if k < 0:
            parent, _ = lat.parent_table(k)
            covered = covered[parent] | selected[k + 1][parent]
        selected[k] = (abs_avg[k] > lam) & ~covered
    return selected


def cz_decompose(f: StepFunction, lam: float) -> CZDecomposition:
    """
    Calderon-Zygmund decomposition of ``f`` at height ``lam``.

    The selected cubes are the maximal lattice cubes on which the average of |f|
    exceeds ``lam``; the root is selected when its own average does. The
    properties of the decomposition are verified before returning.

    Raises:
        ValueError: For a non-positive height or when a property check fails
    """
    if lam <= 0:
        raise ValueError(f"CZ height must be positive, got {lam}")
    lat = f.lattice
    selected = _cz_select(f, lam)
    bad_parts: dict[CubeId, StepFunction] = {}
    g = f.values.copy()
    for k in sorted(selected, reverse=True):
        for flat in np.flatnonzero(selected[k]):
            Q = lat.cube(k, int(flat))
            cells = lat.cells(Q)
            b = np.zeros(lat.n_cells)
            b[cells] = f.values[cells] - f.values[cells].mean()
            g[cells] = f.values[cells].mean()
            bad_parts[Q] = StepFunction(lat, b)
    decomposition = CZDecomposition(
        lam=lam,
        f=f,
        g=StepFunction(lat, g),
        bad_parts=bad_parts,
        root_selected=bool(selected[0][0]),
    )
    failures = cz_property_failures(decomposition)
    if failures:
        raise ValueError(f"CZ decomposition at height {lam} failed: {'; '.join(failures)}")
    logger.debug(f"cz_decompose: lambda={lam}, {len(bad_parts)} cubes selected")
    return decomposition


def cz_property_failures(cz: CZDecomposition) -> list[str]:
    f, g, lam = cz.f, cz.g, cz.lam
    lat = f.lattice
    failures = []
    f_l1 = f.l1_norm()
    if g.l1_norm() > f_l1 * (1 + _SLACK) + _SLACK:
        failures.append(f"||g||_1 = {g.l1_norm()} exceeds ||f||_1 = {f_l1}")
    # with the root selected g is the constant average of f
    sup_bound = f_l1 if cz.root_selected else lat.n_children * lam
    if g.sup_norm() > sup_bound * (1 + _SLACK):
        failures.append(f"||g||_inf = {g.sup_norm()} exceeds {sup_bound}")
    total = f.values - g.values
    for Q, b in cz.bad_parts.items():
        local = f.restrict(Q).l1_norm()
        if b.l1_norm() > 2 * local * (1 + _SLACK) + _SLACK:
            failures.append(f"||b_Q||_1 = {b.l1_norm()} exceeds twice ||1_Q f||_1 on {Q}")
        if abs(b.integral()) > _SLACK * max(1.0, local):
            failures.append(f"integral of b_Q is {b.integral()} on {Q}")
        total = total - b.values
    if sum(Q.volume for Q in cz.bad_parts) > f_l1 / lam * (1 + _SLACK):
        failures.append("selected cubes exceed ||f||_1 / lambda in total measure")
    if np.abs(total).max(initial=0.0) > _SLACK * max(1.0, f.sup_norm()):
        failures.append("f differs from g plus the bad parts")
    return failures


@dataclass(frozen=True)
class CubeFamily:
    """Cubes of a fixed set of levels."""

    lattice: Lattice
    levels: tuple[int, ...]

    def __contains__(self, Q: CubeId) -> bool:
        return Q.level in self.levels

    def cubes(self) -> Iterator[CubeId]:
        for k in self.levels:
            yield from self.lattice.cubes(k)

    def masks(self) -> dict[int, np.ndarray]:
        return {k: np.full(self.lattice.n_cubes(k), k in self.levels) for k in self.lattice.levels}


def slice_lattice(lat: Lattice, r: int) -> list[CubeFamily]:
    """The r + 1 families of levels k with (-k) mod (r + 1) == j, j = 0 .. r."""
    if r < 0:
        raise ValueError(f"Slice parameter must be non-negative, got {r}")
    return [
        CubeFamily(lat, tuple(k for k in reversed(lat.levels) if (-k) % (r + 1) == j)) for j in range(r + 1)
    ]


def density_class_index(w: Weight) -> dict[int, np.ndarray]:
    """Class index floor(log2 <w>_Q <w^-1>_Q) per cube, clamped below at 0."""
    out = {}
    for k, products in a2_products(w).items():
        _, exponent = np.frexp(products)
        out[k] = np.maximum(exponent - 1, 0)
    return out


def density_classes(w: Weight) -> dict[int, list[CubeId]]:
    lat = w.lattice
    classes: dict[int, list[CubeId]] = {}
    for k, index in sorted(density_class_index(w).items(), reverse=True):
        for flat, cls in enumerate(index):
            classes.setdefault(int(cls), []).append(lat.cube(k, flat))
    return dict(sorted(classes.items()))


@dataclass(frozen=True, eq=False)
class StoppingForest:
    lattice: Lattice
    root: CubeId
    stopping: list[CubeId]
    densities: np.ndarray
    # index of the stopping parent, -1 for the root
    parents: np.ndarray
    generation_of: np.ndarray
    # level -> index of the smallest stopping cube containing each cube, -1 outside the root
    owner: dict[int, np.ndarray]
    ambient: dict[int, np.ndarray]

    @property
    def generations(self) -> list[list[CubeId]]:
        out: list[list[CubeId]] = [[] for _ in range(int(self.generation_of.max()) + 1)]
        for Q, gen in zip(self.stopping, self.generation_of):
            out[int(gen)].append(Q)
        return out

    def index(self, Q: CubeId) -> int:
        return self.stopping.index(Q)

    def partition(self) -> dict[CubeId, list[CubeId]]:
        """P(R) for every stopping cube R: the ambient cubes whose smallest stopping ancestor is R."""
        parts: dict[CubeId, list[CubeId]] = {Q: [] for Q in self.stopping}
        for k in sorted(self.owner, reverse=True):
            members = np.flatnonzero((self.owner[k] >= 0) & self.ambient[k])
            for flat in members:
                parts[self.stopping[int(self.owner[k][flat])]].append(self.lattice.cube(k, int(flat)))
        return parts

    def threshold_violations(self) -> list[tuple[CubeId, CubeId]]:
        """Stopping parent/child pairs breaking the density quadrupling rule."""
        bad = []
        for i, p in enumerate(self.parents):
            if p >= 0 and not self.densities[i] > 4 * self.densities[p]:
                bad.append((self.stopping[int(p)], self.stopping[i]))
        return bad


def _ambient_masks(lat: Lattice, ambient: dict[int, np.ndarray] | None) -> dict[int, np.ndarray]:
    if ambient is None:
        return {k: np.ones(lat.n_cubes(k), dtype=bool) for k in lat.levels}
    return {k: np.asarray(ambient.get(k, np.zeros(lat.n_cubes(k))), dtype=bool) for k in lat.levels}


def ambient_from_cubes(lat: Lattice, cubes: Sequence[CubeId]) -> dict[int, np.ndarray]:
    masks = {k: np.zeros(lat.n_cubes(k), dtype=bool) for k in lat.levels}
    for Q in cubes:
        masks[Q.level][Q.flat] = True
    return masks


def stopping_forest(Q0: CubeId, w: Weight, ambient: dict[int, np.ndarray] | None = None) -> StoppingForest:
    """
    Stopping cubes below ``Q0``: each generation consists of the maximal ambient
    cubes inside a previous stopping cube R whose density exceeds 4 w(R)/|R|.

    Args:
        Q0: Top cube, which must belong to the ambient collection
        w: Weight defining the densities
        ambient: Level -> boolean mask of ambient cubes; all cubes when omitted
    """
    lat = w.lattice
    masks = _ambient_masks(lat, ambient)
    if not masks[Q0.level][Q0.flat]:
        raise ValueError(f"Top cube {Q0} is not in the ambient collection")
    dens = level_averages(w)
    owner = {k: np.full(lat.n_cubes(k), -1, dtype=np.int64) for k in lat.levels}
    owner[Q0.level][Q0.flat] = 0
    stopping = [Q0]
    densities = [float(dens[Q0.level][Q0.flat])]
    parents = [-1]
    generation_of = [0]
    for k in range(Q0.level - 1, lat.k_min - 1, -1):
        parent, _ = lat.parent_table(k)
        inherited = owner[k + 1][parent]
        threshold = 4 * np.asarray(densities)[np.maximum(inherited, 0)]
        new = (inherited >= 0) & masks[k] & (dens[k] > threshold)
        current = inherited.copy()
        for flat in np.flatnonzero(new):
            current[flat] = len(stopping)
            stopping.append(lat.cube(k, int(flat)))
            densities.append(float(dens[k][flat]))
            parents.append(int(inherited[flat]))
            generation_of.append(generation_of[int(inherited[flat])] + 1)
        owner[k] = current
    forest = StoppingForest(
        lattice=lat,
        root=Q0,
        stopping=stopping,
        densities=np.asarray(densities),
        parents=np.asarray(parents, dtype=np.int64),
        generation_of=np.asarray(generation_of, dtype=np.int64),
        owner=owner,
        ambient=masks,
    )
    logger.info(f"stopping_forest: {len(stopping)} stopping cubes in {len(forest.generations)} generations")
    return forest


def corona_forests(w: Weight, ambient: dict[int, np.ndarray] | None = None) -> list[StoppingForest]:
    """One forest per maximal cube of the ambient collection."""
    lat = w.lattice
    masks = _ambient_masks(lat, ambient)
    forests = []
    covered = np.zeros(1, dtype=bool)
    for k in range(0, lat.k_min - 1, -1):
        if k < 0:
            parent, _ = lat.parent_table(k)
            covered = covered[parent] | masks[k + 1][parent]
        for flat in np.flatnonzero(masks[k] & ~covered):
            forests.append(stopping_forest(lat.cube(k, int(flat)), w, masks))
    return forests


def packing_report(forest: StoppingForest, w: Weight) -> PackingReport:
    """
    Maxima over stopping cubes R of the three packing ratios: total measure,
    L2 overlap and total weight of the stopping cubes inside R.
    """
    lat = forest.lattice
    n = len(forest.stopping)
    volumes = np.array([Q.volume for Q in forest.stopping])
    weights = np.array([w.measure(Q) for Q in forest.stopping])
    lebesgue_sums = np.zeros(n)
    weight_sums = np.zeros(n)
    # walk every stopping cube up its chain of stopping ancestors
    origin = np.arange(n)
    cur = np.arange(n)
    while cur.size:
        np.add.at(lebesgue_sums, cur, volumes[origin])
        np.add.at(weight_sums, cur, weights[origin])
        up = forest.parents[cur]
        keep = up >= 0
        origin, cur = origin[keep], up[keep]
    squares = np.zeros(n)
    cells = forest.owner[lat.k_min][lat.labels(lat.k_min)]
    cur = cells[cells >= 0]
    count = 1
    while cur.size:
        np.add.at(squares, cur, count**2)
        cur = forest.parents[cur]
        cur = cur[cur >= 0]
        count += 1
    a2 = a2_constant(w)[0]
    leb = lebesgue_sums / volumes
    l2 = np.sqrt(squares * lat.cell_volume / volumes)
    weighted = weight_sums / (a2 * weights)
    worst = int(np.argmax(np.maximum.reduce([leb / (4 / 3), l2 / 2, weighted / (16 / 3)])))
    return PackingReport(
        lebesgue_ratio=float(leb.max()),
        l2_overlap_ratio=float(l2.max()),
        weighted_ratio=float(weighted.max()),
        a2=a2,
        worst_cube=forest.stopping[worst].ref(),
    )


def adversarial_packing_weight(lat: Lattice, t: float = 1.0 / 64, min_cells: int = 32) -> Weight:
    """
    One-dimensional weight whose stopping cubes nearly exhaust the packing bound.

    Inside each cube the first 7/32 (three dyadic pieces of relative sizes 1/8,
    1/16 and 1/32) carry almost all the mass; every piece becomes a stopping cube
    and repeats the pattern while it spans at least ``min_cells`` cells.
    """
    if lat.dimension != 1:
        raise ValueError(f"Adversarial packing weight is one-dimensional, got dimension {lat.dimension}")
    filled = 7.0 / 32.0
    if not 0 < t * (1 - filled) < 4.0 / 32.0:
        raise ValueError(f"Background fraction {t} breaks the density quadrupling")
    N = lat.side_cells
    values = np.zeros(N)

    def fill(start: int, length: int, rho: float) -> None:
        cells = (start + np.arange(length)) % N
        if length < min_cells:
            values[cells] = rho
            return
        values[cells] = t * rho
        inner = rho * (1 - t * (1 - filled)) / filled
        for offset, size in ((0, length // 8), (length // 8, length // 16), (3 * length // 16, length // 32)):
            fill(start + offset, size, inner)

    fill(int(lat.start(lat.cube(0, 0))[0]), N, 1.0)
    return Weight(lat, values)


def _subtree_sums(lat: Lattice, a: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    sums = {lat.k_min: np.asarray(a.get(lat.k_min, np.zeros(lat.n_cubes(lat.k_min))), dtype=np.float64)}
    for k in range(lat.k_min + 1, 1):
        own = np.asarray(a.get(k, np.zeros(lat.n_cubes(k))), dtype=np.float64)
        sums[k] = own + sums[k - 1][lat.children_table(k)].sum(axis=1)
    return sums


def carleson_violation(a: dict[int, np.ndarray], mu: Weight) -> tuple[float, CubeId] | None:
    """Worst cube where the sum of a over its subcubes exceeds mu of the cube, if any."""
    lat = mu.lattice
    sums = _subtree_sums(lat, a)
    masses = {k: v * lat.cell_volume for k, v in lat.aggregate(mu.values).items()}
    worst = None
    for k in reversed(lat.levels):
        if np.any(np.asarray(a.get(k, 0.0)) < 0):
            raise ValueError(f"Carleson sequence has negative entries at level {k}")
        excess = sums[k] / masses[k]
        flat = int(np.argmax(excess))
        if excess[flat] > 1 + 1e-12 and (worst is None or excess[flat] > worst[0]):
            worst = (float(excess[flat]), lat.cube(k, flat))
    return worst


def carleson_embedding_ratio(a: dict[int, np.ndarray], mu: Weight, f: StepFunction) -> float:
    """
    sum_R a_R |f_R|^2 / ||f||^2_{L2(mu)}, f_R the mu-average of f over R.

    Raises:
        ValueError: When the Carleson condition fails, naming the witness cube
    """
    check_same_lattice(mu, f)
    lat = mu.lattice
    violation = carleson_violation(a, mu)
    if violation is not None:
        raise ValueError(
            f"Carleson condition violated on {violation[1]}: subtree sum is {violation[0]:.6g} times mu(R)"
        )
    norm2 = float(np.sum(f.values**2 * mu.values)) * lat.cell_volume
    if norm2 == 0:
        raise ValueError("f vanishes in L2(mu)")
    num = lat.aggregate(f.values * mu.values)
    den = lat.aggregate(mu.values)
    total = 0.0
    for k, coeffs in a.items():
        averages = num[k] / den[k]
        total += float(np.sum(np.asarray(coeffs) * averages**2))
    return total / norm2


def _normalize_carleson(a: dict[int, np.ndarray], mu: Weight) -> dict[int, np.ndarray]:
    lat = mu.lattice
    sums = _subtree_sums(lat, a)
    masses = {k: v * lat.cell_volume for k, v in lat.aggregate(mu.values).items()}
    scale = max(float((sums[k] / masses[k]).max()) for k in lat.levels)
    return {k: v / scale for k, v in a.items()} if scale > 0 else a


def random_carleson_sequence(mu: Weight, seed: int, density: float = 0.3) -> dict[int, np.ndarray]:
    """Random sparse non-negative sequence scaled so that its worst Carleson ratio is exactly 1."""
    lat = mu.lattice
    a = {}
    for k in lat.levels:
        rng = rng_stream(seed, CARLESON_STREAM, 1 - k)
        n = lat.n_cubes(k)
        a[k] = rng.random(n) * (rng.random(n) < density) * 2.0 ** (k * lat.dimension)
    return _normalize_carleson(a, mu)


def carleson_chain_seed(mu: Weight, beta: float = 0.45) -> tuple[dict[int, np.ndarray], StepFunction]:
    """Chain of cubes through the first cell with a_R = |R|/2 against a power singularity at the origin."""
    lat = mu.lattice
    a = {k: np.zeros(lat.n_cubes(k)) for k in lat.levels}
    corner = (0.5 / lat.side_cells,) * lat.dimension
    for k in lat.levels:
        Q = lat.cube_containing(corner, k)
        a[k][Q.flat] = Q.volume / 2
    mid = (np.indices((lat.side_cells,) * lat.dimension).reshape(lat.dimension, -1) + 0.5) / lat.side_cells
    f = StepFunction(lat, np.sqrt(np.sum(mid**2, axis=0)) ** (-beta * lat.dimension))
    return _normalize_carleson(a, mu), f


def carleson_search(
    mu: Weight, n_steps: int = 2000, seed: int = 0, step: float = 0.3
) -> tuple[float, dict[int, np.ndarray], StepFunction]:
    """
    Randomized hill climb on the embedding ratio, started from the chain seed.

    Each step perturbs log a and log f multiplicatively, rescales a to satisfy the
    Carleson condition and keeps the proposal when the ratio improves.
    """
    a, f = carleson_chain_seed(mu)
    best = carleson_embedding_ratio(a, mu, f)
    rng = rng_stream(seed, CARLESON_STREAM)
    support = {k: v > 0 for k, v in a.items()}
    for i in range(n_steps):
        proposal_a = {
            k: np.where(support[k] | (rng.random(v.size) < 0.01), np.maximum(v, 1e-9 * mu.lattice.cell_volume), 0.0)
            * np.exp(step * rng.standard_normal(v.size))
            for k, v in a.items()
        }
        proposal_a = _normalize_carleson(proposal_a, mu)
        proposal_f = StepFunction(f.lattice, f.values * np.exp(step * rng.standard_normal(f.values.size)))
        ratio = carleson_embedding_ratio(proposal_a, mu, proposal_f)
        if ratio > best:
            best, a, f = ratio, proposal_a, proposal_f
            support = {k: v > 0 for k, v in a.items()}
            logger.debug(f"carleson_search step {i}: ratio {best:.6f}")
    return best, a, f


def _cell_values(lat: Lattice, level: int, child_values: np.ndarray) -> np.ndarray:
    """Cell values of functions given per cube at ``level`` by their values on its children."""
    parent, position = lat.parent_table(level - 1)
    child = lat.labels(level - 1)
    return child_values[..., parent[child], position[child]]


def _prefix_maxima(lat: Lattice, per_level: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    """
    For each level L the cell values of max over k < L of |C(k) - C(L)|, where
    C(k) sums the given per-level cell functions over levels above k.
    """
    cumulative = {0: np.zeros(lat.n_cells)}
    for k in range(-1, lat.k_min - 1, -1):
        cumulative[k] = cumulative[k + 1] + per_level.get(k + 1, 0.0)
    maxima = {}
    for L in lat.levels:
        below = [np.abs(cumulative[k] - cumulative[L]) for k in range(lat.k_min, L)]
        maxima[L] = np.max(below, axis=0) if below else np.zeros(lat.n_cells)
    return maxima


def jn_maximal(S: ElementaryShift, w: Weight, R: CubeId) -> StepFunction:
    """
    f*_P(x) = sup over cubes Q containing x of |sum over active R' strictly containing Q of f_R'(x)|,
    with f_R' = S_{R'}(w) and P the active cubes of ``S``, all inside ``R``.
    """
    lat = S.lattice
    for Q in S.active_cubes():
        if not lat.contains(R, Q):
            raise ValueError(f"Active cube {Q} is not inside {R}")
    per_level = {k: apply_values(restrict_levels(S, [k]), w.values) for k in S.blocks}
    cumulative = np.zeros(lat.n_cells)
    fstar = np.zeros(lat.n_cells)
    for k in range(0, lat.k_min - 1, -1):
        fstar = np.maximum(fstar, np.abs(cumulative))
        cumulative = cumulative + per_level.get(k, 0.0)
    return StepFunction(lat, fstar * lat.indicator(R))


def _tail_slope(t: np.ndarray, measures: np.ndarray) -> float | None:
    keep = measures > 0
    if np.unique(t[keep]).size < 2:
        return None
    return fit_linear(t[keep], np.log2(measures[keep])).slope


def jn_distribution(
    fstar: StepFunction, w: Weight, R: CubeId, B1: float, t_grid: Sequence[float] | None = None
) -> DistributionCurve:
    """Level sets of ``fstar`` on ``R`` against the exponential John-Nirenberg bounds."""
    check_same_lattice(fstar, w)
    t = np.asarray(range(1, 41) if t_grid is None else t_grid, dtype=np.float64)
    if B1 <= 0:
        raise ValueError(f"B1 must be positive, got {B1}")
    rho = w.density(R)
    local = fstar.restrict(R)
    w_inv = w.reciprocal()
    decay = 2.0 ** (-t / (2 * B1))
    lebesgue_measures = distribution_function(local, 16 * t * rho)
    weighted_measures = distribution_function(local, 20 * t * rho, measure=w_inv)
    lebesgue_bounds = 2 * math.sqrt(2) * decay * R.volume
    weighted_bounds = 24 * decay * w_inv.measure(R)
    passes = (lebesgue_measures <= lebesgue_bounds * (1 + _SLACK)) & (
        weighted_measures <= weighted_bounds * (1 + _SLACK)
    )
    return DistributionCurve(
        thresholds=t.tolist(),
        lebesgue_measures=lebesgue_measures.tolist(),
        lebesgue_bounds=lebesgue_bounds.tolist(),
        weighted_measures=weighted_measures.tolist(),
        weighted_bounds=weighted_bounds.tolist(),
        passes=passes.tolist(),
        tail_slope=_tail_slope(t, lebesgue_measures),
    )


def random_phi_family(lat: Lattice, seed: int, density: float = 0.5, scale: float = 1.0) -> dict[int, np.ndarray]:
    """Child values in [-scale, scale] for a random subset of the non-finest cubes."""
    family = {}
    for k in range(lat.k_min + 1, 1):
        rng = rng_stream(seed, PHI_STREAM, -k)
        values = rng.uniform(-scale, scale, size=(lat.n_cubes(k), lat.n_children))
        family[k] = values * (rng.random(lat.n_cubes(k)) < density)[:, None]
    return family


def jn_abstract_check(
    lat: Lattice, phi: dict[int, np.ndarray], t_grid: Sequence[float] | None = None
) -> AbstractJNReport:
    """
    Measure delta = sup_R |{phi*_R > 1}| / |R| and check the level sets
    |{phi*_R > t}| <= delta^((t-1)/2) |R| for every cube R.
    """
    for k, values in phi.items():
        if np.abs(values).max(initial=0.0) > 1:
            raise ValueError(f"phi family exceeds 1 in sup norm at level {k}")
    t = np.asarray([1.5, 2, 3, 4, 6, 8] if t_grid is None else t_grid, dtype=np.float64)
    per_level = {k: _cell_values(lat, k, v) for k, v in phi.items() if k > lat.k_min}
    maxima = _prefix_maxima(lat, per_level)

    def worst_fraction(threshold: float) -> float:
        worst = 0.0
        for L in lat.levels:
            counts = lat.aggregate((maxima[L] > threshold).astype(np.float64))[L]
            worst = max(worst, float(counts.max()) / (lat.n_cells // lat.n_cubes(L)))
        return worst

    delta = worst_fraction(1.0)
    fractions = [worst_fraction(float(x)) for x in t]
    bounds = [delta ** ((x - 1) / 2) if x > 1 else 1.0 for x in t]
    return AbstractJNReport(
        delta=delta,
        thresholds=t.tolist(),
        worst_ratios=fractions,
        passes=[f <= b + _SLACK for f, b in zip(fractions, bounds)],
        hypothesis_met=delta < 1,
    )


def alpha_classes(forest: StoppingForest, R: CubeId, w: Weight) -> dict[int, list[CubeId]]:
    """Split P(R) into the bands 4^-a rho_R < rho_Q <= 4^(1-a) rho_R, a >= 0."""
    rho_R = w.density(R)
    classes: dict[int, list[CubeId]] = {}
    for Q in forest.partition()[R]:
        x = w.density(Q) / rho_R
        if x > 4 * (1 + _SLACK):
            raise ValueError(f"Cube {Q} has density {x:.6g} times that of {R}, above the stopping threshold")
        alpha = max(0, math.floor(-math.log(x, 4)) + 1)
        while alpha > 0 and x > 4.0 ** (1 - alpha):
            alpha -= 1
        while x <= 4.0 ** (-alpha):
            alpha += 1
        classes.setdefault(alpha, []).append(Q)
    return dict(sorted(classes.items()))


def final_norm_check(S: ElementaryShift, w: Weight, forest: StoppingForest, B1: float) -> tuple[float, dict[CubeId, float]]:
    """
    Empirical C1 = ||f_P(R)||_2 / (B1 rho_R |R|^1/2) per stopping cube, f_P(R) = S_P(R)(w)
    with P(R) restricted to the active cubes of ``S``; returns the maximum and the per-cube values.
    """
    if B1 <= 0:
        raise ValueError(f"B1 must be positive, got {B1}")
    active = set(S.active_cubes())
    values: dict[CubeId, float] = {}
    for R, members in forest.partition().items():
        cubes = [Q for Q in members if Q in active]
        f_PR = StepFunction(S.lattice, apply_values(restrict(S, cubes), w.values))
        values[R] = f_PR.l2_norm() / (B1 * w.density(R) * math.sqrt(R.volume))
    return max(values.values(), default=0.0), values
