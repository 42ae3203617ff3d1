"""Dyadic shift operators, their weighted application and norm measurements.

A shift stores, per active level, coefficient tensors ``u`` and ``v`` of shape
``(A, K, Pm, Pn, 2**d)``: for active cube ``a``, component ``k`` and the pair of
descendants ``(Q', Q'')`` (``p`` at depth ``m``, ``q`` at depth ``n``), ``u`` holds the
Haar coefficients of the function tested against ``f`` on ``Q'`` and ``v`` those of the
output function on ``Q''``. The cube's contribution is ``|Q|^-1 (f, u) v``.
"""

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg

from dyadlab.haar import coefficient_pyramid, haar_function_values, haar_matrix, synthesize_pyramid, weighted_haar_basis
from dyadlab.lattice import CubeId, Lattice
from dyadlab.logger import dyadlab_logger as logger
from dyadlab.report_output import CubeRatio, NormReport, PredictedBounds, TestingReport
from dyadlab.signals import StepFunction, Weight, a2_constant, check_same_lattice, joint_a2, lebesgue
from dyadlab.utils import array_hash, rng_stream, write_csv

SHIFT_STREAM = 4
AUDIT_STREAM = 5
POWER_STREAM = 6
CORPUS_STREAM = 7

# elements processed per chunk in batched application
_CHUNK_BUDGET = 1 << 22

Rule = Callable[[Lattice, int, np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True, eq=False)
class ShiftBlock:
    cubes: np.ndarray
    u: np.ndarray
    v: np.ndarray

    @property
    def components(self) -> int:
        return self.u.shape[1]


@dataclass(frozen=True, eq=False)
class ElementaryShift:
    lattice: Lattice
    m: int
    n: int
    generalized: bool
    blocks: dict[int, ShiftBlock] = field(default_factory=dict)
    rescale_factor: float = 1.0

    @property
    def complexity(self) -> int:
        return max(self.m, self.n)

    @property
    def components(self) -> int:
        return max((b.components for b in self.blocks.values()), default=1)

    def active_cubes(self) -> list[CubeId]:
        return [
            self.lattice.cube(level, int(flat))
            for level in sorted(self.blocks, reverse=True)
            for flat in self.blocks[level].cubes
        ]

    def is_zero(self) -> bool:
        return all(not np.any(b.u) or not np.any(b.v) for b in self.blocks.values())

    @cached_property
    def _cost(self) -> int:
        return sum(b.u[..., 0].size for b in self.blocks.values())


def sup_norms(lat: Lattice, level: int, coeffs: np.ndarray) -> np.ndarray:
    """Sup norms of the generalized Haar functions with coefficients on cubes at ``level``."""
    return np.abs(coeffs @ haar_matrix(lat.dimension)).max(axis=-1) / np.sqrt(2.0 ** (level * lat.dimension))


def admissible_levels(lat: Lattice, m: int, n: int, generalized: bool) -> range:
    return range(lat.k_min + max(m, n) + (0 if generalized else 1), 1)


def build_shift(
    lat: Lattice,
    m: int,
    n: int,
    rule: Rule,
    active: Iterable[CubeId] | None = None,
    generalized: bool = False,
) -> ElementaryShift:
    """
    Assemble a shift from a coefficient rule and enforce the sup-norm normalization.

    Pairs whose product of sup norms exceeds 1 are scaled down to exactly 1; the
    smallest applied factor is recorded as ``rescale_factor``.

    Args:
        lat: Lattice the shift lives on
        m: Depth of the input descendants
        n: Depth of the output descendants
        rule: Maps ``(lattice, level, flat cube indices)`` to the ``(u, v)`` tensors
        active: Active cubes; all admissible cubes when omitted
        generalized: Whether constant parts (Haar index 0) are allowed

    Raises:
        ValueError: For a cube too close to the finest level or malformed coefficients
    """
    if m < 0 or n < 0:
        raise ValueError(f"Shift parameters must be non-negative, got ({m}, {n})")
    allowed = admissible_levels(lat, m, n, generalized)
    by_level: dict[int, list[int]] = {}
    if active is None:
        for level in allowed:
            by_level[level] = list(range(lat.n_cubes(level)))
    else:
        for Q in active:
            if Q.level not in allowed:
                raise ValueError(
                    f"Active cube {Q} is too close to the finest level {lat.k_min} for parameters ({m}, {n})"
                )
            by_level.setdefault(Q.level, []).append(Q.flat)

    p = lat.n_children
    blocks: dict[int, ShiftBlock] = {}
    rescale = 1.0
    for level, flats in sorted(by_level.items(), reverse=True):
        cubes = np.unique(np.asarray(flats, dtype=np.int64))
        if cubes.size == 0:
            continue
        u, v = rule(lat, level, cubes)
        u = np.array(u, dtype=np.float64)
        v = np.array(v, dtype=np.float64)
        expected = (cubes.size, u.shape[1] if u.ndim == 5 else -1, p**m, p**n, p)
        if u.ndim != 5 or u.shape != expected or v.shape != expected:
            raise ValueError(f"Rule returned shapes {u.shape}, {v.shape}; expected {expected}")
        for name, coeffs, depth in (("input", u, m), ("output", v, n)):
            if not generalized and np.any(coeffs[..., 0]):
                raise ValueError(f"Non-generalized shift has constant parts in its {name} functions")
            if level - depth == lat.k_min and np.any(coeffs[..., 1:]):
                raise ValueError(f"Finest-level {name} cubes at level {lat.k_min} cannot carry Haar parts")
        product = sup_norms(lat, level - m, u) * sup_norms(lat, level - n, v)
        over = product > 1.0 + 1e-12
        if np.any(over):
            factor = np.where(over, 1.0 / np.sqrt(np.where(over, product, 1.0)), 1.0)
            u *= factor[..., None]
            v *= factor[..., None]
            rescale = min(rescale, float(factor.min() ** 2))
        blocks[level] = ShiftBlock(cubes=cubes, u=u, v=v)
    if rescale < 1.0:
        logger.warning(f"build_shift: coefficients rescaled to meet normalization, factor {rescale:.6g}")
    return ElementaryShift(lat, m, n, generalized, blocks, rescale)


def normalization_audit(S: ElementaryShift, tol: float = 1e-12) -> tuple[bool, float, CubeId | None]:
    """Worst product of sup norms over all pairs, with the cube carrying it."""
    worst, worst_cube = 0.0, None
    for level, block in S.blocks.items():
        product = sup_norms(S.lattice, level - S.m, block.u) * sup_norms(S.lattice, level - S.n, block.v)
        if product.size == 0:
            continue
        flat = np.unravel_index(int(np.argmax(product)), product.shape)
        if product[flat] > worst:
            worst, worst_cube = float(product[flat]), S.lattice.cube(level, int(block.cubes[flat[0]]))
    return worst <= 1.0 + tol, worst, worst_cube


def _zero_rule(K: int = 1) -> Rule:
    def rule(lat: Lattice, level: int, cubes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (np.zeros((cubes.size, K, 1, 1, lat.n_children)),) * 2

    return rule


def zero_shift(lat: Lattice) -> ElementaryShift:
    return ElementaryShift(lat, 0, 0, False, {}, 1.0)


def random_rule(m: int, n: int, seed: int) -> Rule:
    """Gaussian Haar coefficients, each function scaled to unit sup norm."""

    def rule(lat: Lattice, level: int, cubes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rng = rng_stream(seed, SHIFT_STREAM, -level)
        shape = (cubes.size, 1, lat.n_children**m, lat.n_children**n, lat.n_children)
        u = rng.standard_normal(shape)
        v = rng.standard_normal(shape)
        u[..., 0] = 0.0
        v[..., 0] = 0.0
        u /= sup_norms(lat, level - m, u)[..., None]
        v /= sup_norms(lat, level - n, v)[..., None]
        return u, v

    return rule


def random_shift(lat: Lattice, m: int, n: int, seed: int, active: Iterable[CubeId] | None = None) -> ElementaryShift:
    return build_shift(lat, m, n, random_rule(m, n, seed), active)


def random_signs(lat: Lattice, seed: int) -> dict[int, np.ndarray]:
    return {
        k: rng_stream(seed, SHIFT_STREAM, 100 - k).choice(np.array([-1.0, 1.0]), size=lat.n_cubes(k))
        for k in range(lat.k_min + 1, 1)
    }


def extremal_signs(w: Weight) -> dict[int, np.ndarray]:
    """
    Haar multiplier signs that align with the pairing of w^-1 1_Q and w 1_Q on
    the A2 witness cube Q, so that the multiplier's L2(w) norm is at least
    max(1, ([w]_A2 - 1) / [w]_A2^1/2).
    """
    lat = w.lattice
    _, Q = a2_constant(w)
    ind = lat.indicator(Q)
    pf = coefficient_pyramid(lat, ind / w.values)
    pg = coefficient_pyramid(lat, ind * w.values)
    signs = {}
    for k in range(lat.k_min + 1, 1):
        pairing = (pf[k][:, 1:] * pg[k][:, 1:]).sum(axis=1)
        signs[k] = np.where(pairing < 0, -1.0, 1.0)
    return signs


def one_weight_lower_bound(a2: float) -> float:
    """Norm every extremal multiplier reaches in L2(w) for a weight with [w]_A2 = a2."""
    if a2 < 1:
        raise ValueError(f"A2 constant must be >= 1, got {a2}")
    return max(1.0, float((a2 - 1.0) / np.sqrt(a2)))


def haar_multiplier(lat: Lattice, signs: dict[int, np.ndarray] | None = None) -> ElementaryShift:
    """h^j_Q -> sign_Q h^j_Q for every non-finest cube, one component per Haar index."""
    K = lat.n_children - 1

    def rule(lat: Lattice, level: int, cubes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        sign = np.ones(cubes.size) if signs is None else np.asarray(signs[level], dtype=np.float64)[cubes]
        root = np.sqrt(2.0 ** (level * lat.dimension))
        u = np.zeros((cubes.size, K, 1, 1, lat.n_children))
        for c in range(K):
            u[:, c, 0, 0, c + 1] = root
        v = u * sign[:, None, None, None, None]
        return u, v

    return build_shift(lat, 0, 0, rule)


def petermichl_shift(lat: Lattice) -> ElementaryShift:
    """The (0, 1) shift h_I -> 2^-1/2 (h_{I-} - h_{I+}) in dimension one."""
    if lat.dimension != 1:
        raise ValueError(f"petermichl_shift needs a 1-d lattice, got dimension {lat.dimension}")

    def rule(lat: Lattice, level: int, cubes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        root = np.sqrt(2.0**level)
        u = np.zeros((cubes.size, 1, 1, 2, 2))
        v = np.zeros((cubes.size, 1, 1, 2, 2))
        u[:, 0, 0, :, 1] = root
        v[:, 0, 0, 0, 1] = root / np.sqrt(2.0)
        v[:, 0, 0, 1, 1] = -root / np.sqrt(2.0)
        return u, v

    return build_shift(lat, 0, 1, rule)


def paraproduct(b: StepFunction) -> tuple[ElementaryShift, float]:
    """
    Generalized (0, 1) shift f -> sum_Q <f>_Q h_Q with h_Q the martingale difference of ``b``.

    ``h_Q`` is scaled by a common factor so that every sup norm is at most one;
    the factor is returned with the shift.
    """
    lat = b.lattice
    averages = {k: s / (lat.n_cells // lat.n_cubes(k)) for k, s in lat.aggregate(b.values).items()}
    largest = 0.0
    for k in range(lat.k_min + 1, 1):
        diff = averages[k - 1][lat.children_table(k)] - averages[k][:, None]
        largest = max(largest, float(np.abs(diff).max()))
    scale = 1.0 / largest if largest > 1.0 else 1.0

    def rule(lat: Lattice, level: int, cubes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        p = lat.n_children
        u = np.zeros((cubes.size, 1, 1, p, p))
        v = np.zeros((cubes.size, 1, 1, p, p))
        u[..., 0] = np.sqrt(2.0 ** (level * lat.dimension))
        children = lat.children_table(level)[cubes]
        diff = averages[level - 1][children] - averages[level][cubes][:, None]
        v[:, 0, 0, :, 0] = scale * diff * np.sqrt(2.0 ** ((level - 1) * lat.dimension))
        return u, v

    return build_shift(lat, 0, 1, rule, generalized=True), scale


def transpose(S: ElementaryShift) -> ElementaryShift:
    """The shift with the two descendant families exchanged; its kernel is the transposed kernel."""
    blocks = {
        level: ShiftBlock(
            cubes=block.cubes,
            u=np.ascontiguousarray(block.v.transpose(0, 1, 3, 2, 4)),
            v=np.ascontiguousarray(block.u.transpose(0, 1, 3, 2, 4)),
        )
        for level, block in S.blocks.items()
    }
    return ElementaryShift(S.lattice, S.n, S.m, S.generalized, blocks, S.rescale_factor)


def restrict(S: ElementaryShift, A: Iterable[CubeId]) -> ElementaryShift:
    """Same coefficients on the cubes of ``A``, none elsewhere."""
    wanted: dict[int, set[int]] = {}
    for Q in A:
        wanted.setdefault(Q.level, set()).add(Q.flat)
    blocks = {}
    for level, flats in wanted.items():
        block = S.blocks.get(level)
        present = set() if block is None else set(int(c) for c in block.cubes)
        missing = flats - present
        if missing:
            raise ValueError(f"Cubes {sorted(missing)} at level {level} are not active in the shift")
        keep = np.isin(block.cubes, sorted(flats))
        blocks[level] = ShiftBlock(cubes=block.cubes[keep], u=block.u[keep], v=block.v[keep])
    return ElementaryShift(S.lattice, S.m, S.n, S.generalized, blocks, S.rescale_factor)


def restrict_levels(S: ElementaryShift, levels: Iterable[int]) -> ElementaryShift:
    keep = set(levels)
    return ElementaryShift(
        S.lattice,
        S.m,
        S.n,
        S.generalized,
        {k: b for k, b in S.blocks.items() if k in keep},
        S.rescale_factor,
    )


def slice_shift(S: ElementaryShift, r: int, j: int) -> ElementaryShift:
    """Restriction to the scale-separated slice of levels k with (-k) mod (r + 1) == j."""
    if not 0 <= j <= r:
        raise ValueError(f"Slice index must lie in [0, {r}], got {j}")
    return restrict_levels(S, [k for k in S.blocks if (-k) % (r + 1) == j])


def _apply_chunk(S: ElementaryShift, values: np.ndarray) -> np.ndarray:
    lat = S.lattice
    F = coefficient_pyramid(lat, values)
    batch = values.shape[0]
    G: dict[int, np.ndarray] = {}
    for level, block in S.blocks.items():
        desc_m = lat.descendants(level, block.cubes, S.m)
        desc_n = lat.descendants(level, block.cubes, S.n)
        inputs = F[level - S.m][:, desc_m, :]
        # finest-level inputs only carry the constant coefficient
        tested = np.einsum("bapj,akpqj->bakpq", inputs, block.u[..., : inputs.shape[-1]])
        out = np.einsum("bakpq,akpqj->baqj", tested, block.v) / 2.0 ** (level * lat.dimension)
        target = G.setdefault(level - S.n, np.zeros((batch, lat.n_cubes(level - S.n), lat.n_children)))
        np.add.at(target.swapaxes(0, 1), desc_n, out.transpose(1, 2, 0, 3))
    if not G:
        return np.zeros_like(values)
    return synthesize_pyramid(lat, G)


def apply_values(S: ElementaryShift, values: np.ndarray) -> np.ndarray:
    """Matrix-free application to cell values of shape ``(N,)`` or ``(B, N)``."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] != S.lattice.n_cells:
        raise ValueError(f"Lattice mismatch: expected {S.lattice.n_cells} cells, got {values.shape[-1]}")
    single = values.ndim == 1
    batch = values.reshape(-1, S.lattice.n_cells)
    chunk = max(1, _CHUNK_BUDGET // max(1, S._cost, S.lattice.n_cells))
    out = np.concatenate([_apply_chunk(S, batch[i : i + chunk]) for i in range(0, batch.shape[0], chunk)])
    return out[0] if single else out.reshape(values.shape)


def _check_lattice(S: ElementaryShift, *functions: StepFunction) -> None:
    for f in functions:
        if f.lattice != S.lattice:
            raise ValueError("Lattice mismatch between shift and step function")


def apply(S: ElementaryShift, f: StepFunction) -> StepFunction:
    _check_lattice(S, f)
    return StepFunction(S.lattice, apply_values(S, f.values))


def apply_weighted(S: ElementaryShift, u: Weight, f: StepFunction) -> StepFunction:
    """S_mu f with dmu = u dx."""
    _check_lattice(S, u, f)
    return StepFunction(S.lattice, apply_values(S, f.values * u.values))


def adjoint_apply(S: ElementaryShift, v: Weight, g: StepFunction) -> StepFunction:
    """S*_nu g, the adjoint of S_mu between L2(mu) and L2(nu) for any mu."""
    _check_lattice(S, v, g)
    return StepFunction(S.lattice, apply_values(transpose(S), g.values * v.values))


def _block_terms(S: ElementaryShift, level: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Dense rank-one terms of one level: input rows, output rows, weights and owning cube."""
    lat = S.lattice
    block = S.blocks[level]
    A, K, Pm, Pn, p = block.u.shape
    desc_m = lat.descendants(level, block.cubes, S.m)
    desc_n = lat.descendants(level, block.cubes, S.n)
    in_cubes = np.broadcast_to(desc_m[:, None, :, None], (A, K, Pm, Pn)).reshape(-1)
    out_cubes = np.broadcast_to(desc_n[:, None, None, :], (A, K, Pm, Pn)).reshape(-1)
    owner = np.broadcast_to(np.arange(A)[:, None, None, None], (A, K, Pm, Pn)).reshape(-1)
    U = haar_function_values(lat, level - S.m, in_cubes, block.u.reshape(-1, p))
    V = haar_function_values(lat, level - S.n, out_cubes, block.v.reshape(-1, p))
    weights = np.full(U.shape[0], 2.0 ** (-level * lat.dimension))
    return U, V, weights, owner


def dense_kernel(S: ElementaryShift) -> np.ndarray:
    """Kernel sum over Q of a_Q(x, y) at cell pairs, assembled from the explicit Haar functions."""
    N = S.lattice.n_cells
    K = np.zeros((N, N))
    for level in S.blocks:
        U, V, weights, _ = _block_terms(S, level)
        K += (V.T * weights) @ U
    return K


def dense_matrix(S: ElementaryShift) -> np.ndarray:
    """Matrix of S acting on cell values."""
    return dense_kernel(S) * S.lattice.cell_volume


def kernel_audit(S: ElementaryShift) -> tuple[bool, float]:
    """Worst ratio of sup |a_Q| to K |Q|^-1 over active cubes."""
    worst = 0.0
    for level in S.blocks:
        U, V, weights, owner = _block_terms(S, level)
        for a in np.unique(owner):
            sel = owner == a
            a_Q = (V[sel].T * weights[sel]) @ U[sel]
            bound = S.components * 2.0 ** (-level * S.lattice.dimension)
            worst = max(worst, float(np.abs(a_Q).max()) / bound)
    return worst <= 1.0 + 1e-12, worst


def _power_iteration(
    forward: Callable[[np.ndarray], np.ndarray],
    backward: Callable[[np.ndarray], np.ndarray],
    size: int,
    tol: float,
    max_iter: int,
    seed: int,
) -> tuple[float, int, float, bool]:
    if tol <= 0:
        raise ValueError(f"Tolerance must be positive, got {tol}")
    x = rng_stream(seed, POWER_STREAM).standard_normal(size)
    x /= np.linalg.norm(x)
    ev_prev, best, residual = 0.0, 0.0, np.inf
    for iteration in range(1, max_iter + 1):
        y = backward(forward(x))
        ev = float(np.dot(x, y))
        norm_y = float(np.linalg.norm(y))
        if norm_y == 0.0:
            return 0.0, iteration, 0.0, True
        best = max(best, ev)
        residual = abs(ev - ev_prev) / ev if ev > 0 else np.inf
        logger.debug(f"power iteration {iteration}: ev={ev:.12g} residual={residual:.3g}")
        if residual < tol:
            return float(np.sqrt(ev)), iteration, residual, True
        x = y / norm_y
        ev_prev = ev
    logger.warning(f"Power iteration did not converge after {max_iter} iterations, residual {residual:.3g}")
    return float(np.sqrt(best)), max_iter, float(residual), False


def operator_norm(
    S: ElementaryShift,
    w: Weight | None = None,
    tol: float = 1e-8,
    max_iter: int = 10_000,
    seed: int = 0,
) -> NormReport:
    """||S||_{L2(w) -> L2(w)} as the top singular value of W^1/2 S W^-1/2, W = diag(w * cell volume)."""
    w = lebesgue(S.lattice) if w is None else w
    _check_lattice(S, w)
    d = np.sqrt(w.values * S.lattice.cell_volume)
    St = transpose(S)
    norm, iterations, residual, converged = _power_iteration(
        lambda x: d * apply_values(S, x / d),
        lambda y: apply_values(St, d * y) / d,
        S.lattice.n_cells,
        tol,
        max_iter,
        seed,
    )

    return NormReport(
        weight_hash=array_hash(w.values),
        a2=a2_constant(w)[0],
        norm=norm,
        iterations=iterations,
        residual=residual,
        seed=seed,
        converged=converged,
    )


def two_weight_norm(
    S: ElementaryShift,
    u: Weight,
    v: Weight,
    tol: float = 1e-8,
    max_iter: int = 10_000,
    seed: int = 0,
) -> NormReport:
    """||S_mu||_{L2(mu) -> L2(nu)} with dmu = u dx and dnu = v dx."""
    _check_lattice(S, u, v)
    delta = S.lattice.cell_volume
    left = np.sqrt(v.values * delta)
    right = np.sqrt(u.values / delta)
    St = transpose(S)
    norm, iterations, residual, converged = _power_iteration(
        lambda x: left * apply_values(S, right * x),
        lambda y: right * apply_values(St, left * y),
        S.lattice.n_cells,
        tol,
        max_iter,
        seed,
    )
    return NormReport(
        weight_hash=array_hash(np.concatenate([u.values, v.values])),
        a2=joint_a2(u, v)[0],
        norm=norm,
        iterations=iterations,
        residual=residual,
        seed=seed,
        converged=converged,
    )


def dense_two_weight_norm(S: ElementaryShift, u: Weight, v: Weight) -> float:
    """Oracle: top singular value of the dense similarity-transformed matrix."""
    delta = S.lattice.cell_volume
    M = np.sqrt(v.values * delta)[:, None] * dense_matrix(S) * np.sqrt(u.values / delta)[None, :]
    return float(scipy.linalg.svdvals(M)[0]) if M.size else 0.0


def restricted_norm_audit(
    S: ElementaryShift, n_sets: int = 100, seed: int = 0, tol: float = 1e-8
) -> tuple[float, list[float]]:
    """Estimate of sup over random subcollections A of ||S_A||_2; each active cube kept with probability 1/2."""
    cubes = S.active_cubes()
    norms = []
    for i in range(n_sets):
        keep = rng_stream(seed, AUDIT_STREAM, i).random(len(cubes)) < 0.5
        sub = restrict(S, [Q for Q, k in zip(cubes, keep) if k])
        norms.append(operator_norm(sub, tol=tol, seed=seed).norm)
    return max(norms, default=0.0), norms


def spike_corpus(lat: Lattice, n_random: int = 64, seed: int = 0, max_spikes: int = 8) -> np.ndarray:
    """Unit-mass single-cell spikes followed by random signed sparse sums of spikes."""
    N = lat.n_cells
    spikes = np.eye(N) / lat.cell_volume
    rows = [spikes]
    if n_random:
        rng = rng_stream(seed, CORPUS_STREAM)
        extra = np.zeros((n_random, N))
        for i in range(n_random):
            count = int(rng.integers(2, max_spikes + 1))
            cells = rng.choice(N, size=count, replace=False)
            extra[i, cells] = rng.standard_normal(count)
            extra[i] /= np.abs(extra[i]).sum() * lat.cell_volume
        rows.append(extra)
    return np.concatenate(rows)


def weak11_constant(
    S: ElementaryShift,
    corpus: np.ndarray | None = None,
    lam_grid: Sequence[float] | None = None,
    seed: int = 0,
) -> float:
    """
    Max over the corpus of sup_lambda lambda |{|Sf| > lambda}| / ||f||_1.

    Without a lambda grid the supremum is exact: for sorted values a_(1) >= a_(2) >= ...
    of |Sf| it equals max_k a_(k) * k * cell volume.
    """
    lat = S.lattice
    corpus = spike_corpus(lat, seed=seed) if corpus is None else np.atleast_2d(corpus)
    out = np.abs(apply_values(S, corpus))
    l1 = np.abs(corpus).sum(axis=1) * lat.cell_volume
    if lam_grid is None:
        ranked = -np.sort(-out, axis=1)
        sup = (ranked * np.arange(1, lat.n_cells + 1) * lat.cell_volume).max(axis=1)
    else:
        lam = np.asarray(lam_grid, dtype=np.float64)
        measures = (out[:, :, None] > lam[None, None, :]).sum(axis=1) * lat.cell_volume
        sup = (measures * lam[None, :]).max(axis=1)
    keep = l1 > 0
    return float((sup[keep] / l1[keep]).max()) if np.any(keep) else 0.0


def _cube_indicators(lat: Lattice, level: int) -> np.ndarray:
    return (lat.labels(level)[None, :] == np.arange(lat.n_cubes(level))[:, None]).astype(np.float64)


def testing_constants(S: ElementaryShift, u: Weight, v: Weight, top: int = 5) -> TestingReport:
    """
    Exact sup over lattice cubes of the two testing ratios
    mu(Q)^-1 int_Q |S_mu 1_Q|^2 dnu and nu(Q)^-1 int_Q |S*_nu 1_Q|^2 dmu.
    """
    _check_lattice(S, u, v)
    lat = S.lattice
    St = transpose(S)
    delta = lat.cell_volume
    ratios: list[tuple[float, CubeId, bool]] = []
    for level in lat.levels:
        ind = _cube_indicators(lat, level)
        for adjoint, op, src, dst in ((False, S, u, v), (True, St, v, u)):
            out = apply_values(op, ind * src.values)
            mass = (ind * src.values).sum(axis=1) * delta
            tested = ((out**2) * ind * dst.values).sum(axis=1) * delta
            ratio = np.divide(tested, mass, out=np.zeros_like(tested), where=mass > 0)
            for flat in np.argsort(-ratio)[:top]:
                ratios.append((float(ratio[flat]), lat.cube(level, int(flat)), adjoint))
    ratios.sort(key=lambda item: -item[0])
    return TestingReport(
        B=ratios[0][0] if ratios else 0.0,
        joint_a2=joint_a2(u, v)[0],
        r=S.complexity,
        d=lat.dimension,
        worst=[CubeRatio(cube=Q.ref(), ratio=value, adjoint=adj) for value, Q, adj in ratios[:top]],
    )


def two_weight_bracket(B: float, joint: float, r: int, d: int) -> float:
    """2^(d/2) (r + 1) (B^1/2 + [mu, nu]^1/2) + r^2 [mu, nu]^1/2, up to an absolute constant."""
    if min(B, joint, r) < 0:
        raise ValueError("Bracket inputs must be non-negative")
    return 2 ** (d / 2) * (r + 1) * (B**0.5 + joint**0.5) + r**2 * joint**0.5


def two_weight_report(
    S: ElementaryShift,
    u: Weight,
    v: Weight,
    tol: float = 1e-8,
    max_iter: int = 10_000,
    seed: int = 0,
    top: int = 5,
) -> tuple[TestingReport, NormReport]:
    """Testing constants of ``S`` together with its measured two-weight norm and predicted bracket."""
    report = testing_constants(S, u, v, top=top)
    norm = two_weight_norm(S, u, v, tol=tol, max_iter=max_iter, seed=seed)
    bracket = two_weight_bracket(report.B, report.joint_a2, report.r, report.d)
    return report.model_copy(update={"measured_norm": norm.norm, "predicted_bracket": bracket}), norm


def predicted_bounds(
    B: float, joint: float, B2: float, a2: float, r: int, m: int, d: int
) -> PredictedBounds:
    if min(B, joint, B2, r, m) < 0 or a2 < 1:
        raise ValueError("Bound inputs must be non-negative with a2 >= 1")
    return PredictedBounds(
        two_weight_bracket=two_weight_bracket(B, joint, r, d),
        one_weight_bracket=2 ** (3 * d / 2) * (r + 1) ** 2 * (B2**2 + 1) * a2,
        B1=2 ** (d + 2) * B2**2 + 5,
        weak_bound=2 ** (d + 2) * B2**2 + 1 + 4 * m,
    )


def hilbert_schmidt_diagonal_check(S: ElementaryShift, u: Weight, v: Weight) -> tuple[bool, float, CubeId | None]:
    """
    Per active cube, the L2(mu) -> L2(nu) norm of the single-cube kernel against
    K [mu, nu]_A2^1/2; returns the worst ratio and its cube.
    """
    _check_lattice(S, u, v)
    lat = S.lattice
    delta = lat.cell_volume
    bound = S.components * np.sqrt(joint_a2(u, v)[0])
    worst, worst_cube = 0.0, None
    for level, block in S.blocks.items():
        U, V, weights, owner = _block_terms(S, level)
        for a in np.unique(owner):
            sel = owner == a
            left = V[sel] * np.sqrt(v.values * delta)[None, :]
            right = U[sel] * np.sqrt(u.values * delta)[None, :]
            _, Rv = np.linalg.qr(left.T)
            _, Ru = np.linalg.qr(right.T)
            core = (Rv * weights[sel]) @ Ru.T
            norm = float(scipy.linalg.svdvals(core)[0]) if core.size else 0.0
            ratio = norm / bound if bound > 0 else 0.0
            if ratio > worst:
                worst, worst_cube = ratio, lat.cube(level, int(block.cubes[a]))
    return worst <= 1.0 + 1e-10, worst, worst_cube


def haar_testing_check(
    S: ElementaryShift, u: Weight, v: Weight, cubes: Iterable[CubeId], B: float | None = None
) -> tuple[bool, float, CubeId | None]:
    """
    ||1_Q S_mu h||_nu^2 against 2^d (B + 4 K^2 [mu, nu]_A2) ||h||_mu^2 for each
    weighted Haar function h of mu on the given cubes.
    """
    _check_lattice(S, u, v)
    lat = S.lattice
    B = testing_constants(S, u, v).B if B is None else B
    bound = lat.n_children * (B + 4 * S.components**2 * joint_a2(u, v)[0])
    worst, worst_cube = 0.0, None
    delta = lat.cell_volume
    for Q in cubes:
        basis = weighted_haar_basis(u, Q)
        if not len(basis):
            continue
        inputs = np.stack([h.values for h in basis.functions])
        out = apply_values(S, inputs * u.values)
        ind = lat.indicator(Q)
        lhs = ((out**2) * ind * v.values).sum(axis=1) * delta
        norms = ((inputs**2) * u.values).sum(axis=1) * delta
        ratio = float((lhs / (bound * norms)).max()) if bound > 0 else 0.0
        if ratio > worst:
            worst, worst_cube = ratio, Q
    return worst <= 1.0 + 1e-10, worst, worst_cube


@dataclass(frozen=True, eq=False)
class WeightedParaproduct:
    """Dense weighted paraproduct sum_Q E^mu_Q f sum_R Delta^nu_R S_mu 1_Q over R at depth r."""

    shift: ElementaryShift
    u: Weight
    v: Weight
    r: int
    matrix: np.ndarray

    def apply(self, f: StepFunction) -> StepFunction:
        check_same_lattice(f, self.u)
        return StepFunction(f.lattice, self.matrix @ f.values)

    def norm(self) -> float:
        delta = self.shift.lattice.cell_volume
        M = np.sqrt(self.v.values * delta)[:, None] * self.matrix / np.sqrt(self.u.values * delta)[None, :]
        return float(scipy.linalg.svdvals(M)[0])


def weighted_paraproduct(S: ElementaryShift, u: Weight, v: Weight, r: int) -> WeightedParaproduct:
    """
    Weighted paraproduct of a shift acting from L2(mu) to L2(nu); for r >= n its
    norm is at most twice the square root of the testing constant.
    """
    _check_lattice(S, u, v)
    if r < 0:
        raise ValueError(f"Paraproduct depth must be non-negative, got {r}")
    lat = S.lattice
    delta = lat.cell_volume
    N = lat.n_cells
    matrix = np.zeros((N, N))
    v_sums = lat.aggregate(v.values)
    for level in range(lat.k_min + r + 1, 1):
        ind = _cube_indicators(lat, level)
        outputs = apply_values(S, ind * u.values)
        inner = level - r
        num = lat.aggregate(outputs * v.values)
        means = {
            k: np.divide(num[k], v_sums[k], out=np.zeros_like(num[k]), where=v_sums[k] > 0)
            for k in (inner, inner - 1)
        }
        # sum over R at the inner level of Delta^nu_R, restricted to Q
        diff = means[inner - 1][:, lat.labels(inner - 1)] - means[inner][:, lat.labels(inner)]
        D = diff * ind
        averaging = ind * u.values[None, :] * delta
        mu_Q = averaging.sum(axis=1)
        matrix += D.T @ (averaging / mu_Q[:, None])
    return WeightedParaproduct(S, u, v, r, matrix)


def write_shift_coefficients(S: ElementaryShift, path: Path | str) -> Path:
    lat = S.lattice

    def rows():
        for level in sorted(S.blocks, reverse=True):
            block = S.blocks[level]
            desc_m = lat.descendants(level, block.cubes, S.m)
            desc_n = lat.descendants(level, block.cubes, S.n)
            A, K, Pm, Pn, p = block.u.shape
            for a, k, pi, qi in np.ndindex(A, K, Pm, Pn):
                for j in range(p):
                    for jj in range(p):
                        value = block.u[a, k, pi, qi, j] * block.v[a, k, pi, qi, jj]
                        if value == 0:
                            continue
                        yield (
                            level,
                            " ".join(map(str, lat.cube(level, int(block.cubes[a])).index)),
                            k,
                            " ".join(map(str, lat.cube(level - S.m, int(desc_m[a, pi])).index)),
                            j,
                            " ".join(map(str, lat.cube(level - S.n, int(desc_n[a, qi])).index)),
                            jj,
                            value if j > 0 and jj > 0 else 0.0,
                            value if j == 0 or jj == 0 else 0.0,
                        )

    return write_csv(
        path,
        ["level", "cube", "component", "m_descendant", "j_in", "n_descendant", "j_out", "value", "constant_part"],
        rows(),
    )
