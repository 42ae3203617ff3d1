"""Goodness probabilities, Calderon-Zygmund kernel coefficients and their dyadic shift representation."""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from dyadlab.haar import haar_function_values
from dyadlab.lattice import (
    CubeId,
    GoodnessParams,
    Lattice,
    bad_offsets,
    is_bad,
    is_good_to_level,
    long_distance,
    sample_lattice,
    set_distance,
    standard_lattice,
)
from dyadlab.logger import dyadlab_logger as logger
from dyadlab.report_output import DecayEntry, DecayReport, MonteCarloEstimate
from dyadlab.shift import ElementaryShift, build_shift, dense_kernel, normalization_audit, restrict_levels
from dyadlab.utils import fit_loglog, rng_stream, write_csv

PI_GOOD_STREAM = 10
RHO_STREAM = 11
KERNEL_STREAM = 12
ENSEMBLE_STREAM = 13

# max over entries of |K(x,y) + K(y,x)| in standard errors for a Monte Carlo average
ANTISYMMETRY_Z_BOUND = 6.0

# offsets are tracked in int64 cube units
_MAX_HORIZON = 60

Kernel = Callable[[np.ndarray, np.ndarray], np.ndarray]
ShiftFamily = Callable[[Lattice], ElementaryShift]


def pi0_level(gamma: float, r0: int) -> int:
    """Smallest integer s with s >= 2/gamma + r0 (1 - gamma)/gamma."""
    return math.ceil(2 / gamma + r0 * (1 - gamma) / gamma)


def pi_good_given_R(
    q_offset: Sequence[int],
    s: int,
    params: GoodnessParams,
    n_samples: int,
    seed: int,
    horizon: int | None = None,
) -> MonteCarloEstimate:
    """
    Probability that Q is good given its position inside R, ``s`` levels above Q.

    ``q_offset`` is Q's position inside R per coordinate in units of l(Q). Ancestors up
    to R are fixed by that position, so a failure there gives exactly 0; above R the
    position of each ancestor inside its parent is resampled, up to ``horizon`` levels
    above Q (the top of the lattice when Q's level is known, otherwise a deep cutoff).
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    offset = np.asarray(q_offset, dtype=np.int64)
    if s < 0 or np.any(offset < 0) or np.any(offset >= (1 << s)):
        raise ValueError(f"Offset {tuple(offset)} does not lie inside a cube {s} levels up")
    horizon = _MAX_HORIZON if horizon is None else min(horizon, _MAX_HORIZON)
    s0 = pi0_level(params.gamma, params.r0)
    for t in range(params.r0 + 1, min(s, horizon) + 1):
        if bad_offsets(offset % (1 << t), t, params.gamma):
            return MonteCarloEstimate(estimate=0.0, standard_error=0.0, n_samples=n_samples, seed=seed, s0=s0)
    offsets = np.broadcast_to(offset, (n_samples, offset.size)).copy()
    bad = np.zeros(n_samples, dtype=bool)
    for t in range(s + 1, horizon + 1):
        bits = rng_stream(seed, PI_GOOD_STREAM, t).integers(0, 2, size=offsets.shape)
        offsets += bits << (t - 1)
        if t > params.r0:
            bad |= bad_offsets(offsets, t, params.gamma)
    p = 1.0 - float(bad.mean())
    return MonteCarloEstimate(
        estimate=p,
        standard_error=math.sqrt(p * (1 - p) / n_samples),
        n_samples=n_samples,
        seed=seed,
        s0=s0,
    )


def rho_qr(
    lat: Lattice,
    Q: CubeId,
    R: CubeId,
    alpha: float,
    params: GoodnessParams,
    n_samples: int,
    seed: int,
) -> MonteCarloEstimate:
    """
    Monte Carlo estimate of E sum over common ancestors M of (D(Q,R)/l(M))^(d+alpha) 1{Q good},
    with the lattice variables at R's level and above resampled.
    """
    if Q.level > R.level:
        raise ValueError(f"rho_qr needs l(Q) <= l(R), got levels {Q.level} and {R.level}")
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    d = lat.dimension
    D = long_distance(lat, Q, R)
    if not is_good_to_level(lat, Q, params, R.level - 1):
        return MonteCarloEstimate(estimate=0.0, standard_error=0.0, n_samples=n_samples, seed=seed)
    M_cells = lat.side_cells
    start_q = lat.start(Q)
    start_r = lat.start(R)
    base = lat.offset(R.level)
    levels = list(range(R.level, 0))
    bits = rng_stream(seed, RHO_STREAM).integers(0, 2, size=(n_samples, len(levels), d))
    shift = np.broadcast_to(base, (n_samples, d)).astype(np.int64)
    q_unit = lat.cube_cells(Q.level)
    good = np.ones(n_samples, dtype=bool)
    total = np.zeros(n_samples)
    for i, k in enumerate([*levels, 0]):
        side = lat.cube_cells(k)
        rel_q = (start_q - shift) % M_cells
        rel_r = (start_r - shift) % M_cells
        t = k - Q.level
        if t > params.r0:
            good &= ~bad_offsets((rel_q % side) // q_unit, t, params.gamma)
        common = np.all(rel_q // side == rel_r // side, axis=-1)
        total += common * (D / 2.0**k) ** (d + alpha)
        if i < len(levels):
            shift = shift + (bits[:, i, :] << (k - lat.k_min))
    samples = total * good
    mean = float(samples.mean())
    se = float(samples.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else 0.0
    return MonteCarloEstimate(estimate=mean, standard_error=se, n_samples=n_samples, seed=seed)


def hilbert_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Truncated Hilbert kernel 1/(x - y) on the unit interval."""
    return 1.0 / (x - y)


@dataclass(frozen=True, eq=False)
class KernelQuadrature:
    lattice: Lattice
    # cell-averaged kernel, rows indexed by the output cell
    matrix: np.ndarray
    refine: int

    @property
    def t1(self) -> np.ndarray:
        return self.matrix.sum(axis=1) * self.lattice.cell_volume

    @property
    def t_star1(self) -> np.ndarray:
        return self.matrix.sum(axis=0) * self.lattice.cell_volume


def kernel_quadrature(kernel: Kernel, lat: Lattice, refine: int = 1) -> KernelQuadrature:
    """
    Midpoint quadrature of the kernel on cell pairs, sub-cells of width 1/(refine N),
    excluding sub-cell pairs closer than one lattice cell.
    """
    if lat.dimension != 1:
        raise ValueError(f"Kernel quadrature is implemented in dimension 1, got {lat.dimension}")
    if refine < 1:
        raise ValueError(f"Refinement factor must be >= 1, got {refine}")
    N = lat.n_cells
    h = 1.0 / N
    sub = (np.arange(N * refine) + 0.5) * h / refine
    x, y = sub[:, None], sub[None, :]
    keep = np.abs(x - y) >= h * (1 - 1e-9)
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.where(keep, kernel(np.broadcast_to(x, keep.shape), np.broadcast_to(y, keep.shape)), 0.0)
    matrix = values.reshape(N, refine, N, refine).mean(axis=(1, 3))
    return KernelQuadrature(lat, matrix, refine)


@dataclass(frozen=True, eq=False)
class CZCoefficients:
    lattice: Lattice
    pairs: list[tuple[CubeId, CubeId]]
    # <T~ h_Q, h_R> for each pair
    values: np.ndarray
    flagged: list[tuple[CubeId, CubeId]] = field(default_factory=list)

    def as_dict(self) -> dict[tuple[CubeId, CubeId], float]:
        return {pair: float(v) for pair, v in zip(self.pairs, self.values)}


def _haar_rows(lat: Lattice, cubes: Sequence[CubeId]) -> np.ndarray:
    rows = np.zeros((len(cubes), lat.n_cells))
    for level in {Q.level for Q in cubes}:
        idx = [i for i, Q in enumerate(cubes) if Q.level == level]
        coeffs = np.zeros((len(idx), lat.n_children))
        coeffs[:, 1] = 1.0
        flats = np.array([cubes[i].flat for i in idx])
        rows[idx] = haar_function_values(lat, level, flats, coeffs)
    return rows


def _too_close(lat: Lattice, Q: CubeId, R: CubeId) -> bool:
    """Pairs at the first resolved level whose supports touch within one cell."""
    finest = lat.k_min + 1
    return min(Q.level, R.level) == finest and set_distance(lat, Q, R) < lat.cell_volume


def cz_coefficients(
    kernel: Kernel,
    lat: Lattice,
    pairs: Iterable[tuple[CubeId, CubeId]],
    refine: int = 1,
    quadrature: KernelQuadrature | None = None,
) -> CZCoefficients:
    """
    <T~ h_Q, h_R> with T~ = T - Pi_T - (Pi_T*)^*, the paraproducts built from T1 and T*1
    computed by the same quadrature. Pairs too close to the truncated diagonal are flagged
    and excluded.
    """
    quad = kernel_quadrature(kernel, lat, refine) if quadrature is None else quadrature
    kept, flagged = [], []
    for Q, R in pairs:
        for cube in (Q, R):
            if cube.level == lat.k_min:
                raise ValueError(f"Cube {cube} is at the finest level and carries no Haar function")
        (flagged if _too_close(lat, Q, R) else kept).append((Q, R))
    if flagged:
        logger.warning(f"cz_coefficients: {len(flagged)} pairs within one cell of the diagonal excluded")
    if not kept:
        return CZCoefficients(lat, [], np.zeros(0), flagged)
    h = lat.cell_volume
    hq = _haar_rows(lat, [Q for Q, _ in kept])
    hr = _haar_rows(lat, [R for _, R in kept])
    values = np.sum((hr @ quad.matrix) * hq, axis=1) * h * h
    t1_r = hr @ quad.t1 * h
    ts1_q = hq @ quad.t_star1 * h
    for i, (Q, R) in enumerate(kept):
        if R.level < Q.level and lat.contains(Q, R):
            values[i] -= t1_r[i] * float(hq[i][lat.cells(R)].mean())
        if Q.level < R.level and lat.contains(R, Q):
            values[i] -= ts1_q[i] * float(hr[i][lat.cells(Q)].mean())
    return CZCoefficients(lat, kept, values, flagged)


def decay_bound(lat: Lattice, Q: CubeId, R: CubeId, alpha: float) -> float:
    d = lat.dimension
    return (
        (Q.side * R.side) ** (alpha / 2)
        / long_distance(lat, Q, R) ** (d + alpha)
        * math.sqrt(Q.volume * R.volume)
    )


def coefficient_decay_check(coeffs: CZCoefficients, alpha: float, params: GoodnessParams) -> DecayReport:
    """
    Ratios of |<T~ h_Q, h_R>| to the decay bound over pairs whose smaller cube is good,
    plus a log-log fit of the coefficients against D(Q, R) within the most populated
    pair of scales.

    Raises:
        ValueError: When no pair has a good smaller cube
    """
    lat = coeffs.lattice
    entries = []
    for (Q, R), value in zip(coeffs.pairs, coeffs.values):
        small = Q if Q.level <= R.level else R
        if is_bad(lat, small, params):
            continue
        bound = decay_bound(lat, Q, R, alpha)
        entries.append(
            DecayEntry(
                q=Q.ref(),
                r=R.ref(),
                coefficient=abs(float(value)),
                bound=bound,
                ratio=abs(float(value)) / bound,
                long_distance=long_distance(lat, Q, R),
            )
        )
    if not entries:
        raise ValueError("No pair with a good smaller cube to check")
    groups: dict[tuple[int, int], list[DecayEntry]] = {}
    for e in entries:
        groups.setdefault((e.q.level, e.r.level), []).append(e)
    largest = max(groups.values(), key=len)
    fit = None
    distances = [e.long_distance for e in largest if e.coefficient > 0]
    if len(set(distances)) >= 2:
        fit = fit_loglog(distances, [e.coefficient for e in largest if e.coefficient > 0])
    report = DecayReport(alpha=alpha, entries=entries, fit=fit)
    report.fitted_constant = report.max_ratio
    return report


def shift_pairs(lat: Lattice, m: int, n: int) -> list[tuple[CubeId, CubeId]]:
    """All (Q', Q'') with Q' at depth m and Q'' at depth n below a common cube M, in block order."""
    pairs = []
    for level in range(lat.k_min + 1 + max(m, n), 1):
        cubes = np.arange(lat.n_cubes(level))
        desc_m = lat.descendants(level, cubes, m)
        desc_n = lat.descendants(level, cubes, n)
        for a in cubes:
            for p in desc_m[a]:
                for q in desc_n[a]:
                    pairs.append((lat.cube(level - m, int(p)), lat.cube(level - n, int(q))))
    return pairs


def representation_weight(m: int, n: int, alpha: float) -> float:
    return 2.0 ** (-(m + n) * alpha / 2)


def extract_shift(
    coeffs: CZCoefficients, m: int, n: int, alpha: float, C: float, params: GoodnessParams
) -> ElementaryShift:
    """
    Elementary (m, n) shift with Haar-pair coefficient 2^((m+n) alpha/2) (D/l(M))^(d+alpha) <T~ h_Q', h_Q''> / C,
    kept only where the deeper cube of the pair is good.

    Raises:
        ValueError: When a needed coefficient is missing or the normalization audit fails
    """
    if C <= 0:
        raise ValueError(f"Decay constant must be positive, got {C}")
    lat = coeffs.lattice
    if lat.dimension != 1:
        raise ValueError(f"Shift extraction is implemented in dimension 1, got {lat.dimension}")
    table = coeffs.as_dict()
    flagged = set(coeffs.flagged)
    d = lat.dimension
    scale = 2.0 ** ((m + n) * alpha / 2) / C

    def rule(lat: Lattice, level: int, cubes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        p = lat.n_children
        desc_m = lat.descendants(level, cubes, m)
        desc_n = lat.descendants(level, cubes, n)
        u = np.zeros((cubes.size, 1, p**m, p**n, p))
        v = np.zeros_like(u)
        side = 2.0**level
        for a in range(cubes.size):
            for i, pi in enumerate(desc_m[a]):
                Qp = lat.cube(level - m, int(pi))
                for j, qi in enumerate(desc_n[a]):
                    Qpp = lat.cube(level - n, int(qi))
                    deeper = Qp if m >= n else Qpp
                    if (Qp, Qpp) in flagged or is_bad(lat, deeper, params):
                        continue
                    if (Qp, Qpp) not in table:
                        raise ValueError(f"Missing coefficient for pair {Qp}, {Qpp}")
                    c = table[(Qp, Qpp)] * scale * (long_distance(lat, Qp, Qpp) / side) ** (d + alpha)
                    u[a, 0, i, j, 1] = math.sqrt(Qp.volume)
                    v[a, 0, i, j, 1] = 2.0 ** (level * d) * c / math.sqrt(Qp.volume)
        return u, v

    S = build_shift(lat, m, n, rule)
    passed, worst, cube = normalization_audit(S)
    if not passed or S.rescale_factor < 1.0:
        raise ValueError(f"Normalization audit failed: worst pair product {worst:.6g} under {cube}")
    return S


@dataclass(frozen=True, eq=False)
class EnsembleSample:
    lattice: Lattice
    m: int
    n: int
    shift: ElementaryShift
    weight: float


@dataclass
class ShiftEnsemble:
    alpha: float
    samples: list[EnsembleSample] = field(default_factory=list)

    def weights_exact(self) -> bool:
        return all(s.weight == representation_weight(s.m, s.n, self.alpha) for s in self.samples)


def shift_ensemble(
    kernel: Kernel,
    k_min: int,
    alpha: float,
    params: GoodnessParams,
    n_lattices: int,
    seed: int,
    max_complexity: int = 1,
) -> ShiftEnsemble:
    """Extracted shifts of every (m, n) with m >= n up to ``max_complexity`` over sampled 1-d lattices."""
    ensemble = ShiftEnsemble(alpha=alpha)
    seeds = rng_stream(seed, ENSEMBLE_STREAM).integers(0, 2**62, size=n_lattices)
    for lattice_seed in seeds:
        lat = sample_lattice(1, k_min, int(lattice_seed))
        quad = kernel_quadrature(kernel, lat)
        for m in range(max_complexity + 1):
            for n in range(m + 1):
                coeffs = cz_coefficients(kernel, lat, shift_pairs(lat, m, n), quadrature=quad)
                report = coefficient_decay_check(coeffs, alpha, params)
                shift = extract_shift(coeffs, m, n, alpha, report.fitted_constant, params)
                ensemble.samples.append(EnsembleSample(lat, m, n, shift, representation_weight(m, n, alpha)))
        logger.info(f"shift_ensemble: lattice seed {int(lattice_seed)} done")
    return ensemble


@dataclass
class AveragedKernel:
    n_samples: int = 0
    total: np.ndarray | None = None
    total_sq: np.ndarray | None = None
    # squares of K(x, y) + K(y, x) per sample
    anti_sq: np.ndarray | None = None

    def add(self, K: np.ndarray) -> None:
        if self.total is None:
            self.total = np.zeros_like(K)
            self.total_sq = np.zeros_like(K)
            self.anti_sq = np.zeros_like(K)
        self.total += K
        self.total_sq += K**2
        self.anti_sq += (K + K.T) ** 2
        self.n_samples += 1

    @property
    def matrix(self) -> np.ndarray:
        if self.total is None:
            raise ValueError("Averaged kernel has no samples")
        return self.total / self.n_samples

    def _standard_error(self, mean: np.ndarray, second: np.ndarray) -> np.ndarray:
        n = self.n_samples
        if n < 2:
            return np.zeros_like(mean)
        var = np.maximum(second / n - mean**2, 0.0) * n / (n - 1)
        return np.sqrt(var / n)

    @property
    def standard_error(self) -> np.ndarray:
        return self._standard_error(self.matrix, self.total_sq)

    def antisymmetry_scores(self) -> np.ndarray:
        """Per-entry |K(x,y) + K(y,x)| of the mean in standard errors; inf where an exact entry is nonzero."""
        anti = self.matrix + self.matrix.T
        se = self._standard_error(anti, self.anti_sq)
        exact = se == 0
        scores = np.zeros_like(anti)
        np.divide(np.abs(anti), se, out=scores, where=~exact)
        tol = 1e-12 * max(1.0, float(np.abs(self.matrix).max()))
        # rounding-level means are zero
        scores[np.abs(anti) <= tol] = 0.0
        scores[exact & (np.abs(anti) > tol)] = math.inf
        return scores

    def antisymmetry_z(self) -> float:
        return float(self.antisymmetry_scores().max(initial=0.0))

    def is_antisymmetric(self, z_bound: float = ANTISYMMETRY_Z_BOUND) -> bool:
        return self.antisymmetry_z() <= z_bound


def antisymmetry_defect(K: np.ndarray) -> float:
    """max |K + K^T| relative to max |K|; 0 for the zero kernel."""
    scale = float(np.abs(K).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(K + K.T).max()) / scale


def _roll_cells(K: np.ndarray, lat: Lattice, shift: np.ndarray) -> np.ndarray:
    """K(x - shift, y - shift) on the cell grid."""
    M, d = lat.side_cells, lat.dimension
    grid = K.reshape((M,) * (2 * d))
    axes = tuple(range(2 * d))
    return np.roll(grid, tuple(int(s) for s in shift) * 2, axis=axes).reshape(K.shape)


def _level_terms(family: ShiftFamily, d: int, k_min: int) -> dict[int, np.ndarray]:
    S = family(standard_lattice(d, k_min))
    return {k: dense_kernel(restrict_levels(S, [k])) for k in S.blocks}


def average_kernel(
    family: ShiftFamily,
    d: int,
    k_min: int,
    n_samples: int,
    seed: int,
    translation_invariant: bool = False,
) -> AveragedKernel:
    """
    Empirical mean over sampled lattices of the dense kernel of ``family(lattice)``.

    With ``translation_invariant`` the family's coefficients must not depend on cube
    positions; each level term is then the standard-lattice term translated by the
    lattice offset of that level.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    result = AveragedKernel()
    seeds = rng_stream(seed, KERNEL_STREAM).integers(0, 2**62, size=n_samples)
    terms = _level_terms(family, d, k_min) if translation_invariant else None
    for i, lattice_seed in enumerate(seeds):
        lat = sample_lattice(d, k_min, int(lattice_seed))
        if terms is None:
            K = dense_kernel(family(lat))
        else:
            K = np.zeros((lat.n_cells, lat.n_cells))
            for k, term in terms.items():
                K += _roll_cells(term, lat, lat.offset(k))
        result.add(K)
        if (i + 1) % 1000 == 0:
            logger.info(f"average_kernel: {i + 1}/{n_samples} lattices")
    return result


def exact_translation_average(family: ShiftFamily, d: int, k_min: int) -> np.ndarray:
    """Exact expectation over random lattices for a translation-invariant family."""
    lat = standard_lattice(d, k_min)
    total = np.zeros((lat.n_cells, lat.n_cells))
    for k, term in _level_terms(family, d, k_min).items():
        period = lat.cube_cells(k)
        acc = np.zeros_like(term)
        for shift in np.ndindex(*(period,) * d):
            acc += _roll_cells(term, lat, np.asarray(shift))
        total += acc / period**d
    return total


def petermichl_profile(z0: np.ndarray | float) -> np.ndarray:
    """
    s K(s) of the averaged one-dimensional Petermichl kernel at s = z0 * 2^j, z0 in (1/2, 1].
    """
    z = np.asarray(z0, dtype=np.float64)
    return np.where(z <= 0.75, 1.5 * z**2 - 1.25 * z, -0.5 * z**2 + 0.25 * z)


def octave_flatness(K: np.ndarray, lat: Lattice) -> list[tuple[int, float, float]]:
    """Per octave of separations s = (x - y) mod 1, the range of s K(x, y) along the first row."""
    if lat.dimension != 1:
        raise ValueError("Octave flatness is defined for one-dimensional kernels")
    N = lat.n_cells
    s_cells = np.arange(1, N // 2)
    # column 0 holds K(x, 0), so separation s sits in row s
    values = s_cells / N * K[s_cells, 0]
    out = []
    for j in range(int(math.log2(N // 2))):
        mask = (s_cells > 2**j) & (s_cells <= 2 ** (j + 1))
        if np.any(mask):
            out.append((j + 1 + lat.k_min, float(values[mask].min()), float(values[mask].max())))
    return out


def write_averaged_kernel(kernel: AveragedKernel, path: Path | str) -> Path:
    K = kernel.matrix
    se = kernel.standard_error

    def rows():
        for x, y in np.ndindex(*K.shape):
            yield x, y, K[x, y], se[x, y]

    return write_csv(path, ["x_cell", "y_cell", "mean", "standard_error"], rows(), preamble=f"samples={kernel.n_samples}")


def write_decay_report(report: DecayReport, path: Path | str) -> Path:
    def rows():
        for e in report.entries:
            yield (
                e.q.level,
                " ".join(map(str, e.q.index)),
                e.r.level,
                " ".join(map(str, e.r.index)),
                e.coefficient,
                e.bound,
                e.ratio,
                e.long_distance,
            )

    return write_csv(
        path,
        ["q_level", "q_index", "r_level", "r_index", "coefficient", "bound", "ratio", "long_distance"],
        rows(),
    )
