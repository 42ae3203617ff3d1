#!/usr/bin/env python3
"""
Experiment runner for the dyadic shift laboratory.

Each subcommand runs one measurement family and writes CSV tables, a JSON report
with provenance and a short summary.md into the output directory.

Usage:
    dyadlab a2-sweep --config experiment.cfg --seed 7 --out output/a2
    dyadlab representation --samples 2000 --out output/rep
    dyadlab invariants --resolution 6
"""

import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Any, Callable, TypeVar

import numpy as np

from dyadlab.decomp import (
    adversarial_packing_weight,
    alpha_classes,
    carleson_embedding_ratio,
    carleson_search,
    corona_forests,
    cz_decompose,
    density_class_index,
    final_norm_check,
    jn_abstract_check,
    jn_distribution,
    jn_maximal,
    packing_report,
    random_carleson_sequence,
    random_phi_family,
    slice_lattice,
    stopping_forest,
)
from dyadlab.haar import analyze, coefficient_pyramid, haar_function_values, synthesize, weighted_expectations, weighted_haar_basis
from dyadlab.lattice import (
    GoodnessParams,
    Lattice,
    estimate_pi_bad,
    is_bad,
    long_distance,
    sample_lattice,
    standard_lattice,
)
from dyadlab.logger import LOG_FORMAT
from dyadlab.logger import dyadlab_logger as logger
from dyadlab.report_output import LatticeDescriptor, NormReport, ProvenanceEntry, RunReport, TestingReport
from dyadlab.represent import (
    antisymmetry_defect,
    average_kernel,
    coefficient_decay_check,
    cz_coefficients,
    exact_translation_average,
    extract_shift,
    hilbert_kernel,
    kernel_quadrature,
    octave_flatness,
    pi0_level,
    pi_good_given_R,
    representation_weight,
    rho_qr,
    shift_pairs,
    write_averaged_kernel,
    write_decay_report,
)
from dyadlab.shift import (
    ElementaryShift,
    ShiftBlock,
    adjoint_apply,
    apply_values,
    apply_weighted,
    dense_matrix,
    dense_two_weight_norm,
    extremal_signs,
    haar_multiplier,
    haar_testing_check,
    hilbert_schmidt_diagonal_check,
    kernel_audit,
    normalization_audit,
    one_weight_lower_bound,
    operator_norm,
    paraproduct,
    petermichl_shift,
    predicted_bounds,
    random_shift,
    random_signs,
    restrict_levels,
    restricted_norm_audit,
    testing_constants,
    two_weight_report,
    weak11_constant,
)
from dyadlab.signals import (
    StepFunction,
    Weight,
    a2_constant,
    a2_products,
    distribution_function,
    joint_a2,
    lebesgue,
    power_weight,
    random_a2_weight,
)
from dyadlab.utils import (
    ExperimentConfig,
    fit_loglog,
    load_experiment_config,
    render_template,
    rng_stream,
    write_csv,
)
from dyadlab.violation_tracker import ViolationTracker

RUN_STREAM = 20

# restricted-norm audit sets used for B2 in the sweeps
_AUDIT_SETS = 8

# a2 sweeps narrower than this many decades cannot tell linear from square-root growth
_MIN_A2_DECADES = 1.5

# complexity exponents above this are flagged against the quadratic bound
_MAX_COMPLEXITY_EXPONENT = 2.2

# relative band around the median bracket constant for a stable two-weight fit
_KAPPA_TOLERANCE = 0.3

KERNEL_FUNCTIONS = {"hilbert": hilbert_kernel}

T = TypeVar("T")


def setup_logging(output_dir: Path) -> None:
    """Set up logging to console and file."""
    log_file = output_dir / "experiment.log"

    logging.basicConfig(
        level=logging.INFO,
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(log_file, mode="w"),
            logging.StreamHandler(sys.stdout),
        ],
        force=True,
    )


class RunContext:
    """Collects provenance, flags and output files of one run."""

    def __init__(self, command: str, config: ExperimentConfig, output_dir: Path):
        self.command = command
        self.config = config
        self.output_dir = output_dir
        self.provenance: list[ProvenanceEntry] = []
        self.flags: list[str] = []
        self.files: list[str] = []
        self.lattice: LatticeDescriptor | None = None

    def record(self, module: str, operation: str, seed: int | None = None) -> None:
        entry = ProvenanceEntry(module=module, operation=operation, seed=seed)
        if entry not in self.provenance:
            self.provenance.append(entry)

    def flag(self, message: str) -> None:
        logger.warning(message)
        self.flags.append(message)

    def csv(self, name: str, header: list[str], rows: list[Any], preamble: str | None = None) -> Path:
        path = write_csv(self.output_dir / name, header, rows, preamble=preamble)
        self.files.append(name)
        return path

    def use_lattice(self, lat: Lattice) -> None:
        self.lattice = lat.descriptor()

    def report(self, results: dict[str, Any], success: bool = True) -> RunReport:
        return RunReport(
            command=self.command,
            config=self.config.model_dump(),
            lattice=self.lattice,
            provenance=self.provenance,
            results=results,
            flags=self.flags,
            success=success,
        )


def derived_seed(seed: int, *keys: int) -> int:
    return int(rng_stream(seed, RUN_STREAM, *keys).integers(0, 2**62))


async def _gather_rows(tasks: list[Callable[[], T]]) -> list[T | BaseException]:
    return await asyncio.gather(*(asyncio.to_thread(task) for task in tasks), return_exceptions=True)


def run_rows(ctx: RunContext, labels: list[str], tasks: list[Callable[[], T]]) -> list[tuple[str, T]]:
    """Run row tasks concurrently; failed rows become flags and are dropped, order is kept."""
    results = asyncio.run(_gather_rows(tasks))
    rows = []
    for label, result in zip(labels, results):
        if isinstance(result, BaseException):
            ctx.flag(f"Row {label} failed: {str(result)}")
            continue
        rows.append((label, result))
    if tasks and not rows:
        raise ValueError(f"All {len(tasks)} rows of {ctx.command} failed")
    return rows


def build_family_shift(config: ExperimentConfig, lat: Lattice, seed: int, w: Weight | None = None) -> ElementaryShift:
    if config.shift_family == "petermichl":
        return petermichl_shift(lat)
    if config.shift_family == "haar_multiplier":
        return haar_multiplier(lat, random_signs(lat, seed))
    if config.shift_family == "extremal":
        if w is None:
            raise ValueError("The extremal shift family is built per weight")
        return haar_multiplier(lat, extremal_signs(w))
    if config.shift_family == "random":
        return random_shift(lat, 0, 1, seed)
    b = random_a2_weight(lat, 2.0, seed)
    return paraproduct(StepFunction(lat, np.log(b.values)))[0]


def build_weights(config: ExperimentConfig, lat: Lattice, seed: int) -> list[tuple[str, Weight]]:
    weights = [("constant", lebesgue(lat))]
    if config.weight_family in ("power", "mixed"):
        center = (0.0,) * lat.dimension
        weights += [(f"power {a}", power_weight(lat, a, center)) for a in config.power_exponents if a != 0]
    if config.weight_family in ("random", "mixed"):
        weights += [
            (f"random {target}", random_a2_weight(lat, target, derived_seed(seed, i)))
            for i, target in enumerate(config.a2_targets)
        ]
    return weights


def random_weight(config: ExperimentConfig, lat: Lattice, i: int) -> Weight:
    targets = config.a2_targets or [2.0]
    return random_a2_weight(lat, targets[i % len(targets)], derived_seed(config.seed, 1000 + i))


def run_a2_sweep(ctx: RunContext) -> dict[str, Any]:
    config = ctx.config
    lat = sample_lattice(config.dimension, config.k_min, config.seed)
    ctx.use_lattice(lat)
    weights = build_weights(config, lat, config.seed)
    shared = None if config.shift_family == "extremal" else build_family_shift(config, lat, config.seed)
    ctx.record("lattice", "sample_lattice", config.seed)
    ctx.record("signal", config.weight_family + "_weight", config.seed)
    ctx.record("shift", config.shift_family, config.seed)
    ctx.record("shift", "operator_norm", config.seed)

    def row(w: Weight) -> NormReport:
        S = shared if shared is not None else build_family_shift(config, lat, config.seed, w)
        return operator_norm(S, w, tol=config.tol, max_iter=config.max_iter, seed=config.seed)

    rows = run_rows(ctx, [label for label, _ in weights], [lambda w=w: row(w) for _, w in weights])
    for label, report in rows:
        if not report.converged:
            ctx.flag(f"Row {label}: power iteration did not converge (residual {report.residual:.3g})")
        logger.info(f"a2-sweep {label}: a2={report.a2:.6g} norm={report.norm:.6g}")
    ctx.csv(
        "a2_sweep.csv",
        ["weight", "a2", "norm", "iterations", "residual", "converged", "weight_hash"],
        [(label, r.a2, r.norm, r.iterations, r.residual, r.converged, r.weight_hash) for label, r in rows],
    )
    results: dict[str, Any] = {"rows": len(rows), "shift_family": config.shift_family}
    a2s = [r.a2 for _, r in rows]
    span = float(np.log10(max(a2s) / min(a2s)))
    results["a2_span_decades"] = span
    results["slope_meaningful"] = span >= _MIN_A2_DECADES
    if span < _MIN_A2_DECADES:
        ctx.flag(f"A2 values span {span:.3g} decades, below {_MIN_A2_DECADES}; the slope says little about linear growth")
    if config.shift_family == "extremal":
        short = [label for label, r in rows if r.norm < one_weight_lower_bound(r.a2) * (1 - 1e-6)]
        results["below_lower_bound"] = short
        for label in short:
            ctx.flag(f"Row {label}: extremal multiplier norm below max(1, (a2 - 1) / a2^1/2)")
    if len(set(a2s)) >= 2:
        fit = fit_loglog(a2s, [r.norm for _, r in rows])
        results["fit"] = fit.model_dump()
        if fit.reportable:
            results["slope"] = fit.slope
        else:
            ctx.flag(f"Only {fit.point_count} points in the a2 fit, slope not reported")
    else:
        ctx.flag("Fewer than two distinct a2 values, no fit")
    return results


def run_complexity_sweep(ctx: RunContext) -> dict[str, Any]:
    config = ctx.config
    lat = sample_lattice(config.dimension, config.k_min, config.seed)
    ctx.use_lattice(lat)
    w = random_a2_weight(lat, config.complexity_a2, config.seed)
    a2 = a2_constant(w)[0]
    ctx.record("lattice", "sample_lattice", config.seed)
    ctx.record("signal", "random_a2_weight", config.seed)
    ctx.record("shift", "random_shift", config.seed)
    ctx.record("shift", "restricted_norm_audit", config.seed)
    ctx.record("shift", "predicted_bounds")

    def row(r: int) -> dict[str, Any]:
        S = random_shift(lat, r, 0, derived_seed(config.seed, r))
        norm = operator_norm(S, w, tol=config.tol, max_iter=config.max_iter, seed=config.seed)
        B2, _ = restricted_norm_audit(S, n_sets=_AUDIT_SETS, seed=config.seed, tol=config.tol)
        bounds = predicted_bounds(0.0, 0.0, B2, a2, r, S.m, lat.dimension)
        return {"r": r, "norm": norm.norm, "converged": norm.converged, "B2": B2, "bracket": bounds.one_weight_bracket}

    rows = run_rows(ctx, [f"r={r}" for r in config.complexities], [lambda r=r: row(r) for r in config.complexities])
    for label, values in rows:
        if not values["converged"]:
            ctx.flag(f"Row {label}: power iteration did not converge")
    ctx.csv(
        "complexity_sweep.csv",
        ["r", "a2", "norm", "B2", "one_weight_bracket", "bracket_over_norm"],
        [(v["r"], a2, v["norm"], v["B2"], v["bracket"], v["bracket"] / v["norm"]) for _, v in rows],
    )
    results: dict[str, Any] = {"a2": a2, "rows": len(rows)}
    if len(rows) >= 2:
        fit = fit_loglog([v["r"] + 1 for _, v in rows], [v["norm"] for _, v in rows])
        results["fit"] = fit.model_dump()
        results["exponent"] = fit.slope if fit.reportable else None
        if fit.slope > _MAX_COMPLEXITY_EXPONENT:
            ctx.flag(f"Norm grows like (r + 1)^{fit.slope:.3g}, faster than (r + 1)^{_MAX_COMPLEXITY_EXPONENT}")
    return results


def run_two_weight(ctx: RunContext) -> dict[str, Any]:
    config = ctx.config
    lat = sample_lattice(config.dimension, config.oracle_k_min, config.seed)
    ctx.use_lattice(lat)
    ctx.record("lattice", "sample_lattice", config.seed)
    ctx.record("signal", "random_a2_weight", config.seed)
    ctx.record("shift", "testing_constants")
    ctx.record("shift", "two_weight_norm", config.seed)

    def pair(i: int) -> tuple[Weight, Weight]:
        # mu = w^-1 and nu = w times an independent A2 factor
        w = random_weight(config, lat, i)
        factor = random_a2_weight(lat, 2.0, derived_seed(config.seed, 3000 + i))
        return w.reciprocal(), Weight(lat, w.values * factor.values)

    def row(i: int) -> TestingReport:
        u, v = pair(i)
        S = build_family_shift(config, lat, config.seed, v)
        report, norm = two_weight_report(S, u, v, tol=config.tol, max_iter=config.max_iter, seed=config.seed)
        if not norm.converged:
            raise ValueError(f"power iteration did not converge (residual {norm.residual:.3g})")
        return report

    labels = [f"pair {i}" for i in range(config.n_weights)]
    rows = run_rows(ctx, labels, [lambda i=i: row(i) for i in range(config.n_weights)])
    ctx.csv(
        "two_weight.csv",
        ["pair", "B", "joint_a2", "r", "measured_norm", "predicted_bracket", "ratio"],
        [(label, t.B, t.joint_a2, t.r, t.measured_norm, t.predicted_bracket, t.bracket_ratio) for label, t in rows],
    )
    ratios = np.array([t.bracket_ratio for _, t in rows if t.bracket_ratio is not None])
    if not ratios.size:
        raise ValueError("No pair has a positive predicted bracket")
    kappa, median = float(ratios.max()), float(np.median(ratios))
    spread = float((ratios.max() - ratios.min()) / median)
    stable = bool(ratios.max() <= (1 + _KAPPA_TOLERANCE) * median and ratios.min() >= (1 - _KAPPA_TOLERANCE) * median)
    if not stable:
        ctx.flag(f"Bracket constant varies by {spread:.3g} of its median across pairs")
    logger.info(f"two-weight: kappa={kappa:.6g} median={median:.6g} over {ratios.size} pairs")
    return {
        "rows": len(rows),
        "shift_family": config.shift_family,
        "kappa": kappa,
        "kappa_median": median,
        "kappa_min": float(ratios.min()),
        "kappa_spread": spread,
        "kappa_stable": stable,
    }


def run_weak11(ctx: RunContext) -> dict[str, Any]:
    config = ctx.config
    lat = sample_lattice(config.dimension, config.oracle_k_min, config.seed)
    ctx.use_lattice(lat)
    ctx.record("lattice", "sample_lattice", config.seed)
    ctx.record("shift", "random_shift", config.seed)
    ctx.record("shift", "weak11_constant", config.seed)
    ctx.record("shift", "restricted_norm_audit", config.seed)
    ranks = [r for r in config.complexities if r <= 3]

    def row(r: int) -> list[tuple[Any, ...]]:
        S = random_shift(lat, r, 0, derived_seed(config.seed, r))
        B2, _ = restricted_norm_audit(S, n_sets=_AUDIT_SETS, seed=config.seed, tol=config.tol)
        bound = predicted_bounds(0.0, 0.0, B2, 1.0, r, S.m, lat.dimension).weak_bound
        weak = weak11_constant(S, seed=config.seed)
        out = [(r, "full", weak, bound, weak <= bound)]
        # a single active level has separated scales
        level = max(S.blocks)
        single = restrict_levels(S, [level])
        B2_single, _ = restricted_norm_audit(single, n_sets=_AUDIT_SETS, seed=config.seed, tol=config.tol)
        separated_bound = 2 ** (lat.dimension + 2) * B2_single**2 + 5
        weak_single = weak11_constant(single, seed=config.seed)
        out.append((r, "separated", weak_single, separated_bound, weak_single <= separated_bound))
        return out

    rows = run_rows(ctx, [f"r={r}" for r in ranks], [lambda r=r: row(r) for r in ranks])
    table = [entry for _, entries in rows for entry in entries]
    for r, part, weak, bound, ok in table:
        if not ok:
            ctx.flag(f"Weak (1,1) constant {weak:.6g} exceeds {bound:.6g} for r={r} ({part})")
    ctx.csv("weak11.csv", ["r", "part", "weak_constant", "bound", "within_bound"], table)
    return {"rows": len(table), "max_ratio": max((weak / bound for _, _, weak, bound, _ in table), default=0.0)}


def run_carleson(ctx: RunContext) -> dict[str, Any]:
    config = ctx.config
    lat = sample_lattice(config.dimension, config.oracle_k_min, config.seed)
    ctx.use_lattice(lat)
    ctx.record("signal", "random_a2_weight", config.seed)
    ctx.record("decomp", "carleson_embedding_ratio", config.seed)
    ctx.record("decomp", "carleson_search", config.seed)

    def row(i: int) -> tuple[int, float, float, float]:
        mu = random_weight(config, lat, i)
        seed = derived_seed(config.seed, 2000 + i)
        a = random_carleson_sequence(mu, seed)
        f = StepFunction(lat, np.exp(rng_stream(seed, RUN_STREAM).standard_normal(lat.n_cells)))
        random_ratio = carleson_embedding_ratio(a, mu, f)
        searched, _, _ = carleson_search(mu, n_steps=min(config.n_samples, 2000), seed=seed)
        return i, a2_constant(mu)[0], random_ratio, searched

    rows = run_rows(ctx, [f"weight {i}" for i in range(config.n_weights)], [lambda i=i: row(i) for i in range(config.n_weights)])
    table = [values for _, values in rows]
    for i, _, random_ratio, searched in table:
        if max(random_ratio, searched) > 4 + 1e-12:
            ctx.flag(f"Carleson embedding ratio above 4 for weight {i}")
    ctx.csv("carleson.csv", ["weight", "a2", "random_ratio", "searched_ratio"], table)
    return {
        "rows": len(table),
        "max_random_ratio": max((t[2] for t in table), default=0.0),
        "max_searched_ratio": max((t[3] for t in table), default=0.0),
    }


def run_corona(ctx: RunContext) -> dict[str, Any]:
    config = ctx.config
    lat = sample_lattice(config.dimension, config.k_min, config.seed)
    ctx.use_lattice(lat)
    ctx.record("signal", "random_a2_weight", config.seed)
    ctx.record("decomp", "corona_forests")
    ctx.record("decomp", "packing_report")
    weights = [(f"weight {i}", lambda i=i: random_weight(config, lat, i)) for i in range(config.n_weights)]
    if lat.dimension == 1:
        weights.append(("adversarial", lambda: adversarial_packing_weight(lat)))
        ctx.record("decomp", "adversarial_packing_weight")

    def row(make: Callable[[], Weight]) -> tuple[float, float, float, float, int, bool]:
        w = make()
        forest = corona_forests(w)[0]
        report = packing_report(forest, w)
        classes = alpha_classes(forest, forest.root, w)
        return (
            report.a2,
            report.lebesgue_ratio,
            report.l2_overlap_ratio,
            report.weighted_ratio,
            len(forest.stopping),
            report.within_bounds()
            and not forest.threshold_violations()
            and sum(map(len, classes.values())) == len(forest.partition()[forest.root]),
        )

    rows = run_rows(ctx, [label for label, _ in weights], [lambda make=make: row(make) for _, make in weights])
    for label, values in rows:
        if not values[-1]:
            ctx.flag(f"Packing bounds violated for {label}")
    ctx.csv(
        "corona.csv",
        ["weight", "a2", "lebesgue_ratio", "l2_overlap_ratio", "weighted_ratio", "stopping_cubes", "within_bounds"],
        [(label, *values) for label, values in rows],
    )
    return {
        "rows": len(rows),
        "max_lebesgue_ratio": max((v[1] for _, v in rows), default=0.0),
        "max_l2_overlap_ratio": max((v[2] for _, v in rows), default=0.0),
        "max_weighted_ratio": max((v[3] for _, v in rows), default=0.0),
    }


def run_jn(ctx: RunContext) -> dict[str, Any]:
    config = ctx.config
    lat = sample_lattice(config.dimension, config.k_min, config.seed)
    ctx.use_lattice(lat)
    root = lat.cube(0, 0)
    ctx.record("shift", "restricted_norm_audit", config.seed)
    ctx.record("decomp", "jn_maximal")
    ctx.record("decomp", "jn_distribution")
    ctx.record("decomp", "final_norm_check")
    ctx.record("decomp", "jn_abstract_check", config.seed)

    def constants(S: ElementaryShift) -> tuple[float, float]:
        B2, _ = restricted_norm_audit(S, n_sets=_AUDIT_SETS, seed=config.seed, tol=config.tol)
        return B2, predicted_bounds(0.0, 0.0, B2, 1.0, S.complexity, S.m, lat.dimension).B1

    shared = None if config.shift_family == "extremal" else build_family_shift(config, lat, config.seed)
    B2, B1 = constants(shared) if shared is not None else (None, None)

    def row(i: int) -> tuple[int, float, bool, float | None, float, float]:
        w = random_weight(config, lat, i)
        if shared is None:
            S = build_family_shift(config, lat, config.seed, w)
            _, row_B1 = constants(S)
        else:
            S, row_B1 = shared, B1
        curve = jn_distribution(jn_maximal(S, w, root), w, root, row_B1)
        C1, _ = final_norm_check(S, w, stopping_forest(root, w), row_B1)
        return i, a2_constant(w)[0], curve.all_pass, curve.tail_slope, C1, row_B1

    rows = run_rows(ctx, [f"weight {i}" for i in range(config.n_weights)], [lambda i=i: row(i) for i in range(config.n_weights)])
    table = [values for _, values in rows]
    for i, _, ok, _, _, _ in table:
        if not ok:
            ctx.flag(f"John-Nirenberg level sets exceed their bounds for weight {i}")
    ctx.csv("jn.csv", ["weight", "a2", "all_pass", "tail_slope", "C1", "B1"], table)
    abstract = jn_abstract_check(lat, random_phi_family(lat, config.seed, scale=0.5))
    ctx.csv(
        "jn_abstract.csv",
        ["t", "worst_fraction", "passes"],
        list(zip(abstract.thresholds, abstract.worst_ratios, abstract.passes)),
        preamble=f"delta={abstract.delta!r}",
    )
    if abstract.hypothesis_met and not all(abstract.passes):
        ctx.flag("Abstract John-Nirenberg bound failed")
    return {"B1": B1, "B2": B2, "rows": len(table), "max_C1": max((t[4] for t in table), default=0.0), "abstract_delta": abstract.delta}


def run_representation(ctx: RunContext) -> dict[str, Any]:
    config = ctx.config
    if config.dimension != 1:
        raise ValueError(f"The representation run is one-dimensional, got dimension {config.dimension}")
    seed, n = config.seed, config.n_samples
    params = GoodnessParams(r0=config.r0, gamma=config.gamma)
    results: dict[str, Any] = {}

    # goodness probabilities
    q_level = -(max(config.r0_values) + 4)
    ctx.record("lattice", "estimate_pi_bad", seed)
    pi_rows = []
    for r0 in config.r0_values:
        est = estimate_pi_bad(1, r0, config.gamma, q_level, n, seed)
        pi_rows.append((r0, est.estimate, est.standard_error, pi0_level(config.gamma, r0)))
        if est.estimate > 0 and est.standard_error / est.estimate > config.se_threshold:
            ctx.flag(f"pi_bad at r0={r0}: relative standard error above {config.se_threshold}")
    ctx.csv("pi_bad.csv", ["r0", "pi_bad", "standard_error", "s0"], pi_rows, preamble=f"q_level={q_level}")
    positive = [(r0, p) for r0, p, _, _ in pi_rows if p > 0]
    if len(positive) >= 2:
        results["pi_bad_fit"] = fit_loglog([2.0**r0 for r0, _ in positive], [p for _, p in positive]).model_dump()
    ctx.record("represent", "pi_good_given_R", seed)
    same = pi_good_given_R([0], 0, params, n, seed)
    results["pi_good_same_cube"] = same.model_dump()

    # averaged Petermichl kernel
    ctx.record("represent", "average_kernel", seed)
    averaged = average_kernel(petermichl_shift, 1, config.oracle_k_min, n, seed, translation_invariant=True)
    ctx.files.append(write_averaged_kernel(averaged, ctx.output_dir / "averaged_kernel.csv").name)
    octaves = octave_flatness(averaged.matrix, standard_lattice(1, config.oracle_k_min))
    exact = exact_translation_average(petermichl_shift, 1, config.oracle_k_min)
    ctx.csv("kernel_flatness.csv", ["octave_level", "min_sK", "max_sK"], octaves)
    results["kernel"] = {
        "samples": averaged.n_samples,
        "max_abs_error_vs_exact": float(np.abs(averaged.matrix - exact).max()),
        "antisymmetry_z": averaged.antisymmetry_z(),
        "antisymmetric": averaged.is_antisymmetric(),
        "exact_antisymmetry_defect": antisymmetry_defect(exact),
        "max_standard_error": float(averaged.standard_error.max()),
    }
    scale = float(np.abs(averaged.matrix).max())
    if scale > 0 and averaged.standard_error.max() / scale > config.se_threshold:
        ctx.flag(f"Averaged kernel standard error above {config.se_threshold} of its largest entry")
    if not averaged.is_antisymmetric():
        ctx.flag(f"Averaged kernel is not antisymmetric: z = {averaged.antisymmetry_z():.3g}")

    # coefficient decay and shift extraction
    kernel = KERNEL_FUNCTIONS[config.kernel]
    lat = sample_lattice(1, config.oracle_k_min, seed)
    ctx.use_lattice(lat)
    quad = kernel_quadrature(kernel, lat)
    kq = lat.k_min + 2
    pairs = [(Q, R) for Q in lat.cubes(kq) for R in lat.cubes(kq + 1)]
    ctx.record("represent", "cz_coefficients")
    ctx.record("represent", "coefficient_decay_check")
    coeffs = cz_coefficients(kernel, lat, pairs, quadrature=quad)
    decay = coefficient_decay_check(coeffs, config.alpha, params)
    write_decay_report(decay, ctx.output_dir / "decay_report.csv")
    ctx.files.append("decay_report.csv")
    results["decay"] = {
        "pairs": len(decay.entries),
        "flagged": len(coeffs.flagged),
        "max_ratio": decay.max_ratio,
        "fit": decay.fit.model_dump() if decay.fit else None,
    }
    ctx.record("represent", "extract_shift")
    extraction = cz_coefficients(kernel, lat, shift_pairs(lat, 0, 1), quadrature=quad)
    fitted = coefficient_decay_check(extraction, config.alpha, params).fitted_constant
    S = extract_shift(extraction, 0, 1, config.alpha, fitted, params)
    passed, worst, _ = normalization_audit(S)
    results["extraction"] = {
        "fitted_constant": fitted,
        "audit_passed": passed,
        "worst_product": worst,
        "weight": representation_weight(0, 1, config.alpha),
    }
    Q = lat.cube(kq, 0)
    R = lat.ancestor(Q, 2)
    ctx.record("represent", "rho_qr", seed)
    results["rho"] = rho_qr(lat, Q, R, config.alpha, params, n, seed).model_dump()
    return results


def corrupted(S: ElementaryShift, factor: float = 2.0) -> ElementaryShift:
    """Copy of ``S`` with the output coefficients of its coarsest level multiplied by ``factor``."""
    blocks = dict(S.blocks)
    top = max(blocks)
    blocks[top] = ShiftBlock(cubes=blocks[top].cubes, u=blocks[top].u, v=blocks[top].v * factor)
    return ElementaryShift(S.lattice, S.m, S.n, S.generalized, blocks, S.rescale_factor)


def run_invariant_suite(ctx: RunContext, corrupt: bool = False) -> ViolationTracker:
    config = ctx.config
    seed = config.seed
    tracker = ViolationTracker(ctx.command, seed)
    lat = sample_lattice(config.dimension, config.oracle_k_min, seed)
    ctx.use_lattice(lat)
    rng = rng_stream(seed, RUN_STREAM, 99)
    N, delta = lat.n_cells, lat.cell_volume

    # lattice
    for k in lat.levels:
        counts = np.bincount(lat.labels(k), minlength=lat.n_cubes(k))
        tracker.check("lattice.partition", bool(np.all(counts == N // lat.n_cubes(k))), f"level {k} cell counts", k)
        if k < 0:
            parent, _ = lat.parent_table(k)
            tracker.check("lattice.nesting", bool(np.all(parent[lat.labels(k)] == lat.labels(k + 1))), f"level {k}", k)
    deep = list(lat.cubes(lat.k_min))
    for r0 in range(1, 5):
        coarse = GoodnessParams(r0=r0, gamma=config.gamma)
        fine = GoodnessParams(r0=r0 + 1, gamma=config.gamma)
        for Q in deep:
            if is_bad(lat, Q, fine) and not is_bad(lat, Q, coarse):
                tracker.check("lattice.bad_monotone", False, f"bad at r0={r0 + 1} but good at r0={r0}", str(Q))
                break
        else:
            tracker.check("lattice.bad_monotone", True)
    for _ in range(20):
        Q = lat.cube(int(rng.integers(lat.k_min, 1)), 0)
        R = lat.cube(Q.level, int(rng.integers(lat.n_cubes(Q.level))))
        D = long_distance(lat, Q, R)
        tracker.check(
            "lattice.long_distance",
            D == long_distance(lat, R, Q) and D >= Q.side + R.side,
            "asymmetric or below l(Q) + l(R)",
            f"{Q} {R}",
        )
    pi = [estimate_pi_bad(1, r0, 0.25, -12, min(config.n_samples, 20_000), seed).estimate for r0 in range(2, 9)]
    positive = [(2.0**r0, p) for r0, p in zip(range(2, 9), pi) if p > 0]
    slope = fit_loglog(*zip(*positive)).slope if len(positive) >= 2 else 0.0
    tracker.check("lattice.pi_bad_decay", slope < 0, f"fitted slope {slope}", pi)
    ctx.record("lattice", "estimate_pi_bad", seed)

    # signal
    w = random_weight(config, lat, 0)
    v = random_weight(config, lat, 1)
    a2, a2_cube = a2_constant(w)
    tracker.check("signal.a2_at_least_one", a2 >= 1 - 1e-12, f"a2 = {a2}", str(a2_cube))
    tracker.check("signal.a2_reciprocal", abs(a2 - a2_constant(w.reciprocal())[0]) <= 1e-9 * a2, "a2(w) != a2(1/w)")
    tracker.check("signal.joint_symmetric", abs(joint_a2(w, v)[0] - joint_a2(v, w)[0]) <= 1e-9 * joint_a2(w, v)[0])
    f = StepFunction(lat, rng.standard_normal(N))
    levels = distribution_function(f, np.linspace(0.1, 3.0, 30))
    tracker.check("signal.distribution_monotone", bool(np.all(np.diff(levels) <= 0)), "distribution increases")

    # haar
    rows = []
    for k in range(lat.k_min + 1, 1):
        cubes = np.repeat(np.arange(lat.n_cubes(k)), lat.n_children - 1)
        coeffs = np.tile(np.eye(lat.n_children)[1:], (lat.n_cubes(k), 1))
        rows.append(haar_function_values(lat, k, cubes, coeffs))
    H = np.concatenate(rows)
    gram_error = float(np.abs(H @ H.T * delta - np.eye(H.shape[0])).max())
    tracker.check("haar.orthonormal", gram_error <= 1e-10, f"Gram error {gram_error}")
    c = analyze(f)
    tracker.check("haar.parseval", abs(c.squared_norm() - f.l2_norm() ** 2) <= 1e-10 * max(1.0, f.l2_norm() ** 2))
    tracker.check("haar.round_trip", float(np.abs(synthesize(c).values - f.values).max()) <= 1e-10)
    pyramid = coefficient_pyramid(lat, f.values)
    fast = np.concatenate([pyramid[k][:, 1:].reshape(-1) for k in range(lat.k_min + 1, 1)])
    tracker.check("haar.fast_vs_oracle", float(np.abs(fast - H @ f.values * delta).max()) <= 1e-10)
    expectations = weighted_expectations(f, w)
    total = expectations[0][0] ** 2 * w.measure(lat.cube(0, 0))
    for k in range(lat.k_min + 1, 1):
        for Q in lat.cubes(k):
            for h in weighted_haar_basis(w, Q).functions:
                total += (float(np.sum(f.values * h.values * w.values)) * delta) ** 2
    weighted_norm = float(np.sum(f.values**2 * w.values)) * delta
    tracker.check("haar.weighted_parseval", abs(total - weighted_norm) <= 1e-9 * weighted_norm)
    ctx.record("haar", "weighted_haar_basis")

    # shift
    shifts = {"random": random_shift(lat, 1, 0, seed), "haar_multiplier": haar_multiplier(lat, random_signs(lat, seed))}
    shifts["extremal"] = haar_multiplier(lat, extremal_signs(w))
    if lat.dimension == 1:
        shifts["petermichl"] = petermichl_shift(lat)
    if corrupt:
        shifts["corrupted"] = corrupted(shifts["random"])
    corpus = rng.standard_normal((8, N))
    for name, S in shifts.items():
        passed, worst, cube = normalization_audit(S)
        tracker.check("shift.normalization", passed, f"{name}: worst pair product {worst:.6g}", str(cube))
        ok, ratio = kernel_audit(S)
        tracker.check("shift.kernel_bound", ok, f"{name}: kernel ratio {ratio:.6g}")
        out = apply_values(S, corpus)
        contraction = float((np.linalg.norm(out, axis=1) / np.linalg.norm(corpus, axis=1)).max())
        tracker.check("shift.l2_contraction", contraction <= 1 + 1e-10, f"{name}: ratio {contraction:.6g}")
        g = StepFunction(lat, rng.standard_normal(N))
        lhs = float(np.sum(apply_weighted(S, w, f).values * g.values * v.values)) * delta
        rhs = float(np.sum(f.values * adjoint_apply(S, v, g).values * w.values)) * delta
        tracker.check("shift.duality", abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs)), f"{name}: {lhs} vs {rhs}")
        dense = corpus @ dense_matrix(S).T
        tracker.check("shift.dense_oracle", float(np.abs(dense - out).max()) <= 1e-10 * max(1.0, float(np.abs(out).max())))
        B = testing_constants(S, w, v).B
        norm = dense_two_weight_norm(S, w, v)
        tracker.check("shift.testing_lower_bound", B <= norm**2 + 1e-8, f"{name}: B={B} > |S|^2={norm**2}")
        ok, ratio, cube = hilbert_schmidt_diagonal_check(S, w, v)
        tracker.check("shift.hs_diagonal", ok, f"{name}: ratio {ratio:.6g}", str(cube))
        sample = [lat.cube(k, 0) for k in range(lat.k_min + 1, 1)]
        ok, ratio, cube = haar_testing_check(S, w, v, sample, B=B)
        tracker.check("shift.haar_testing", ok, f"{name}: ratio {ratio:.6g}", str(cube))
    extremal_norm = dense_two_weight_norm(shifts["extremal"], w.reciprocal(), w)
    tracker.check(
        "shift.extremal_lower_bound",
        extremal_norm >= one_weight_lower_bound(a2) * (1 - 1e-9),
        f"L2(w) norm {extremal_norm:.6g} at a2 = {a2:.6g}",
    )
    ctx.record("shift", "normalization_audit")

    # decomp
    fvals = np.exp(2 * rng.standard_normal(N)) * rng.choice([-1.0, 1.0], N)
    cz_f = StepFunction(lat, fvals)
    for lam in (1.5 * cz_f.l1_norm(), cz_f.sup_norm() / 4):
        try:
            cz_decompose(cz_f, lam)
            tracker.check("decomp.cz_properties", True)
        except ValueError as e:
            tracker.check("decomp.cz_properties", False, str(e), lam)
    for r in range(4):
        families = slice_lattice(lat, r)
        covered = sorted(k for fam in families for k in fam.levels)
        gaps = {b - a for fam in families for a, b in zip(fam.levels[1:], fam.levels)}
        tracker.check("decomp.slices", covered == list(lat.levels) and gaps <= {r + 1}, f"r={r}", covered)
    forest = stopping_forest(lat.cube(0, 0), w)
    tracker.check("decomp.forest_threshold", not forest.threshold_violations(), "threshold rule broken", [str(p) for p in forest.threshold_violations()])
    packing = packing_report(forest, w)
    tracker.check("decomp.packing", packing.within_bounds(), "packing bounds exceeded", packing.model_dump())
    index = density_class_index(w)
    membership = all(
        np.all((np.exp2(index[k]) <= np.maximum(p, 1.0) * (1 + 1e-12)) & (p < np.exp2(index[k] + 1) * (1 + 1e-12)))
        for k, p in a2_products(w).items()
    )
    tracker.check("decomp.density_classes", membership, "class index disagrees with log2 of the cube product")
    abstract = jn_abstract_check(lat, random_phi_family(lat, seed, scale=0.5))
    tracker.check("decomp.jn_abstract", not abstract.hypothesis_met or all(abstract.passes), f"delta={abstract.delta}")
    classes = alpha_classes(forest, forest.root, w)
    members = sum(len(v) for v in classes.values())
    tracker.check("decomp.alpha_partition", members == len(forest.partition()[forest.root]), "alpha classes do not partition P(R)")
    B1 = 2 ** (lat.dimension + 2) + 5
    C1, _ = final_norm_check(shifts["random"], w, forest, B1)
    ctx.record("decomp", "final_norm_check")

    # represent
    tracker.check("represent.weights_exact", representation_weight(1, 2, config.alpha) == 2.0 ** (-3 * config.alpha / 2))
    params = GoodnessParams(r0=2, gamma=0.25)
    zero = pi_good_given_R([0], params.r0 + 1, params, 100, seed)
    tracker.check("represent.pi_zero_when_touching", zero.estimate == 0.0, f"estimate {zero.estimate}")
    if lat.dimension == 1:
        coeffs = cz_coefficients(hilbert_kernel, lat, shift_pairs(lat, 0, 1))
        decay = coefficient_decay_check(coeffs, config.alpha, GoodnessParams(r0=config.r0, gamma=config.gamma))
        tracker.check("represent.decay_finite", bool(np.isfinite(decay.max_ratio)), f"max ratio {decay.max_ratio}")
        exact = exact_translation_average(petermichl_shift, 1, lat.k_min)
        defect = antisymmetry_defect(exact)
        tracker.check("represent.antisymmetry", defect <= 1e-12, f"exact averaged kernel defect {defect:.3g}")
        sampled = average_kernel(petermichl_shift, 1, -4, min(config.n_samples, 2000), seed, translation_invariant=True)
        tracker.check(
            "represent.antisymmetry",
            sampled.is_antisymmetric(),
            f"sampled averaged kernel z = {sampled.antisymmetry_z():.3g} over {sampled.n_samples} lattices",
        )
        ctx.record("represent", "average_kernel", seed)

    ctx.csv(
        "invariants.csv",
        ["invariant", "passed"],
        sorted(tracker.checks.items()),
    )
    ctx.files.append(tracker.write(ctx.output_dir / "invariants.json").name)
    logger.info(f"Invariant suite: {sum(tracker.checks.values())}/{len(tracker.checks)} passed, C1={C1:.4g}")
    return tracker


COMMANDS: dict[str, Callable[[RunContext], dict[str, Any]]] = {
    "a2-sweep": run_a2_sweep,
    "complexity-sweep": run_complexity_sweep,
    "two-weight": run_two_weight,
    "weak11": run_weak11,
    "carleson": run_carleson,
    "corona": run_corona,
    "jn": run_jn,
    "representation": run_representation,
}


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file values, then command-line overrides, validated together."""
    if args.config:
        with open(args.config, "r") as f:
            config = load_experiment_config(f.read())
    else:
        config = ExperimentConfig()
    overrides: dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.samples is not None:
        overrides["n_samples"] = args.samples
    if args.resolution is not None:
        overrides["k_min"] = -args.resolution
        overrides["oracle_k_min"] = max(-args.resolution, config.oracle_k_min)
    try:
        return ExperimentConfig(**{**config.model_dump(), **overrides})
    except Exception as e:
        raise ValueError(f"Invalid experiment config: {str(e)}") from e


def write_outputs(ctx: RunContext, report: RunReport) -> None:
    with open(ctx.output_dir / "report.json", "w") as f:
        f.write(report.model_dump_json(indent=2))
    scalars = [(key, value) for key, value in report.results.items() if isinstance(value, (int, float, str, bool))]
    with open(ctx.output_dir / "summary.md", "w") as f:
        f.write(render_template("summary.md.jinja", report=report, scalars=scalars, files=ctx.files))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Numerical experiments on dyadic shifts, A2 weights and random dyadic lattices",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__,
    )
    parser.add_argument(
        "command",
        choices=[*COMMANDS, "invariants"],
        help="Experiment to run.",
    )
    parser.add_argument(
        "--config",
        type=str,
        default=None,
        help="Path to a key = value experiment config file.",
    )
    parser.add_argument(
        "--seed",
        type=int,
        default=None,
        help="Master seed (overrides the config file).",
    )
    parser.add_argument(
        "--out",
        type=str,
        default=None,
        help="Output directory for CSV, JSON and the log (overrides the config file).",
    )
    parser.add_argument(
        "--samples",
        type=int,
        default=None,
        help="Monte Carlo sample count (overrides the config file).",
    )
    parser.add_argument(
        "--resolution",
        type=int,
        default=None,
        help="Number of dyadic levels below the root, so that k_min = -resolution.",
    )
    parser.add_argument(
        "--corrupt-shift",
        action="store_true",
        help="Add a shift with broken normalization to the invariant suite.",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
    except (ValueError, OSError) as e:
        logging.basicConfig(level=logging.INFO, format=LOG_FORMAT, force=True)
        logger.error(f"Invalid configuration: {str(e)}")
        return 1

    output_dir = Path(config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    setup_logging(output_dir)
    logger.info(f"Running {args.command} with seed {config.seed}, output in {output_dir}")
    ctx = RunContext(args.command, config, output_dir)

    try:
        if args.command == "invariants":
            tracker = run_invariant_suite(ctx, corrupt=args.corrupt_shift)
            report = ctx.report(tracker.summary(), success=tracker.all_passed)
            write_outputs(ctx, report)
            return 0 if tracker.all_passed else 2
        results = COMMANDS[args.command](ctx)
        write_outputs(ctx, ctx.report(results))
    except Exception as e:
        logger.error(f"{args.command} failed: {str(e)}")
        report = ctx.report({}, success=False)
        report.error = str(e)
        write_outputs(ctx, report)
        return 1
    logger.info(f"{args.command} completed, results saved to {output_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
