from typing import Any

from pydantic import BaseModel, Field


class ProvenanceEntry(BaseModel):
    module: str
    operation: str
    seed: int | None = Field(default=None)


class LatticeDescriptor(BaseModel):
    dimension: int
    k_min: int
    seed: int | None = Field(default=None)
    shifts: list[list[int]] = Field(default_factory=list)


class CubeRef(BaseModel):
    level: int
    index: list[int]


class FitResult(BaseModel):
    """Ordinary least squares fit in log-log coordinates."""

    slope: float
    intercept: float
    r_squared: float
    point_count: int
    residual_max: float
    # slopes from fewer than four points are kept for inspection but never reported
    reportable: bool = Field(default=False)


class NormReport(BaseModel):
    weight_hash: str | None = Field(default=None)
    a2: float = Field(default=1.0)
    norm: float
    iterations: int
    residual: float
    seed: int
    converged: bool = Field(default=True)


class CubeRatio(BaseModel):
    cube: CubeRef
    ratio: float
    adjoint: bool = Field(default=False)


class TestingReport(BaseModel):
    B: float
    joint_a2: float
    r: int
    d: int
    measured_norm: float | None = Field(default=None)
    predicted_bracket: float | None = Field(default=None)
    worst: list[CubeRatio] = Field(default_factory=list)

    @property
    def bracket_ratio(self) -> float | None:
        """Measured norm over the predicted bracket, once both are known."""
        if self.measured_norm is None or not self.predicted_bracket:
            return None
        return self.measured_norm / self.predicted_bracket


class PredictedBounds(BaseModel):
    two_weight_bracket: float
    one_weight_bracket: float
    B1: float
    weak_bound: float
    note: str = Field(default="brackets up to absolute constant")


class DistributionCurve(BaseModel):
    thresholds: list[float]
    lebesgue_measures: list[float]
    lebesgue_bounds: list[float]
    weighted_measures: list[float]
    weighted_bounds: list[float]
    passes: list[bool]
    tail_slope: float | None = Field(default=None)

    @property
    def all_pass(self) -> bool:
        return all(self.passes)


class AbstractJNReport(BaseModel):
    delta: float
    thresholds: list[float]
    worst_ratios: list[float]
    passes: list[bool]
    hypothesis_met: bool = Field(default=True)


class PackingReport(BaseModel):
    lebesgue_ratio: float
    l2_overlap_ratio: float
    weighted_ratio: float
    a2: float
    worst_cube: CubeRef | None = Field(default=None)

    def within_bounds(self, slack: float = 1e-12) -> bool:
        return (
            self.lebesgue_ratio <= 4.0 / 3.0 + slack
            and self.l2_overlap_ratio <= 2.0 + slack
            and self.weighted_ratio <= 16.0 / 3.0 + slack
        )


class DecayEntry(BaseModel):
    q: CubeRef
    r: CubeRef
    coefficient: float
    bound: float
    ratio: float
    long_distance: float


class DecayReport(BaseModel):
    alpha: float
    entries: list[DecayEntry] = Field(default_factory=list)
    fit: FitResult | None = Field(default=None)
    fitted_constant: float = Field(default=0.0)

    @property
    def max_ratio(self) -> float:
        return max((e.ratio for e in self.entries), default=0.0)


class MonteCarloEstimate(BaseModel):
    estimate: float
    standard_error: float
    n_samples: int
    seed: int
    s0: int | None = Field(default=None)


class RunReport(BaseModel):
    command: str
    config: dict[str, Any] = Field(default_factory=dict)
    lattice: LatticeDescriptor | None = Field(default=None)
    provenance: list[ProvenanceEntry] = Field(default_factory=list)
    results: dict[str, Any] = Field(default_factory=dict)
    flags: list[str] = Field(default_factory=list)
    success: bool = Field(default=True)
    error: str | None = Field(default=None)
