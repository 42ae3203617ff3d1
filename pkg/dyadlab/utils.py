import csv
import hashlib
import typing
from pathlib import Path
from typing import Any, Iterable, Sequence

import jinja2
import numpy as np
from pydantic import BaseModel, Field, field_validator

from dyadlab.report_output import FitResult

TEMPLATE_DIR = Path(__file__).parent / "templates"

WEIGHT_FAMILIES = ("mixed", "power", "random", "constant")
SHIFT_FAMILIES = ("petermichl", "haar_multiplier", "extremal", "random", "paraproduct")
KERNELS = ("hilbert",)


class ExperimentConfig(BaseModel):
    dimension: int = Field(default=1)
    k_min: int = Field(default=-10)
    oracle_k_min: int = Field(default=-8)
    seed: int = Field(default=0)
    weight_family: str = Field(default="mixed")
    shift_family: str = Field(default="petermichl")
    power_exponents: list[float] = Field(
        default_factory=lambda: [0.0, 0.3, 0.5, 0.7, 0.8, 0.9, 0.95]
    )
    a2_targets: list[float] = Field(default_factory=lambda: [2.0, 5.0, 10.0, 30.0, 100.0])
    complexities: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4, 5, 6])
    complexity_a2: float = Field(default=100.0)
    r0_values: list[int] = Field(default_factory=lambda: [2, 3, 4, 5, 6, 7, 8])
    r0: int = Field(default=5)
    alpha: float = Field(default=1.0)
    gamma: float = Field(default=0.25)
    kernel: str = Field(default="hilbert")
    tol: float = Field(default=1e-8)
    max_iter: int = Field(default=10_000)
    n_samples: int = Field(default=10_000)
    n_weights: int = Field(default=20)
    se_threshold: float = Field(default=0.05)
    output_dir: str = Field(default="output")

    @field_validator("dimension")
    @classmethod
    def _check_dimension(cls, value: int) -> int:
        if value not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {value}")
        return value

    @field_validator("k_min", "oracle_k_min")
    @classmethod
    def _check_level(cls, value: int) -> int:
        if value > -1:
            raise ValueError(f"k_min must be <= -1, got {value}")
        return value

    @field_validator("weight_family")
    @classmethod
    def _check_weight_family(cls, value: str) -> str:
        if value not in WEIGHT_FAMILIES:
            raise ValueError(f"unknown weight family '{value}', expected one of {WEIGHT_FAMILIES}")
        return value

    @field_validator("shift_family")
    @classmethod
    def _check_shift_family(cls, value: str) -> str:
        if value not in SHIFT_FAMILIES:
            raise ValueError(f"unknown shift family '{value}', expected one of {SHIFT_FAMILIES}")
        return value

    @field_validator("kernel")
    @classmethod
    def _check_kernel(cls, value: str) -> str:
        if value not in KERNELS:
            raise ValueError(f"unknown kernel '{value}', expected one of {KERNELS}")
        return value

    @field_validator("r0")
    @classmethod
    def _check_r0(cls, value: int) -> int:
        if value < 1:
            raise ValueError(f"r0 must be a positive integer, got {value}")
        return value

    @field_validator("n_samples")
    @classmethod
    def _check_samples(cls, value: int) -> int:
        if value < 1:
            raise ValueError(f"n_samples must be >= 1, got {value}")
        return value


def load_experiment_config(text: str) -> ExperimentConfig:
    """
    Parse the flat ``key = value`` configuration format.

    Blank lines and ``#`` comments are ignored; list-valued fields take
    comma-separated values.

    Args:
        text: Contents of the configuration file

    Returns:
        The validated experiment configuration

    Raises:
        ValueError: On a malformed line, an unknown key or an invalid value
    """
    fields = ExperimentConfig.model_fields
    data: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"Malformed config line {lineno}: '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in fields:
            raise ValueError(f"Unknown config key '{key}' on line {lineno}")
        if typing.get_origin(fields[key].annotation) is list:
            data[key] = [item.strip() for item in value.split(",") if item.strip()]
        else:
            data[key] = value
    try:
        return ExperimentConfig(**data)
    except Exception as e:
        raise ValueError(f"Invalid experiment config: {str(e)}") from e


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, *keys)``; independent of call order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *keys])))


def fit_loglog(x: Sequence[float] | np.ndarray, y: Sequence[float] | np.ndarray) -> FitResult:
    """OLS fit of log2(y) against log2(x) over the strictly positive pairs."""
    xs = np.asarray(x, dtype=np.float64)
    ys = np.asarray(y, dtype=np.float64)
    keep = (xs > 0) & (ys > 0) & np.isfinite(xs) & np.isfinite(ys)
    return fit_linear(np.log2(xs[keep]), np.log2(ys[keep]))


def fit_linear(x: Sequence[float] | np.ndarray, y: Sequence[float] | np.ndarray) -> FitResult:
    xs = np.asarray(x, dtype=np.float64)
    ys = np.asarray(y, dtype=np.float64)
    if xs.size < 2 or np.ptp(xs) == 0:
        raise ValueError(f"Need at least two distinct abscissae for a fit, got {xs.size}")
    slope, intercept = np.polyfit(xs, ys, 1)
    residuals = ys - (slope * xs + intercept)
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    ss_res = float(np.sum(residuals**2))
    return FitResult(
        slope=float(slope),
        intercept=float(intercept),
        r_squared=1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot,
        point_count=int(xs.size),
        residual_max=float(np.max(np.abs(residuals))),
        reportable=xs.size >= 4,
    )


def format_cell(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if value is None:
        return ""
    return str(value)


def write_csv(
    path: Path | str,
    header: Sequence[str],
    rows: Iterable[Sequence[Any]],
    preamble: str | None = None,
) -> Path:
    """Write a CSV table with a header row; an optional preamble becomes a leading ``#`` line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        if preamble is not None:
            f.write(f"# {preamble}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])
    return path


def array_hash(values: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(values, dtype=np.float64).tobytes()).hexdigest()


def render_template(name: str, **context: Any) -> str:
    with open(TEMPLATE_DIR / name, "r") as f:
        template = jinja2.Template(f.read(), keep_trailing_newline=True)
    return template.render(**context)
