"""The four-stage registration loop: filter data, associate, weigh, minimize.

``register`` applies the data filters once up front, builds the reference
index once, then iterates association, outlier filtering, and the
point-to-plane step until the differential update falls under the thresholds
or the iteration cap hits. Everything is deterministic given the seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .cloud import PointCloud, estimate_normals_and_density, max_density_filter, random_sample
from .errors import InsufficientMatches, SingularSystem
from .matching import KdTree, associate
from .minimizer import ConvergenceSpec, StepDecision, check_convergence, point_to_plane_step
from .robust import FilterKind, FilterSpec, apply_filter_detailed, initial_scale_state, scaled_errors
from .se3 import RigidTransform, compose, inverse


class StopReason(str, Enum):
    CONVERGED = "converged"
    MAX_ITER = "max_iter"
    FAILED = "failed"


@dataclass(frozen=True)
class IcpConfig:
    """Pipeline configuration; the defaults are the benchmark baseline:
    three matches per point, normals/density from 20 neighbors, density
    capped at 10k pts/m^3, 75% random subsampling, stop below 1 mm and
    1 mrad, at most 40 iterations."""

    filter: FilterSpec = field(default_factory=lambda: FilterSpec(FilterKind.L2))
    knn: int = 3
    normals_k: int = 20
    max_density: float | None = 10000.0
    keep_ratio: float = 0.75
    convergence: ConvergenceSpec = field(default_factory=ConvergenceSpec)
    seed: int = 0
    estimate_normals: bool = True


@dataclass(frozen=True)
class IterationStats:
    """One row of the registration trace."""

    iteration: int
    scale: float
    f_star: float | None
    n_weighted: int
    objective: float


@dataclass(frozen=True)
class RegistrationResult:
    final_transform: RigidTransform
    iterations: int
    stop_reason: StopReason
    trace: tuple[IterationStats, ...]


def preprocess_cloud(
    cloud: PointCloud, config: IcpConfig, rng: np.random.Generator
) -> PointCloud:
    """Run the data-filtering stage on one cloud (normals/density, cap, sample)."""
    if config.estimate_normals:
        cloud = estimate_normals_and_density(cloud, k=config.normals_k)
    if config.max_density is not None:
        cloud = max_density_filter(cloud, config.max_density, rng)
    if config.keep_ratio < 1.0:
        cloud = random_sample(cloud, config.keep_ratio, rng)
    return cloud


def register(
    reading: PointCloud,
    reference: PointCloud,
    t0: RigidTransform | None = None,
    config: IcpConfig | None = None,
) -> RegistrationResult:
    """Estimate the rigid transform taking ``reading`` onto ``reference``.

    A mid-loop singular system (or a weight collapse below six usable
    matches) ends the run with the last valid transform and FAILED rather
    than raising, so a benchmark sweep never aborts on one bad cell.
    """
    config = config or IcpConfig()
    T = t0 if t0 is not None else RigidTransform.identity()
    rng = np.random.default_rng(config.seed)

    reading_f = preprocess_cloud(reading, config, rng)
    reference_f = preprocess_cloud(reference, config, rng)
    tree = KdTree(reference_f)

    spec = config.filter
    state = initial_scale_state(spec)
    trace: list[IterationStats] = []
    stop = StopReason.MAX_ITER

    for it in range(1, config.convergence.max_iter + 1):
        matches = associate(reading_f, T, tree, config.knn)
        outcome = apply_filter_detailed(spec, matches, state)
        state = outcome.state
        try:
            T_new = point_to_plane_step(matches, outcome.weights, reading_f, reference_f, T)
        except (SingularSystem, InsufficientMatches):
            stop = StopReason.FAILED
            break

        e = scaled_errors(matches, outcome.s)
        trace.append(
            IterationStats(
                iteration=it,
                scale=outcome.s,
                f_star=outcome.f_star,
                n_weighted=int(np.count_nonzero(outcome.weights)),
                objective=float(np.sum(outcome.weights * e**2)),
            )
        )

        delta = compose(T_new, inverse(T))
        T = T_new
        decision = check_convergence(delta, config.convergence, it)
        if decision is StepDecision.CONVERGED_DIFFERENTIAL:
            stop = StopReason.CONVERGED
            break
        if decision is StepDecision.STOPPED_MAX_ITER:
            stop = StopReason.MAX_ITER
            break

    return RegistrationResult(
        final_transform=T,
        iterations=len(trace),
        stop_reason=stop,
        trace=tuple(trace),
    )


def export_trace_csv(result: RegistrationResult, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "s", "f_star", "n_weighted", "objective"])
        for row in result.trace:
            writer.writerow(
                [
                    row.iteration,
                    format(row.scale, ".17g"),
                    "" if row.f_star is None else format(row.f_star, ".17g"),
                    row.n_weighted,
                    format(row.objective, ".17g"),
                ]
            )
