"""Weighted point-to-plane minimization step and convergence checking.

One Gauss-Newton step: linearize the residual r_m = ((R p_m + t) - q_m) . n_m
around the prior with a small-angle rotation, solve the weighted 6x6 normal
equations, retract through the exponential map, and compose onto the prior.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .cloud import PointCloud
from .errors import InsufficientMatches, SingularSystem
from .matching import MatchSet
from .se3 import RigidTransform, compose, exp_so3, rotation_angle

_MAX_CONDITION = 1e12
_MAX_ROTATION_STEP = 0.5  # radians; clamps updates from wild priors


@dataclass(frozen=True)
class ConvergenceSpec:
    """Differential stop thresholds plus the iteration cap."""

    trans_eps: float = 1e-3   # meters
    rot_eps: float = 1e-3     # radians
    max_iter: int = 40

    def __post_init__(self) -> None:
        if self.trans_eps <= 0 or self.rot_eps <= 0 or self.max_iter <= 0:
            raise ValueError("convergence thresholds and max_iter must be positive")


class StepDecision(Enum):
    CONTINUE = "continue"
    CONVERGED_DIFFERENTIAL = "converged_differential"
    STOPPED_MAX_ITER = "stopped_max_iter"


def check_convergence(
    delta: RigidTransform, spec: ConvergenceSpec, iteration: int
) -> StepDecision:
    """Classify the update between successive estimates."""
    small_t = float(np.linalg.norm(delta.translation)) < spec.trans_eps
    small_r = rotation_angle(delta.rotation) < spec.rot_eps
    if small_t and small_r:
        return StepDecision.CONVERGED_DIFFERENTIAL
    if iteration >= spec.max_iter:
        return StepDecision.STOPPED_MAX_ITER
    return StepDecision.CONTINUE


def _gather(
    matches: MatchSet,
    weights: NDArray[np.float64],
    reading: PointCloud,
    reference: PointCloud,
    prior: RigidTransform,
):
    """Transformed reading points, reference points/normals, and weights for
    the positively weighted, non-degenerate matches."""
    if reference.normals is None:
        raise ValueError("point-to-plane step needs reference normals")
    weights = np.asarray(weights, dtype=np.float64)
    mask = weights > 0.0
    if reference.degenerate is not None:
        mask &= ~reference.degenerate[matches.reference_indices]
    count = int(np.count_nonzero(mask))
    if count < 6:
        raise InsufficientMatches(f"only {count} usable matches; need at least 6")
    p = prior.apply(reading.points[matches.reading_indices[mask]])
    q = reference.points[matches.reference_indices[mask]]
    n = reference.normals[matches.reference_indices[mask]]
    return p, q, n, weights[mask]


def point_to_plane_step(
    matches: MatchSet,
    weights: NDArray[np.float64],
    reading: PointCloud,
    reference: PointCloud,
    prior: RigidTransform,
) -> RigidTransform:
    """One weighted Gauss-Newton step; returns the updated absolute transform."""
    p, q, n, w = _gather(matches, weights, reading, reference, prior)

    r = np.einsum("mi,mi->m", p - q, n)
    J = np.hstack([np.cross(p, n), n])          # (M, 6); unknowns (omega, dt)
    Jw = J * w[:, None]
    A = Jw.T @ J
    g = Jw.T @ r

    if np.linalg.cond(A) > _MAX_CONDITION:
        raise SingularSystem(f"normal equations condition number exceeds {_MAX_CONDITION:g}")
    try:
        x = cho_solve(cho_factor(A), -g)
    except LinAlgError as exc:
        raise SingularSystem(f"normal equations not positive definite: {exc}") from None

    omega = x[:3]
    angle = float(np.linalg.norm(omega))
    if angle > _MAX_ROTATION_STEP:
        omega = omega * (_MAX_ROTATION_STEP / angle)
    delta = RigidTransform(exp_so3(omega), x[3:])
    return compose(delta, prior)


# ---------------------------------------------------------------------------
# Objective diagnostics (gradient checks, descent monitoring)
# ---------------------------------------------------------------------------

def point_to_plane_objective(
    params: NDArray[np.float64],
    matches: MatchSet,
    weights: NDArray[np.float64],
    reading: PointCloud,
    reference: PointCloud,
    prior: RigidTransform,
) -> float:
    """Sum of w * (((exp(omega) p + dt) - q) . n)^2 at a 6-vector offset from
    the prior, with params = (omega, dt)."""
    p, q, n, w = _gather(matches, weights, reading, reference, prior)
    params = np.asarray(params, dtype=np.float64).reshape(6)
    moved = p @ exp_so3(params[:3]).T + params[3:]
    r = np.einsum("mi,mi->m", moved - q, n)
    return float(np.sum(w * r**2))


def point_to_plane_gradient(
    matches: MatchSet,
    weights: NDArray[np.float64],
    reading: PointCloud,
    reference: PointCloud,
    prior: RigidTransform,
) -> NDArray[np.float64]:
    """Analytic gradient of the objective at params = 0: 2 J^T W r."""
    p, q, n, w = _gather(matches, weights, reading, reference, prior)
    r = np.einsum("mi,mi->m", p - q, n)
    J = np.hstack([np.cross(p, n), n])
    return 2.0 * (J * w[:, None]).T @ r
