"""Synthetic scenes for demos and correctness experiments.

The multi-plane scene is a room-like arrangement (floor, two walls, two
oblique panels) whose five normal directions constrain all six pose degrees
of freedom, so a clean registration from a moderate offset must recover the
ground truth.
"""

from __future__ import annotations

import numpy as np

from .cloud import PointCloud
from .se3 import RigidTransform, axis_angle, inverse


def multi_plane_scene(n_points: int = 10000, rng: np.random.Generator | None = None) -> PointCloud:
    """Points sampled uniformly on five plane patches spanning ~10 m."""
    rng = rng or np.random.default_rng(0)
    fractions = (0.35, 0.2, 0.2, 0.125, 0.125)
    counts = [int(round(f * n_points)) for f in fractions]
    counts[0] += n_points - sum(counts)

    patches = []
    # Floor z = 0 over [0,10] x [0,10].
    u, v = rng.random((2, counts[0])) * 10.0
    patches.append(np.column_stack([u, v, np.zeros(counts[0])]))
    # Wall y = 0, x in [0,10], z in [0,4].
    u = rng.random(counts[1]) * 10.0
    w = rng.random(counts[1]) * 4.0
    patches.append(np.column_stack([u, np.zeros(counts[1]), w]))
    # Wall x = 0, y in [0,10], z in [0,4].
    u = rng.random(counts[2]) * 10.0
    w = rng.random(counts[2]) * 4.0
    patches.append(np.column_stack([np.zeros(counts[2]), u, w]))
    # Ramp z = x * tan(30 deg) over x in [2,8], y in [2,8].
    u = 2.0 + rng.random(counts[3]) * 6.0
    v = 2.0 + rng.random(counts[3]) * 6.0
    patches.append(np.column_stack([u, v, u * np.tan(np.pi / 6.0)]))
    # Tilted panel z = 4 - y * tan(20 deg) over x in [1,9], y in [0,6].
    u = 1.0 + rng.random(counts[4]) * 8.0
    v = rng.random(counts[4]) * 6.0
    patches.append(np.column_stack([u, v, 4.0 - v * np.tan(np.pi / 9.0)]))

    return PointCloud(np.vstack(patches))


def random_ground_truth(
    translation_m: float, angle_rad: float, rng: np.random.Generator
) -> RigidTransform:
    """Transform of fixed magnitudes about/along random directions."""
    def unit(v):
        return v / np.linalg.norm(v)

    t = unit(rng.standard_normal(3)) * translation_m
    R = axis_angle(unit(rng.standard_normal(3)), angle_rad)
    return RigidTransform(R, t)


def make_pair(
    scene: PointCloud,
    T_gt: RigidTransform,
    clutter_ratio: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[PointCloud, PointCloud]:
    """Build a (reading, reference) pair so that T_gt maps reading onto reference.

    ``clutter_ratio`` replaces that fraction of reading points with uniform
    noise inside the reference bounding box (pulled back through T_gt).
    """
    rng = rng or np.random.default_rng(0)
    reference = scene
    reading_pts = inverse(T_gt).apply(reference.points)

    if clutter_ratio > 0.0:
        n = reading_pts.shape[0]
        n_clutter = int(round(clutter_ratio * n))
        victims = rng.choice(n, size=n_clutter, replace=False)
        lo = reference.points.min(axis=0)
        hi = reference.points.max(axis=0)
        clutter_ref = lo + rng.random((n_clutter, 3)) * (hi - lo)
        reading_pts = reading_pts.copy()
        reading_pts[victims] = inverse(T_gt).apply(clutter_ref)

    return PointCloud(reading_pts), reference
