"""Exact nearest-neighbor data association (pipeline stage 2).

scipy's cKDTree does the heavy lifting; a thin overlay re-ranks candidates
lexicographically by (distance, reference index) so equidistant neighbors
always resolve to the lowest index. That makes a registration bit-reproducible
and lets small symmetric test scenes compare exactly against brute force.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from .cloud import PointCloud
from .se3 import RigidTransform


class KdTree:
    """Immutable exact-NN index over a cloud's points."""

    def __init__(self, cloud: PointCloud):
        self._points = cloud.points
        self._tree = cKDTree(cloud.points)

    @property
    def size(self) -> int:
        return self._points.shape[0]

    @property
    def points(self) -> NDArray[np.float64]:
        return self._points

    def query_knn(
        self, queries: NDArray[np.float64], knn: int
    ) -> tuple[NDArray[np.float64], NDArray[np.int64]]:
        """k nearest neighbors per query row, ties broken toward lower index.

        Returns (distances, indices), each (Q, knn), distances ascending within
        a row and equal distances ordered by ascending reference index.
        """
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if not 1 <= knn <= self.size:
            raise ValueError(f"knn must be in [1, {self.size}], got {knn}")

        # Over-query so boundary ties are inside the candidate window, then
        # re-rank. Escalate the window for rows where the tie may extend past it.
        pad = min(self.size, knn + 4)
        dist, idx = self._query(np.arange(queries.shape[0]), queries, pad)
        while pad < self.size:
            unresolved = dist[:, pad - 1] <= dist[:, knn - 1]
            if not unresolved.any():
                break
            pad = min(self.size, pad * 2)
            rows = np.flatnonzero(unresolved)
            d2, i2 = self._query(rows, queries[rows], pad)
            grown_d = np.full((dist.shape[0], pad), np.inf)
            grown_i = np.full((dist.shape[0], pad), -1, dtype=np.int64)
            grown_d[:, : dist.shape[1]] = dist
            grown_i[:, : dist.shape[1]] = idx
            grown_d[rows] = d2
            grown_i[rows] = i2
            dist, idx = grown_d, grown_i

        order = np.lexsort((idx, dist), axis=-1)[:, :knn]
        rows = np.arange(dist.shape[0])[:, None]
        return dist[rows, order], idx[rows, order]

    def _query(self, rows, queries, k):
        dist, idx = self._tree.query(queries, k=k, workers=-1)
        if k == 1:
            dist = dist[:, None]
            idx = idx[:, None]
        return dist, idx.astype(np.int64)


@dataclass(frozen=True)
class MatchSet:
    """Flat pairing of reading and reference points from a k-NN query.

    Entry m pairs reading point ``reading_indices[m]`` with reference point
    ``reference_indices[m]`` at Euclidean distance ``distances[m]`` (meters,
    measured after the prior transform). Each reading point contributes
    exactly ``knn`` consecutive entries, sorted by ascending distance.
    """

    reading_indices: NDArray[np.int64]
    reference_indices: NDArray[np.int64]
    distances: NDArray[np.float64]
    knn: int

    def __post_init__(self) -> None:
        for name in ("reading_indices", "reference_indices", "distances"):
            arr = getattr(self, name)
            arr.setflags(write=False)
        if not (len(self.reading_indices) == len(self.reference_indices) == len(self.distances)):
            raise ValueError("match arrays must have equal length")

    def __len__(self) -> int:
        return self.distances.shape[0]


def build_kdtree(cloud: PointCloud) -> KdTree:
    return KdTree(cloud)


def associate(
    reading: PointCloud,
    current_T: RigidTransform,
    reference_tree: KdTree,
    knn: int,
) -> MatchSet:
    """Match every transformed reading point to its knn nearest reference points.

    ``knn`` is clamped (with a warning) when the reference is smaller.
    """
    if knn < 1:
        raise ValueError(f"knn must be >= 1, got {knn}")
    if knn > reference_tree.size:
        warnings.warn(
            f"knn={knn} exceeds reference size {reference_tree.size}; clamping",
            stacklevel=2,
        )
        knn = reference_tree.size

    transformed = current_T.apply(reading.points)
    _, idx = reference_tree.query_knn(transformed, knn)

    n = transformed.shape[0]
    # Recompute distances from the definition so stored values are exactly
    # ||T p - q||, then restore the (distance, index) order within each point.
    diffs = transformed[:, None, :] - reference_tree.points[idx]
    dist = np.linalg.norm(diffs, axis=2)
    order = np.lexsort((idx, dist), axis=-1)
    rows = np.arange(n)[:, None]
    dist = dist[rows, order]
    idx = idx[rows, order]

    return MatchSet(
        reading_indices=np.repeat(np.arange(n, dtype=np.int64), knn),
        reference_indices=idx.reshape(-1),
        distances=dist.reshape(-1),
        knn=knn,
    )
