"""Point-cloud container, CSV/PLY loading, and the data-filtering stage.

The data filters mirror the front of the registration pipeline: per-point
surface normals and densities from a k-NN PCA fit, probabilistic density
capping, and independent random subsampling. All attribute arrays stay
aligned with their points through every filter.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from .errors import EmptyCloud, MissingColumn, MissingDensities, ParseFailure

_CHUNK = 65536  # points per block in normal estimation (bounds the (chunk, k, 3) buffer)
_DEGENERATE_EIGENVALUE = 1e-20


@dataclass(frozen=True)
class PointCloud:
    """Immutable cloud of N 3D points with optional per-point attributes.

    points      (N, 3) float64 coordinates in meters
    normals     (N, 3) unit vectors, or None
    densities   (N,) points per cubic meter (> 0), or None
    degenerate  (N,) bool mask of points whose normal fit was degenerate
    """

    points: NDArray[np.float64]
    normals: NDArray[np.float64] | None = None
    densities: NDArray[np.float64] | None = None
    degenerate: NDArray[np.bool_] | None = None

    def __post_init__(self) -> None:
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if pts.shape[0] == 0:
            raise EmptyCloud("point cloud has no points")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

        n = pts.shape[0]
        if self.normals is not None:
            nrm = np.ascontiguousarray(np.asarray(self.normals, dtype=np.float64))
            if nrm.shape != (n, 3):
                raise ValueError(f"normals must be ({n}, 3), got {nrm.shape}")
            lengths = np.linalg.norm(nrm, axis=1)
            if not np.all(np.abs(lengths - 1.0) <= 1e-6):
                raise ValueError("normals must have unit length (tol 1e-6)")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)
        if self.densities is not None:
            dens = np.ascontiguousarray(np.asarray(self.densities, dtype=np.float64)).reshape(n)
            if not np.all(dens > 0.0):
                raise ValueError("densities must be strictly positive")
            dens.setflags(write=False)
            object.__setattr__(self, "densities", dens)
        if self.degenerate is not None:
            flags = np.ascontiguousarray(np.asarray(self.degenerate, dtype=bool)).reshape(n)
            flags.setflags(write=False)
            object.__setattr__(self, "degenerate", flags)

    def __len__(self) -> int:
        return self.points.shape[0]

    def select(self, mask_or_indices) -> "PointCloud":
        """New cloud restricted to a boolean mask or index array (order preserved)."""
        return PointCloud(
            points=self.points[mask_or_indices],
            normals=None if self.normals is None else self.normals[mask_or_indices],
            densities=None if self.densities is None else self.densities[mask_or_indices],
            degenerate=None if self.degenerate is None else self.degenerate[mask_or_indices],
        )


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def load_cloud(path: str | Path, format: str | None = None) -> PointCloud:
    """Load a cloud from CSV (columns x,y,z; optional nx,ny,nz) or ascii PLY.

    ``format`` is "csv" or "ply-ascii"; inferred from the file suffix when None.
    """
    path = Path(path)
    if format is None:
        suffix = path.suffix.lower()
        if suffix == ".csv":
            format = "csv"
        elif suffix == ".ply":
            format = "ply-ascii"
        else:
            raise ParseFailure(f"cannot infer format from suffix {suffix!r}; pass format=")
    if format == "csv":
        return _load_csv(path)
    if format == "ply-ascii":
        return _load_ply_ascii(path)
    raise ValueError(f"unknown format {format!r} (expected 'csv' or 'ply-ascii')")


def _load_csv(path: Path) -> PointCloud:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyCloud(f"{path}: file is empty") from None
        columns = {name.strip(): i for i, name in enumerate(header)}
        for required in ("x", "y", "z"):
            if required not in columns:
                raise MissingColumn(f"{path}: missing column {required!r}")
        xyz_cols = [columns["x"], columns["y"], columns["z"]]
        has_normals = all(name in columns for name in ("nx", "ny", "nz"))
        nrm_cols = [columns[n] for n in ("nx", "ny", "nz")] if has_normals else None

        points: list[list[float]] = []
        normals: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                points.append([float(row[c]) for c in xyz_cols])
                if nrm_cols is not None:
                    normals.append([float(row[c]) for c in nrm_cols])
            except (ValueError, IndexError) as exc:
                raise ParseFailure(f"{path}: line {lineno}: {exc}") from None

    if not points:
        raise EmptyCloud(f"{path}: no data rows")
    return PointCloud(
        points=np.array(points),
        normals=np.array(normals) if normals else None,
    )


def _load_ply_ascii(path: Path) -> PointCloud:
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseFailure(f"{path}: line 1: not a PLY file")

    vertex_count = 0
    properties: list[str] = []
    in_vertex_element = False
    body_start = None
    for lineno, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        if not tokens:
            continue
        if tokens[0] == "format":
            if tokens[1] != "ascii":
                raise ParseFailure(f"{path}: line {lineno}: only ascii PLY is supported")
        elif tokens[0] == "element":
            in_vertex_element = tokens[1] == "vertex"
            if in_vertex_element:
                vertex_count = int(tokens[2])
        elif tokens[0] == "property" and in_vertex_element:
            properties.append(tokens[-1])
        elif tokens[0] == "end_header":
            body_start = lineno  # 0-based index into `lines` is lineno - 1 + 1
            break
    if body_start is None:
        raise ParseFailure(f"{path}: header has no end_header")
    for required in ("x", "y", "z"):
        if required not in properties:
            raise MissingColumn(f"{path}: vertex element lacks property {required!r}")
    cols = [properties.index(n) for n in ("x", "y", "z")]

    points = []
    for offset in range(vertex_count):
        lineno = body_start + 1 + offset
        if lineno - 1 >= len(lines):
            raise ParseFailure(f"{path}: line {lineno}: expected {vertex_count} vertices")
        tokens = lines[lineno - 1].split()
        try:
            points.append([float(tokens[c]) for c in cols])
        except (ValueError, IndexError) as exc:
            raise ParseFailure(f"{path}: line {lineno}: {exc}") from None
    if not points:
        raise EmptyCloud(f"{path}: zero vertices")
    return PointCloud(points=np.array(points))


def save_cloud_csv(cloud: PointCloud, path: str | Path) -> None:
    """Write a cloud as CSV (x,y,z and nx,ny,nz when normals are present)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        if cloud.normals is None:
            writer.writerow(["x", "y", "z"])
            for p in cloud.points:
                writer.writerow([format(v, ".17g") for v in p])
        else:
            writer.writerow(["x", "y", "z", "nx", "ny", "nz"])
            for p, n in zip(cloud.points, cloud.normals):
                writer.writerow([format(v, ".17g") for v in (*p, *n)])


# ---------------------------------------------------------------------------
# Data filters
# ---------------------------------------------------------------------------

def estimate_normals_and_density(cloud: PointCloud, k: int = 20) -> PointCloud:
    """Attach PCA surface normals and k-NN densities to every point.

    The normal of a point is the eigenvector of the smallest eigenvalue of the
    covariance of its k nearest neighbors (the point itself excluded); the
    density is ``k`` divided by the volume of the ball reaching the k-th
    neighbor. Normals are oriented away from the cloud centroid. Points whose
    neighborhoods have zero spread get normal (0, 0, 1) and a degenerate flag;
    the minimizer skips them on the reference side.
    """
    if k < 3:
        raise ValueError(f"k must be >= 3, got {k}")
    n = len(cloud)
    if n <= k:
        raise ValueError(f"cloud has {n} points; need more than k={k}")

    tree = cKDTree(cloud.points)
    normals = np.empty((n, 3))
    densities = np.empty(n)
    degenerate = np.zeros(n, dtype=bool)
    centroid = cloud.points.mean(axis=0)

    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        block = cloud.points[start:stop]
        # k+1 including the query point itself; drop the self column.
        dists, idx = tree.query(block, k=k + 1, workers=-1)
        dists = dists[:, 1:]
        neighbors = cloud.points[idx[:, 1:]]  # (B, k, 3)

        mean = neighbors.mean(axis=1, keepdims=True)
        centered = neighbors - mean
        cov = np.einsum("bki,bkj->bij", centered, centered) / k
        eigvals, eigvecs = np.linalg.eigh(cov)

        blk_normals = eigvecs[:, :, 0]
        blk_degenerate = eigvals[:, 2] <= _DEGENERATE_EIGENVALUE
        blk_normals[blk_degenerate] = (0.0, 0.0, 1.0)
        # Outward orientation: non-negative dot with (point - centroid).
        outward = block - centroid
        flip = np.einsum("bi,bi->b", blk_normals, outward) < 0.0
        blk_normals[flip] *= -1.0
        blk_normals /= np.linalg.norm(blk_normals, axis=1, keepdims=True)

        kth = np.maximum(dists[:, -1], 1e-12)
        normals[start:stop] = blk_normals
        densities[start:stop] = k / (4.0 / 3.0 * np.pi * kth**3)
        degenerate[start:stop] = blk_degenerate

    return PointCloud(cloud.points, normals=normals, densities=densities, degenerate=degenerate)


def max_density_filter(
    cloud: PointCloud, max_density: float, rng: np.random.Generator
) -> PointCloud:
    """Thin the cloud so the expected density nowhere exceeds ``max_density``.

    Each point of density d survives with probability min(1, max_density / d);
    surviving densities are capped at ``max_density``.
    """
    if cloud.densities is None:
        raise MissingDensities("max_density_filter needs densities; estimate them first")
    if max_density <= 0:
        raise ValueError(f"max_density must be > 0, got {max_density}")
    keep_prob = np.minimum(1.0, max_density / cloud.densities)
    mask = rng.random(len(cloud)) < keep_prob
    out = cloud.select(mask)  # raises EmptyCloud when nothing survives
    capped = np.minimum(out.densities, max_density)
    return PointCloud(out.points, normals=out.normals, densities=capped, degenerate=out.degenerate)


def random_sample(
    cloud: PointCloud, keep_ratio: float, rng: np.random.Generator
) -> PointCloud:
    """Keep each point independently with probability ``keep_ratio``."""
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    mask = rng.random(len(cloud)) < keep_ratio
    return cloud.select(mask)
