"""Rigid transforms on SE(3): composition, inversion, exponential map, text I/O.

All rotations are 3x3 proper orthonormal matrices, translations are 3-vectors
in meters. Transforms act on points as ``p -> R p + t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .errors import ParseFailure

_ORTHONORMALITY_TOL = 1e-9


def _orthonormalize(R: NDArray[np.float64]) -> NDArray[np.float64]:
    """Project a near-rotation onto SO(3) (closest orthonormal, det +1)."""
    U, _, Vt = np.linalg.svd(R)
    out = U @ Vt
    if np.linalg.det(out) < 0:
        U[:, -1] *= -1.0
        out = U @ Vt
    return out


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element: ``rotation`` (3x3, det +1) and ``translation`` (3,)."""

    rotation: NDArray[np.float64]
    translation: NDArray[np.float64]

    def __post_init__(self) -> None:
        R = np.ascontiguousarray(np.asarray(self.rotation, dtype=np.float64))
        t = np.ascontiguousarray(np.asarray(self.translation, dtype=np.float64)).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(R) < 0:
            raise ValueError("rotation has negative determinant (reflection)")
        # Tighten to the invariant tolerance; inputs may carry compounding error.
        if not np.allclose(R.T @ R, np.eye(3), atol=_ORTHONORMALITY_TOL):
            R = _orthonormalize(R)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points: NDArray[np.float64]) -> NDArray[np.float64]:
        """Transform an (N, 3) array of points (or a single 3-vector)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def matrix(self) -> NDArray[np.float64]:
        """4x4 homogeneous matrix."""
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    @staticmethod
    def from_matrix(M: NDArray[np.float64]) -> "RigidTransform":
        M = np.asarray(M, dtype=np.float64)
        if M.shape != (4, 4):
            raise ValueError(f"expected 4x4 matrix, got {M.shape}")
        return RigidTransform(M[:3, :3], M[:3, 3])


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composition a∘b: applies ``b`` first, then ``a``."""
    R = _orthonormalize(a.rotation @ b.rotation)
    t = a.rotation @ b.translation + a.translation
    return RigidTransform(R, t)


def inverse(T: RigidTransform) -> RigidTransform:
    Rt = T.rotation.T
    return RigidTransform(Rt, -Rt @ T.translation)


def rotation_angle(R: NDArray[np.float64]) -> float:
    """Geodesic angle of a rotation matrix, arccos((trace - 1) / 2), in [0, pi]."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def skew(v: NDArray[np.float64]) -> NDArray[np.float64]:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def exp_so3(omega: NDArray[np.float64]) -> NDArray[np.float64]:
    """Rodrigues exponential map from a rotation vector to a rotation matrix."""
    omega = np.asarray(omega, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(omega))
    if theta < 1e-12:
        return np.eye(3) + skew(omega)
    K = skew(omega / theta)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def axis_angle(axis: NDArray[np.float64], angle: float) -> NDArray[np.float64]:
    """Rotation matrix for a given (not necessarily unit) axis and angle."""
    axis = np.asarray(axis, dtype=np.float64).reshape(3)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise ValueError("axis must be non-zero")
    return exp_so3(axis / n * angle)


# ---------------------------------------------------------------------------
# Text serialization: 4x4 row-major homogeneous matrix, one row per line,
# 17 significant decimal digits (lossless float64 round trip).
# ---------------------------------------------------------------------------

def transform_to_text(T: RigidTransform) -> str:
    rows = []
    for row in T.matrix():
        rows.append(" ".join(format(v, ".17g") for v in row))
    return "\n".join(rows) + "\n"


def transform_from_text(text: str) -> RigidTransform:
    values = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = [float(tok) for tok in line.split()]
        except ValueError as exc:
            raise ParseFailure(f"line {lineno}: {exc}") from None
        if len(row) != 4:
            raise ParseFailure(f"line {lineno}: expected 4 values, got {len(row)}")
        values.append(row)
    if len(values) != 4:
        raise ParseFailure(f"expected 4 matrix rows, got {len(values)}")
    return RigidTransform.from_matrix(np.array(values))


def save_transform(T: RigidTransform, path: str | Path) -> None:
    Path(path).write_text(transform_to_text(T), encoding="utf-8")


def load_transform(path: str | Path) -> RigidTransform:
    return transform_from_text(Path(path).read_text(encoding="utf-8"))
