"""Rigid-body poses, rotations, and endpoint-aligning similarity transforms.

Internal units are meters and radians everywhere. Millimeters and degrees
appear only at text/serialization boundaries (see :func:`pose_text`), so
there is exactly one conversion point in the package.

Euler angles use the intrinsic X-Y-Z (roll-pitch-yaw) convention,
in degrees, at every serialization boundary.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation as _SR

EULER_SEQ = "XYZ"  # intrinsic X-Y-Z

_ORTHO_TOL = 1e-9


class Rotation:
    """A proper rotation in SO(3), stored as a 3x3 matrix.

    Construct via the classmethods; the raw constructor trusts its input
    unless ``check=True``.
    """

    __slots__ = ("_m",)

    def __init__(self, matrix: np.ndarray, *, check: bool = False):
        m = np.asarray(matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError(f"rotation matrix must be 3x3, got {m.shape}")
        if check:
            if abs(np.linalg.det(m) - 1.0) > _ORTHO_TOL:
                raise ValueError("matrix determinant is not +1")
            if not np.allclose(m @ m.T, np.eye(3), atol=_ORTHO_TOL):
                raise ValueError("matrix is not orthonormal")
        self._m = m

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "Rotation":
        """Build from a 3x3 matrix, validating orthonormality and det=+1."""
        return cls(matrix, check=True)

    @classmethod
    def from_euler_deg(cls, roll: float, pitch: float, yaw: float) -> "Rotation":
        """Intrinsic X-Y-Z Euler angles in degrees -> rotation.

        Equals the matrix product Rx(roll) @ Ry(pitch) @ Rz(yaw).
        """
        angles = np.asarray([roll, pitch, yaw], dtype=float)
        if not np.all(np.isfinite(angles)):
            raise ValueError("euler angles must be finite")
        return cls(_SR.from_euler(EULER_SEQ, angles, degrees=True).as_matrix())

    @classmethod
    def about_z_deg(cls, yaw: float) -> "Rotation":
        return cls.from_euler_deg(0.0, 0.0, yaw)

    @classmethod
    def from_rotvec(cls, rotvec: np.ndarray) -> "Rotation":
        return cls(_SR.from_rotvec(np.asarray(rotvec, dtype=float)).as_matrix())

    def euler_deg(self) -> np.ndarray:
        """Intrinsic X-Y-Z Euler angles in degrees.

        At gimbal lock (pitch within numerical reach of +/-90 deg) the triple
        is not unique; the canonical representative with a zero third angle is
        returned. It still reconstructs the same rotation matrix.
        """
        with warnings.catch_warnings():
            warnings.filterwarnings("ignore", message="Gimbal lock")
            return _SR.from_matrix(self._m).as_euler(EULER_SEQ, degrees=True)

    def as_matrix(self) -> np.ndarray:
        return self._m.copy()

    def rotvec(self) -> np.ndarray:
        return _SR.from_matrix(self._m).as_rotvec()

    def inverse(self) -> "Rotation":
        return Rotation(self._m.T)

    def __matmul__(self, other: "Rotation") -> "Rotation":
        if not isinstance(other, Rotation):
            return NotImplemented
        return Rotation(self._m @ other._m)

    def apply(self, v: np.ndarray) -> np.ndarray:
        """Rotate a 3-vector (or array of 3-vectors, last axis 3)."""
        return np.asarray(v, dtype=float) @ self._m.T

    def power(self, fraction: float) -> "Rotation":
        """Fractional rotation exp(fraction * log R); power(0) is identity."""
        if fraction == 0.0:
            return Rotation.identity()
        return Rotation((_SR.from_matrix(self._m) ** float(fraction)).as_matrix())

    def angle_rad(self) -> float:
        """Total rotation angle in [0, pi]."""
        c = np.clip((np.trace(self._m) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.arccos(c))

    def angle_to(self, other: "Rotation") -> float:
        return (self.inverse() @ other).angle_rad()

    def allclose(self, other: "Rotation", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self._m, other._m, atol=atol))

    def __repr__(self) -> str:
        e = self.euler_deg()
        return f"Rotation(euler_deg=[{e[0]:.3f}, {e[1]:.3f}, {e[2]:.3f}])"


def slerp(r0: Rotation, r1: Rotation, fraction: float) -> Rotation:
    """Constant-angular-velocity interpolation from r0 (fraction 0) to r1 (1)."""
    return r0 @ (r0.inverse() @ r1).power(fraction)


def relative_rotation_from_home(r: Rotation, home: Rotation) -> Rotation:
    """Rotation of ``r`` relative to the home rotation: home^-1 @ r.

    This is the form the end-effector rotation takes in every prompt; with
    r == home it is the identity, i.e. Euler (0, 0, 0).
    """
    return home.inverse() @ r


@dataclass
class Pose:
    """Position (meters) plus rotation of a rigid body or end-effector."""

    position: np.ndarray
    rotation: Rotation = field(default_factory=Rotation.identity)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(self.position)):
            raise ValueError("pose position must be finite")

    def copy(self) -> "Pose":
        return Pose(self.position.copy(), Rotation(self.rotation.as_matrix()))

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.position, other.position, atol=atol)) and self.rotation.allclose(
            other.rotation, atol=atol
        )


@dataclass
class RigidTransform:
    """Similarity transform p -> scale * R p + t.

    scale == 1.0 is a true rigid transform; compute_warp in the warping
    module returns scale != 1 only when the two chords it aligns have
    different lengths.
    """

    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        self.scale = float(self.scale)
        if not self.scale > 0.0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_translation(cls, t: np.ndarray) -> "RigidTransform":
        return cls(Rotation.identity(), np.asarray(t, dtype=float))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform applying ``other`` first, then ``self``."""
        return RigidTransform(
            rotation=self.rotation @ other.rotation,
            translation=self.scale * self.rotation.apply(other.translation) + self.translation,
            scale=self.scale * other.scale,
        )

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        inv_rot = self.rotation.inverse()
        return RigidTransform(
            rotation=inv_rot,
            translation=-inv_rot.apply(self.translation) / self.scale,
            scale=1.0 / self.scale,
        )

    def transform_point(self, p: np.ndarray) -> np.ndarray:
        return self.scale * self.rotation.apply(p) + self.translation

    def transform_pose(self, pose: Pose) -> Pose:
        return Pose(self.transform_point(pose.position), self.rotation @ pose.rotation)


def pose_text(pose: Pose, home: Rotation | None = None) -> str:
    """Render a pose as millimeters (3 decimals) / Euler degrees (2 decimals).

    If ``home`` is given, the rotation is reported relative to it. This is
    the single formatting used by all prompts and human-facing text.
    """
    rot = pose.rotation if home is None else relative_rotation_from_home(pose.rotation, home)
    # round first, then add 0.0 so values like -1e-15 print as 0.000 not -0.000
    mm = np.round(pose.position * 1000.0, 3) + 0.0
    e = np.round(rot.euler_deg(), 2) + 0.0
    return (
        f"position_mm [{mm[0]:.3f}, {mm[1]:.3f}, {mm[2]:.3f}] "
        f"rotation_deg [{e[0]:.2f}, {e[1]:.2f}, {e[2]:.2f}]"
    )
