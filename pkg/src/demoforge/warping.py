"""Endpoint-aligning trajectory warps.

Given a demonstration segment and new start/end poses, find the similarity
transform that maps the old chord (start -> end positions) onto the new one
exactly, using the leftover rotational freedom about the new chord to keep
the warp as upright as possible (maximize z^T R z). Rotations are not pushed
through that transform; they are re-aimed separately by interpolating the
delta rotation between the segment endpoints.

Uniform scale = |new chord| / |old chord| makes both endpoint constraints
exactly satisfiable; it reduces to a rigid transform when the chords have
equal length.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .demos import Demonstration
from .geometry import Pose, RigidTransform, Rotation, slerp

EPS_CHORD = 1e-6  # meters; chords shorter than this have no usable direction

_Z = np.array([0.0, 0.0, 1.0])


class DegenerateChord(ValueError):
    """Old chord collapsed to a point while the new one did not."""


class KeyposeMismatch(ValueError):
    """Old/new keypose lists disagree in length, order, or timesteps."""


@dataclass
class TrajectorySegment:
    """Aligned lists of poses and gripper commands; length >= 2."""

    poses: list[Pose]
    gripper: list[float]

    def __post_init__(self):
        if len(self.poses) < 2:
            raise ValueError("segment needs at least 2 poses")
        if len(self.gripper) != len(self.poses):
            raise ValueError("gripper list must align 1:1 with poses")

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.stack([p.position for p in self.poses])


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _minimal_rotation_between(u_from: np.ndarray, u_to: np.ndarray) -> Rotation:
    """Smallest-angle rotation taking unit vector u_from onto u_to."""
    cross = np.cross(u_from, u_to)
    s = np.linalg.norm(cross)
    d = float(u_from @ u_to)
    if s < 1e-12:
        if d > 0.0:
            return Rotation.identity()
        # antiparallel: half-turn about a deterministic orthogonal axis
        axis = np.cross(u_from, [1.0, 0.0, 0.0])
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(u_from, [0.0, 1.0, 0.0])
        axis = axis / np.linalg.norm(axis)
        return Rotation.from_rotvec(np.pi * axis)
    return Rotation.from_rotvec(np.arctan2(s, d) * (cross / s))


def _z_optimal_chord_rotation(u_old: np.ndarray, u_new: np.ndarray) -> Rotation:
    """Rotation mapping u_old -> u_new that maximizes z^T R z.

    Every solution has the form Rot(u_new, phi) @ R_align. The objective is
    a*cos(phi) + b*sin(phi) + const, maximized in closed form at
    phi = atan2(b, a). When the objective is flat (new chord parallel to z),
    the tie-break picks the phi minimizing the total rotation angle of R.
    """
    r_align = _minimal_rotation_between(u_old, u_new)
    n = u_new
    w = r_align.apply(_Z)
    a = float(w[2] - n[2] * (n @ w))
    b = float(np.cross(n, w)[2])  # z . (n x w)
    if np.hypot(a, b) > 1e-12:
        phi = np.arctan2(b, a)
    else:
        # flat objective: minimize rotation angle <=> maximize trace
        m = r_align.as_matrix()
        a2 = float(np.trace(m) - n @ m @ n)
        b2 = float(np.trace(_skew(n) @ m))
        phi = np.arctan2(b2, a2) if np.hypot(a2, b2) > 1e-12 else 0.0
    return Rotation.from_rotvec(phi * n) @ r_align


def compute_warp(old_start: Pose, old_end: Pose, new_start: Pose, new_end: Pose) -> RigidTransform:
    """Similarity transform mapping old start/end positions onto new ones.

    Both endpoint constraints hold by construction. Among all solutions the
    rotation maximizes z^T R z. Raises DegenerateChord when the old chord is
    a point but the new one is not (no consistent direction to stretch).
    """
    c_old = old_end.position - old_start.position
    c_new = new_end.position - new_start.position
    len_old = float(np.linalg.norm(c_old))
    len_new = float(np.linalg.norm(c_new))

    if len_old <= EPS_CHORD:
        if len_new > EPS_CHORD:
            raise DegenerateChord(
                f"old chord {len_old:.2e} m is a point but new chord is {len_new:.2e} m"
            )
        # both chords collapse: only the start constraint is informative
        return RigidTransform(Rotation.identity(), new_start.position - old_start.position, 1.0)

    if len_new == 0.0:
        # target collapses to a point: scale floored to stay positive, end
        # constraint still met far within tolerance
        rot, scale = Rotation.identity(), 1e-12
    else:
        rot = _z_optimal_chord_rotation(c_old / len_old, c_new / len_new)
        scale = len_new / len_old

    translation = new_start.position - scale * rot.apply(old_start.position)
    return RigidTransform(rot, translation, scale)


def warp_positions(seg: TrajectorySegment, tf: RigidTransform) -> TrajectorySegment:
    """Map every position through tf; rotations and gripper are untouched."""
    poses = [Pose(tf.transform_point(p.position), p.rotation) for p in seg.poses]
    return TrajectorySegment(poses, list(seg.gripper))


def warp_rotations(seg: TrajectorySegment, new_start_rot: Rotation, new_end_rot: Rotation) -> TrajectorySegment:
    """Re-aim rotations so the segment ends at the requested orientations.

    delta_0 = new_start_rot @ R_0^-1 and delta_T = new_end_rot @ R_T^-1 are
    the corrections needed at the endpoints; in between, the correction is
    slerped with parameter t / T_seg and left-applied to the demo rotation.
    """
    n = len(seg)
    delta_0 = new_start_rot @ seg.poses[0].rotation.inverse()
    delta_t = new_end_rot @ seg.poses[-1].rotation.inverse()
    poses = []
    for t, p in enumerate(seg.poses):
        delta = slerp(delta_0, delta_t, t / (n - 1))
        poses.append(Pose(p.position.copy(), delta @ p.rotation))
    return TrajectorySegment(poses, list(seg.gripper))


def _validate_keyposes(
    demo: Demonstration,
    old_keyposes: list[tuple[int, Pose]],
    new_keyposes: list[tuple[int, Pose]],
) -> list[int]:
    if len(old_keyposes) != len(new_keyposes):
        raise KeyposeMismatch(f"{len(old_keyposes)} old vs {len(new_keyposes)} new keyposes")
    if len(old_keyposes) < 2:
        raise KeyposeMismatch("need at least 2 keyposes (start and end)")
    ts_old = [t for t, _ in old_keyposes]
    ts_new = [t for t, _ in new_keyposes]
    if ts_old != ts_new:
        raise KeyposeMismatch(f"old timesteps {ts_old} != new timesteps {ts_new}")
    if any(b <= a for a, b in zip(ts_old, ts_old[1:])):
        raise KeyposeMismatch(f"timesteps not strictly increasing: {ts_old}")
    if ts_old[0] != 0 or ts_old[-1] != demo.horizon:
        raise KeyposeMismatch(
            f"keyposes must span the demo: got [{ts_old[0]}, {ts_old[-1]}], want [0, {demo.horizon}]"
        )
    return ts_old


def warp_trajectory_by_keyposes(
    demo: Demonstration,
    old_keyposes: list[tuple[int, Pose]],
    new_keyposes: list[tuple[int, Pose]],
) -> TrajectorySegment:
    """Warp a full demo piecewise through a retargeted keypose list.

    Each span between consecutive keyposes is warped independently with its
    own endpoint-aligning transform, then boundary poses are snapped to the
    new keypose values so adjacent spans agree bitwise at shared timesteps.
    """
    timesteps = _validate_keyposes(demo, old_keyposes, new_keyposes)

    out_poses: list[Pose] = []
    out_gripper: list[float] = []
    for i in range(len(timesteps) - 1):
        t0, t1 = timesteps[i], timesteps[i + 1]
        sub = TrajectorySegment(
            [demo.action(t).pose.copy() for t in range(t0, t1 + 1)],
            [demo.action(t).gripper for t in range(t0, t1 + 1)],
        )
        tf = compute_warp(old_keyposes[i][1], old_keyposes[i + 1][1], new_keyposes[i][1], new_keyposes[i + 1][1])
        warped = warp_positions(sub, tf)
        warped = warp_rotations(warped, new_keyposes[i][1].rotation, new_keyposes[i + 1][1].rotation)
        # snap boundaries to the exact keypose values for bitwise continuity
        warped.poses[0] = new_keyposes[i][1].copy()
        warped.poses[-1] = new_keyposes[i + 1][1].copy()
        start = 1 if out_poses else 0  # shared boundary already emitted
        out_poses.extend(warped.poses[start:])
        out_gripper.extend(warped.gripper[start:])
    return TrajectorySegment(out_poses, out_gripper)
