"""Demonstration containers: dense robot trajectories plus scene snapshots.

A demonstration is the unit everything else consumes: the summarizer reads
it, the warper reshapes it, the dataset writer serializes it. Timesteps are
integers 0..T; poses are meters/radians internally.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, Rotation

GRIPPER_OPEN = 1.0
GRIPPER_CLOSED = 0.0


@dataclass
class ObjectObservation:
    """One scene entity as the robot sees it: name, pose, optional color tag."""

    name: str
    pose: Pose
    color: str | None = None

    def copy(self) -> "ObjectObservation":
        return ObjectObservation(self.name, self.pose.copy(), self.color)


@dataclass
class Observation:
    """Robot pose, gripper opening in [0, 1], and every visible object."""

    robot_pose: Pose
    gripper: float
    objects: list[ObjectObservation] = field(default_factory=list)

    def object_named(self, name: str) -> ObjectObservation:
        for obj in self.objects:
            if obj.name == name:
                return obj
        raise KeyError(f"no object named {name!r} in observation")

    def copy(self) -> "Observation":
        return Observation(self.robot_pose.copy(), float(self.gripper), [o.copy() for o in self.objects])


@dataclass
class Action:
    """Goal-pose action: where the end-effector should head, and the gripper."""

    pose: Pose
    gripper: float

    def copy(self) -> "Action":
        return Action(self.pose.copy(), float(self.gripper))


@dataclass
class Demonstration:
    """A dense trajectory: per-timestep observation and commanded action.

    ``steps[t]`` is the (observation, action) pair at integer timestep t.
    The commanded poses (actions) are what gets warped and replayed; the
    observations feed the summarizer.
    """

    task: str
    steps: list[tuple[Observation, Action]]
    demo_id: str = ""
    seed: int | None = None
    success: bool = True
    # where the demo came from: {"kind": "human_scripted"} or
    # {"kind": "generated", "annotation_id": ..., "seed": ...}
    provenance: dict = field(default_factory=lambda: {"kind": "human_scripted"})

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def horizon(self) -> int:
        """Last timestep index T (length - 1)."""
        return len(self.steps) - 1

    def observation(self, t: int) -> Observation:
        return self.steps[t][0]

    def action(self, t: int) -> Action:
        return self.steps[t][1]

    def action_positions(self) -> np.ndarray:
        """(T+1, 3) array of commanded positions."""
        return np.stack([a.pose.position for _, a in self.steps])

    def action_rotations(self) -> list[Rotation]:
        return [a.pose.rotation for _, a in self.steps]

    def grippers(self) -> np.ndarray:
        return np.asarray([a.gripper for _, a in self.steps], dtype=float)

    def gripper_transition_timesteps(self) -> list[int]:
        """Timesteps where the commanded gripper changes from the previous step."""
        g = self.grippers()
        return [t for t in range(1, len(g)) if g[t] != g[t - 1]]
