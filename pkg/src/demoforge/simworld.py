"""Kinematic desk-scale manipulation world.

No dynamics, no collision: the end-effector moves toward goal poses under
per-step caps, a closing gripper within grasp tolerance attaches the nearest
object rigidly, opening drops it to rest. That is deliberately minimal - the
interesting logic being exercised lives in warping, annotation reuse, and
the bandit, and a kinematic world keeps every trace bit-deterministic.

Bundled tasks:
  pick_place     one block into a goal region
  stack          blue then green onto one goal spot (order in task metadata)
  stack_flipped  stack, but the goal order flips for half the seeds
  stack_walking  stack, but blocks random-walk 0.4 mm/step until first grasp
  drawer_mug     open a prismatic drawer, put the mug in, close it

The scripted controller is stateless over world state, so it doubles as the
demo solver and as the recovering feedback policy for ensembles.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .demos import Action, Demonstration, GRIPPER_CLOSED, GRIPPER_OPEN, Observation, ObjectObservation
from .geometry import Pose, RigidTransform, Rotation
from .retargeting import SceneObservation
from .warping import TrajectorySegment

BUNDLED_TASKS = ("pick_place", "stack", "stack_flipped", "stack_walking", "drawer_mug")

BLOCK_SIZE = 0.04
BLOCK_HALF = BLOCK_SIZE / 2.0
MUG_HALF = 0.03
HOME_POSE = Pose(np.array([0.0, 0.0, 0.25]), Rotation.identity())

DRAWER_TRAVEL = 0.12
DRAWER_INTERIOR_DX = 0.10  # interior center sits this far behind the handle


class ObjectAttached(ValueError):
    """Disturbances may not touch an object while the gripper holds it."""


@dataclass
class TaskSpec:
    kind: str
    region_extents: tuple[float, float] = (0.20, 0.30)  # randomization area, x by y
    yaw_range_deg: float = 45.0
    position_tolerance: float = 0.02
    stack_height: float = BLOCK_SIZE
    grasp_tolerance: float = 0.01
    max_step: float = 0.02
    max_angular_step: float = 0.1
    walk_step: float = 4e-4
    convergence_cap: int = 50

    def __post_init__(self):
        if self.kind not in BUNDLED_TASKS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.position_tolerance <= 0 or self.grasp_tolerance <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class Region:
    center: np.ndarray
    extents: tuple[float, float]
    color: str

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)


@dataclass
class WorldState:
    spec: TaskSpec
    robot_pose: Pose
    gripper: float
    objects: dict[str, Pose]
    goal_regions: dict[str, Region]
    rng: np.random.Generator
    attached_object: str | None = None
    attach_offset: RigidTransform | None = None
    frozen: set[str] = field(default_factory=set)
    task_metadata: dict = field(default_factory=dict)
    t: int = 0

    def copy(self) -> "WorldState":
        return WorldState(
            spec=self.spec,
            robot_pose=self.robot_pose.copy(),
            gripper=self.gripper,
            objects={k: v.copy() for k, v in self.objects.items()},
            goal_regions={k: Region(r.center.copy(), r.extents, r.color) for k, r in self.goal_regions.items()},
            rng=self._copy_rng(),
            attached_object=self.attached_object,
            attach_offset=self.attach_offset,
            frozen=set(self.frozen),
            task_metadata=dict(self.task_metadata),
            t=self.t,
        )

    def _copy_rng(self) -> np.random.Generator:
        g = np.random.default_rng()
        g.bit_generator.state = self.rng.bit_generator.state
        return g


def _sample_in_region(rng, extents) -> np.ndarray:
    x = rng.uniform(-extents[0] / 2.0, extents[0] / 2.0)
    y = rng.uniform(-extents[1] / 2.0, extents[1] / 2.0)
    return np.array([x, y, 0.0])


def reset(spec: TaskSpec, seed) -> tuple[WorldState, SceneObservation]:
    """Deterministic scene randomization: same seed, same state, always."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xD35C]))
    objects: dict[str, Pose] = {}
    regions: dict[str, Region] = {}
    metadata: dict = {}

    def block_pose():
        pos = _sample_in_region(rng, spec.region_extents) + np.array([0.0, 0.0, BLOCK_HALF])
        yaw = rng.uniform(-spec.yaw_range_deg, spec.yaw_range_deg)
        return Pose(pos, Rotation.about_z_deg(yaw))

    if spec.kind == "pick_place":
        objects["block"] = block_pose()
        center = _sample_in_region(rng, spec.region_extents) + np.array([0.0, 0.0, BLOCK_HALF])
        while np.linalg.norm(center[:2] - objects["block"].position[:2]) < 0.06:
            center = _sample_in_region(rng, spec.region_extents) + np.array([0.0, 0.0, BLOCK_HALF])
        regions["target_region"] = Region(center, (0.04, 0.04), "target")
    elif spec.kind in ("stack", "stack_flipped", "stack_walking"):
        objects["blue_block"] = block_pose()
        objects["green_block"] = block_pose()
        while np.linalg.norm(objects["green_block"].position[:2] - objects["blue_block"].position[:2]) < 0.06:
            objects["green_block"] = block_pose()
        center = _sample_in_region(rng, spec.region_extents) + np.array([0.0, 0.0, BLOCK_HALF])
        while min(
            np.linalg.norm(center[:2] - objects[n].position[:2]) for n in ("blue_block", "green_block")
        ) < 0.06:
            center = _sample_in_region(rng, spec.region_extents) + np.array([0.0, 0.0, BLOCK_HALF])
        order = ["blue_block", "green_block"]
        if spec.kind == "stack_flipped" and rng.random() < 0.5:
            order = order[::-1]
        color = ",".join(order)
        regions["goal_region"] = Region(center, (0.05, 0.05), color)
        metadata["goal_colors"] = {"goal_region": color}
    elif spec.kind == "drawer_mug":
        handle = np.array([0.20, rng.uniform(-0.10, 0.10), 0.05])
        objects["drawer"] = Pose(handle, Rotation.identity())
        metadata["drawer_closed_x"] = float(handle[0])
        metadata["drawer_travel"] = DRAWER_TRAVEL
        mug = _sample_in_region(rng, (0.12, 0.20)) + np.array([-0.08, 0.0, MUG_HALF])
        objects["mug"] = Pose(mug, Rotation.about_z_deg(rng.uniform(-spec.yaw_range_deg, spec.yaw_range_deg)))

    state = WorldState(
        spec=spec,
        robot_pose=HOME_POSE.copy(),
        gripper=GRIPPER_OPEN,
        objects=objects,
        goal_regions=regions,
        rng=rng,
        task_metadata=metadata,
    )
    return state, scene_observation(state)


def scene_observation(state: WorldState) -> SceneObservation:
    """Retargeting-facing view: regions first (they win nearest-entity ties),
    then movable objects."""
    objs: dict[str, Pose] = {}
    for rid, region in state.goal_regions.items():
        objs[rid] = Pose(region.center.copy(), Rotation.identity())
    for name in state.objects:
        objs[name] = state.objects[name].copy()
    return SceneObservation(
        robot_pose=state.robot_pose.copy(),
        objects=objs,
        task_metadata=dict(state.task_metadata),
    )


def observation(state: WorldState) -> Observation:
    """Per-timestep view recorded into demonstrations."""
    entities = [
        ObjectObservation(rid, Pose(r.center.copy(), Rotation.identity()), r.color)
        for rid, r in state.goal_regions.items()
    ]
    entities += [ObjectObservation(name, state.objects[name].copy(), None) for name in state.objects]
    return Observation(state.robot_pose.copy(), state.gripper, entities)


def _step_pose_toward(current: Pose, goal: Pose, max_step: float, max_angular: float) -> Pose:
    delta = goal.position - current.position
    dist = float(np.linalg.norm(delta))
    new_pos = goal.position.copy() if dist <= max_step else current.position + delta * (max_step / dist)
    rel = current.rotation.inverse() @ goal.rotation
    angle = rel.angle_rad()
    if angle <= max_angular:
        new_rot = Rotation(goal.rotation.as_matrix())
    else:
        new_rot = current.rotation @ rel.power(max_angular / angle)
    return Pose(new_pos, new_rot)


def _rest_z(state: WorldState, name: str, xy: np.ndarray) -> float:
    """Resting height at xy: ground, or on top of a block underneath."""
    half = MUG_HALF if name == "mug" else BLOCK_HALF
    top = half
    for other, pose in state.objects.items():
        if other == name or other in ("drawer",):
            continue
        if other == state.attached_object:
            continue
        if np.linalg.norm(pose.position[:2] - xy) < 0.03:
            other_half = MUG_HALF if other == "mug" else BLOCK_HALF
            top = max(top, pose.position[2] + other_half + half)
    return top


def _drawer_opening(state: WorldState) -> float:
    return float(state.task_metadata["drawer_closed_x"] - state.objects["drawer"].position[0])


def _drawer_interior_center(state: WorldState) -> np.ndarray:
    d = state.objects["drawer"].position
    return np.array([d[0] + DRAWER_INTERIOR_DX, d[1], MUG_HALF])


def _mug_in_drawer(state: WorldState) -> bool:
    rel = state.objects["mug"].position - _drawer_interior_center(state)
    return bool(abs(rel[0]) < 0.04 and abs(rel[1]) < 0.04)


def step(state: WorldState, action: Action) -> WorldState:
    """Advance one timestep. Mutates and returns ``state``.

    Order: end-effector moves (capped), any attached object follows, then
    the gripper command is applied (close may attach, open detaches), then
    walking objects drift. Attachment is re-evaluated whenever the command
    is "close" and nothing is held, so a closed gripper passing within grasp
    tolerance does grab - there is no collision model to say otherwise.
    """
    spec = state.spec
    if not (np.all(np.isfinite(action.pose.position)) and np.isfinite(action.gripper)):
        raise ValueError("action must be finite")

    state.robot_pose = _step_pose_toward(state.robot_pose, action.pose, spec.max_step, spec.max_angular_step)

    if state.attached_object is not None:
        name = state.attached_object
        if name == "drawer":
            closed_x = state.task_metadata["drawer_closed_x"]
            raw_x = state.robot_pose.position[0] - state.attach_offset.translation[0]
            new_x = float(np.clip(raw_x, closed_x - state.task_metadata["drawer_travel"], closed_x))
            old = state.objects["drawer"]
            dx = new_x - old.position[0]
            state.objects["drawer"] = Pose(old.position + np.array([dx, 0.0, 0.0]), old.rotation)
            if not _mug_is_held(state) and _mug_in_drawer_xy_before(state, dx):
                mug = state.objects["mug"]
                state.objects["mug"] = Pose(mug.position + np.array([dx, 0.0, 0.0]), mug.rotation)
        else:
            ee = RigidTransform(state.robot_pose.rotation, state.robot_pose.position)
            state.objects[name] = ee.compose(state.attach_offset).transform_pose(Pose(np.zeros(3)))

    closing = action.gripper < 0.5
    if closing and state.attached_object is None:
        name = _grabbable_object(state)
        if name is not None:
            state.frozen.add(name)
            ee = RigidTransform(state.robot_pose.rotation, state.robot_pose.position)
            obj = state.objects[name]
            state.attach_offset = ee.inverse().compose(RigidTransform(obj.rotation, obj.position))
            state.attached_object = name
    elif not closing and state.attached_object is not None:
        name = state.attached_object
        state.attached_object = None
        state.attach_offset = None
        if name != "drawer":
            pose = state.objects[name]
            rest = pose.position.copy()
            rest[2] = _rest_z(state, name, pose.position[:2])
            state.objects[name] = Pose(rest, pose.rotation)
    state.gripper = action.gripper

    if spec.kind == "stack_walking":
        for name in sorted(state.objects):
            if name in state.frozen or name == state.attached_object:
                continue
            theta = state.rng.uniform(0.0, 2.0 * np.pi)
            drift = spec.walk_step * np.array([np.cos(theta), np.sin(theta), 0.0])
            pose = state.objects[name]
            state.objects[name] = Pose(pose.position + drift, pose.rotation)

    state.t += 1
    return state


def _mug_is_held(state: WorldState) -> bool:
    return state.attached_object == "mug"


def _mug_in_drawer_xy_before(state: WorldState, pending_dx: float) -> bool:
    # containment judged against the drawer pose before this step's slide
    interior = _drawer_interior_center(state)
    interior[0] -= pending_dx
    rel = state.objects["mug"].position - interior
    return bool(abs(rel[0]) < 0.04 and abs(rel[1]) < 0.04)


def _grabbable_object(state: WorldState) -> str | None:
    best, best_d = None, state.spec.grasp_tolerance
    for name in sorted(state.objects):
        d = float(np.linalg.norm(state.objects[name].position - state.robot_pose.position))
        if d < best_d:
            best, best_d = name, d
    return best


def inject_disturbance(state: WorldState, object_id: str, delta) -> WorldState:
    if object_id not in state.objects:
        raise KeyError(f"no object {object_id!r}")
    if state.attached_object == object_id:
        raise ObjectAttached(f"{object_id!r} is held by the gripper")
    pose = state.objects[object_id]
    state.objects[object_id] = Pose(pose.position + np.asarray(delta, dtype=float), pose.rotation)
    return state


def success(state: WorldState) -> bool:
    """Pure predicate on the world state."""
    spec = state.spec
    tol = spec.position_tolerance
    if spec.kind == "pick_place":
        if state.attached_object is not None or state.gripper < 0.5:
            return False
        block = state.objects["block"].position
        return bool(np.linalg.norm(block - state.goal_regions["target_region"].center) <= tol)
    if spec.kind in ("stack", "stack_flipped", "stack_walking"):
        if state.attached_object is not None or state.gripper < 0.5:
            return False
        order = state.goal_regions["goal_region"].color.split(",")
        base = state.goal_regions["goal_region"].center
        bottom = state.objects[order[0]].position
        top = state.objects[order[1]].position
        return bool(
            np.linalg.norm(bottom - base) <= tol
            and np.linalg.norm(top - (base + np.array([0.0, 0.0, spec.stack_height]))) <= tol
        )
    if spec.kind == "drawer_mug":
        return drawer_mug_stage(state) == 4
    raise ValueError(spec.kind)


def drawer_mug_stage(state: WorldState) -> int:
    """How far the drawer task has progressed in the current state:
    1 drawer opened, 2 mug held, 3 mug inside (drawer open), 4 closed with
    the mug inside and the gripper free."""
    opening = _drawer_opening(state)
    open_enough = opening >= 0.8 * state.task_metadata["drawer_travel"]
    closed = opening <= 0.02
    inside = _mug_in_drawer(state)
    if inside and closed and state.attached_object is None and state.gripper >= 0.5:
        return 4
    if inside and state.attached_object is None:
        return 3
    if _mug_is_held(state):
        return 2
    if open_enough:
        return 1
    return 0


@dataclass
class RolloutOutcome:
    success: bool
    steps: int
    final_state: WorldState
    trace: list[tuple[Observation, Action]]


def rollout(
    state: WorldState,
    traj: TrajectorySegment,
    disturbances: list[tuple[int, str, np.ndarray]] | None = None,
) -> RolloutOutcome:
    """Execute a trajectory point-by-point as goal actions.

    Each point gets one env step, then up to convergence_cap extra steps of
    the same action until the end-effector lands on it. ``disturbances`` is
    a list of (point_index, object_id, delta) applied just before that
    point executes. The executed (observation, action) pairs are returned
    as a trace suitable for building a dataset demonstration.
    """
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    state = state.copy()
    by_point: dict[int, list[tuple[str, np.ndarray]]] = {}
    for idx, obj, delta in disturbances or []:
        by_point.setdefault(idx, []).append((obj, delta))

    trace: list[tuple[Observation, Action]] = []
    for i in range(len(traj)):
        for obj, delta in by_point.get(i, []):
            inject_disturbance(state, obj, delta)
        action = Action(traj.poses[i].copy(), traj.gripper[i])
        trace.append((observation(state), action.copy()))
        step(state, action)
        extra = 0
        while extra < state.spec.convergence_cap and not _converged(state.robot_pose, action.pose):
            trace.append((observation(state), action.copy()))
            step(state, action)
            extra += 1
    return RolloutOutcome(success=success(state), steps=len(trace), final_state=state, trace=trace)


# angular tolerance sits above arccos round-off for bitwise-equal matrices
def _converged(current: Pose, goal: Pose, pos_tol: float = 1e-9, ang_tol: float = 1e-7) -> bool:
    return (
        float(np.linalg.norm(current.position - goal.position)) <= pos_tol
        and current.rotation.angle_to(goal.rotation) <= ang_tol
    )


# ---------------------------------------------------------------------------
# Scripted controller: stateless over world state, so it recovers from any
# disturbance and doubles as both the demo solver and the feedback policy.

APPROACH_HEIGHT = 0.10
CARRY_HEIGHT = 0.15
# Stride sits well below the env cap so every commanded pose is reached in
# one env step, and small enough that recorded demos are dense (hundreds of
# steps, like real teleop traces) rather than a handful of waypoint hops.
POLICY_STEP = 0.004
POLICY_ANGULAR_STEP = 0.09


class ScriptedPolicy:
    """Closed-loop solver for the bundled tasks.

    ``action(state)`` looks at the current state only; no internal memory.
    Returns None when the task is done and the arm is back at home hover.
    """

    def __init__(self, spec: TaskSpec):
        self.spec = spec

    def action(self, state: WorldState) -> Action | None:
        goal = self._goal(state)
        if goal is None:
            return None
        goal_pose, grip = goal
        inter = _step_pose_toward(state.robot_pose, goal_pose, POLICY_STEP, POLICY_ANGULAR_STEP)
        return Action(inter, grip)

    # -- task trees ---------------------------------------------------------

    def _goal(self, state: WorldState) -> tuple[Pose, float] | None:
        kind = self.spec.kind
        if kind == "pick_place":
            return self._pick_place(state)
        if kind in ("stack", "stack_flipped", "stack_walking"):
            return self._stack(state)
        if kind == "drawer_mug":
            return self._drawer_mug(state)
        raise ValueError(kind)

    def _home_or_done(self, state: WorldState) -> tuple[Pose, float] | None:
        if _converged(state.robot_pose, HOME_POSE, 1e-9, 1e-9) and state.gripper >= 0.5:
            return None
        return HOME_POSE, GRIPPER_OPEN

    def _pick_place(self, state: WorldState):
        target = state.goal_regions["target_region"].center
        if success(state):
            return self._home_or_done(state)
        if state.attached_object == "block":
            return self._carry_to(state, np.array([target[0], target[1], BLOCK_HALF + 0.001]))
        return self._fetch(state, "block")

    def _stack(self, state: WorldState):
        if success(state):
            return self._home_or_done(state)
        order = state.goal_regions["goal_region"].color.split(",")
        base = state.goal_regions["goal_region"].center
        targets = {
            order[0]: np.array([base[0], base[1], BLOCK_HALF + 0.001]),
            order[1]: np.array([base[0], base[1], BLOCK_HALF + self.spec.stack_height + 0.001]),
        }
        if state.attached_object in targets:
            return self._carry_to(state, targets[state.attached_object])
        for name in order:
            placed = np.linalg.norm(
                state.objects[name].position - (targets[name] - np.array([0.0, 0.0, 0.001]))
            ) <= self.spec.position_tolerance / 2.0
            if not placed:
                return self._fetch(state, name)
        return self._home_or_done(state)

    def _drawer_mug(self, state: WorldState):
        meta = state.task_metadata
        opening = _drawer_opening(state)
        handle = state.objects["drawer"].position
        if drawer_mug_stage(state) == 4:
            return self._home_or_done(state)
        if _mug_in_drawer(state) and state.attached_object is None:
            # close the drawer: grab the handle and push it back in
            if state.attached_object != "drawer":
                if opening <= 0.02:
                    return self._home_or_done(state)
                grabbed = self._fetch(state, "drawer", grasp_only=True)
                if grabbed is not None:
                    return grabbed
            return Pose(np.array([meta["drawer_closed_x"], handle[1], handle[2]])), GRIPPER_CLOSED
        if state.attached_object == "drawer":
            if _mug_in_drawer(state):
                target_x = meta["drawer_closed_x"]
            else:
                target_x = meta["drawer_closed_x"] - meta["drawer_travel"]
            if abs(handle[0] - target_x) < 1e-6:
                return Pose(state.robot_pose.position.copy(), state.robot_pose.rotation), GRIPPER_OPEN
            return Pose(np.array([target_x, handle[1], handle[2]])), GRIPPER_CLOSED
        if _mug_is_held(state):
            interior = _drawer_interior_center(state)
            return self._carry_to(state, np.array([interior[0], interior[1], MUG_HALF + 0.001]))
        if opening < 0.8 * meta["drawer_travel"]:
            return self._fetch(state, "drawer", grasp_only=True) or (
                Pose(np.array([meta["drawer_closed_x"] - meta["drawer_travel"], handle[1], handle[2]])),
                GRIPPER_CLOSED,
            )
        return self._fetch(state, "mug")

    # -- shared motion primitives -------------------------------------------

    def _fetch(self, state: WorldState, name: str, grasp_only: bool = False):
        """Approach above, descend, close. Returns None (grasp_only) once held."""
        if state.attached_object == name:
            return None if grasp_only else self._carry_to(state, state.objects[name].position)
        obj = state.objects[name]
        yaw = np.degrees(np.arctan2(obj.rotation.as_matrix()[1, 0], obj.rotation.as_matrix()[0, 0]))
        rot = Rotation.about_z_deg(float(yaw)) if name != "drawer" else Rotation.identity()
        above = Pose(np.array([obj.position[0], obj.position[1], obj.position[2] + APPROACH_HEIGHT]), rot)
        grasp = Pose(obj.position.copy(), rot)
        d_xy = float(np.linalg.norm(state.robot_pose.position[:2] - obj.position[:2]))
        d = float(np.linalg.norm(state.robot_pose.position - obj.position))
        if d <= 0.008:
            return grasp, GRIPPER_CLOSED
        if d_xy <= 0.003 and state.robot_pose.position[2] <= obj.position[2] + APPROACH_HEIGHT + 1e-6:
            return grasp, GRIPPER_OPEN
        return above, GRIPPER_OPEN

    def _carry_to(self, state: WorldState, place: np.ndarray):
        """Lift, traverse at carry height, descend, release on arrival."""
        ee = state.robot_pose.position
        d_xy = float(np.linalg.norm(ee[:2] - place[:2]))
        if d_xy <= 1e-9 and abs(ee[2] - place[2]) <= 1e-9:
            return Pose(place.copy(), state.robot_pose.rotation), GRIPPER_OPEN
        if d_xy <= 0.003:
            return Pose(place.copy(), state.robot_pose.rotation), GRIPPER_CLOSED
        if ee[2] < CARRY_HEIGHT - 1e-6:
            return Pose(np.array([ee[0], ee[1], CARRY_HEIGHT]), state.robot_pose.rotation), GRIPPER_CLOSED
        return (
            Pose(np.array([place[0], place[1], CARRY_HEIGHT]), state.robot_pose.rotation),
            GRIPPER_CLOSED,
        )


def record_demo(spec: TaskSpec, seed, demo_id: str = "", max_steps: int = 3000) -> Demonstration:
    """Run the scripted controller from a fresh reset, recording every step.

    The recorded (observation, action) pairs form the demonstration that
    the annotation pipeline consumes; replaying the actions from the same
    seed reproduces the run bit for bit.
    """
    state, _ = reset(spec, seed)
    policy = ScriptedPolicy(spec)
    steps: list[tuple[Observation, Action]] = []
    for _ in range(max_steps):
        act = policy.action(state)
        if act is None:
            break
        steps.append((observation(state), act.copy()))
        step(state, act)
    else:
        raise RuntimeError(f"scripted policy did not finish {spec.kind} within {max_steps} steps")
    if not success(state):
        raise RuntimeError(f"scripted policy failed {spec.kind} on seed {seed}")
    return Demonstration(
        task=spec.kind,
        steps=steps,
        demo_id=demo_id or f"{spec.kind}-{seed}",
        seed=int(seed),
        success=True,
    )
