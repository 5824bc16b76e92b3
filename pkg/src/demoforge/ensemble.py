"""Similarity-gated switching between feedforward replay and a feedback policy.

The feedforward arm executes a warped trajectory verbatim; a feedback policy
runs shadow alongside. Actions are compared as normalized goal-minus-current
deltas under a magnitude-aware cosine similarity: prolonged disagreement
hands control to feedback, and control returns by reattaching to the most
action-compatible future trajectory point. A cooldown keeps the mode from
thrashing.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation as _SR

from .demos import Action
from .geometry import Pose
from .warping import TrajectorySegment

TAU_SWITCH = 0.5
TAU_REATTACH = 0.5
STREAK_WINDOW = 3
COOLDOWN = 5

ACTION_DIM = 7  # position delta (3) + rotation vector delta (3) + gripper delta (1)


class TrajectoryExhausted(RuntimeError):
    """Feedforward cursor ran off the end of the trajectory."""


@dataclass
class NormalizedAction:
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=float).reshape(-1)
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("normalized action must be finite")


@dataclass
class ActionStats:
    """Per-dimension scales for action deltas, floored so division is safe."""

    scale: np.ndarray

    def __post_init__(self):
        self.scale = np.maximum(np.asarray(self.scale, dtype=float).reshape(-1), 1e-6)

    @classmethod
    def from_trajectory(cls, traj: TrajectorySegment) -> "ActionStats":
        deltas = np.stack(
            [
                action_delta(traj.poses[i], traj.gripper[i], traj.poses[i + 1], traj.gripper[i + 1])
                for i in range(len(traj) - 1)
            ]
        )
        return cls(deltas.std(axis=0))


def action_delta(from_pose: Pose, from_grip: float, to_pose: Pose, to_grip: float) -> np.ndarray:
    """Raw 7-vector between two (pose, gripper) states."""
    dpos = to_pose.position - from_pose.position
    drot = (from_pose.rotation.inverse() @ to_pose.rotation).rotvec()
    return np.concatenate([dpos, drot, [float(to_grip) - float(from_grip)]])


def normalize(raw: np.ndarray, stats: ActionStats) -> NormalizedAction:
    return NormalizedAction(np.asarray(raw, dtype=float) / stats.scale)


def similarity(a: NormalizedAction, b: NormalizedAction) -> float:
    """Magnitude-aware cosine: cosine scaled by L1-norm agreement.

    1 means same direction and same size; the sign is the cosine's. Zero
    vectors fall outside the formula: two idle actions agree perfectly (1),
    an idle action tells nothing about a moving one (0).
    """
    va, vb = a.vector, b.vector
    na1, nb1 = float(np.abs(va).sum()), float(np.abs(vb).sum())
    if na1 == 0.0 and nb1 == 0.0:
        return 1.0
    if na1 == 0.0 or nb1 == 0.0:
        return 0.0
    magnitude = 2.0 * min(na1, nb1) / (na1 + nb1)
    cosine = float(np.dot(va, vb)) / (float(np.linalg.norm(va)) * float(np.linalg.norm(vb)))
    return magnitude * max(-1.0, min(1.0, cosine))


def _similarity_many(vectors: np.ndarray, single: np.ndarray) -> np.ndarray:
    """similarity() between each row of ``vectors`` and one vector."""
    nb1 = float(np.abs(single).sum())
    na1 = np.abs(vectors).sum(axis=1)
    if nb1 == 0.0:
        return np.where(na1 == 0.0, 1.0, 0.0)
    out = np.zeros(len(vectors))  # rows with zero L1 norm score 0 against a mover
    live = na1 > 0.0
    if np.any(live):
        v = vectors[live]
        n1 = na1[live]
        magnitude = 2.0 * np.minimum(n1, nb1) / (n1 + nb1)
        cosine = (v @ single) / (np.linalg.norm(v, axis=1) * float(np.linalg.norm(single)))
        out[live] = magnitude * np.clip(cosine, -1.0, 1.0)
    return out


@dataclass
class _TrajectoryCache:
    """Array views of a trajectory plus its normalized recovery actions.

    The reattach scan runs every feedback step; precomputing these once per
    episode keeps it out of the per-step hot path.
    """

    positions: np.ndarray  # (n, 3)
    matrices: np.ndarray  # (n, 3, 3)
    grippers: np.ndarray  # (n,)
    rec_vectors: np.ndarray  # (n, 7), already divided by the stats scale

    @classmethod
    def build(cls, traj: TrajectorySegment, stats: ActionStats) -> "_TrajectoryCache":
        n = len(traj)
        rec = np.empty((n, ACTION_DIM))
        for t in range(n):
            lo, hi = (t, t + 1) if t + 1 < n else (t - 1, t)
            rec[t] = action_delta(traj.poses[lo], traj.gripper[lo], traj.poses[hi], traj.gripper[hi])
        return cls(
            positions=np.stack([p.position for p in traj.poses]),
            matrices=np.stack([p.rotation.as_matrix() for p in traj.poses]),
            grippers=np.asarray(traj.gripper, dtype=float),
            rec_vectors=rec / stats.scale,
        )

    def reattach_vectors(self, current_pose: Pose, current_gripper: float, start: int, stats: ActionStats) -> np.ndarray:
        dpos = self.positions[start:] - current_pose.position
        rel = np.matmul(current_pose.rotation.as_matrix().T, self.matrices[start:])
        rotvecs = _SR.from_matrix(rel).as_rotvec().reshape(-1, 3)
        dgrip = self.grippers[start:] - float(current_gripper)
        return np.concatenate([dpos, rotvecs, dgrip[:, None]], axis=1) / stats.scale


def select_reattach(
    traj: TrajectorySegment,
    current_pose: Pose,
    current_gripper: float,
    t_now: int,
    a_il: NormalizedAction,
    stats: ActionStats,
    tau: float = TAU_REATTACH,
    cache: _TrajectoryCache | None = None,
) -> int | None:
    """Best future trajectory point to resume feedforward at, if any.

    A candidate t > t_now is feasible when both the reattach action (from
    here to the trajectory pose at t) and the recorded action along the
    trajectory at t agree with the feedback action above tau. Returns the
    feasible t with the highest reattach similarity, earliest on ties.
    """
    start = t_now + 1
    if start >= len(traj):
        return None
    if cache is None:
        cache = _TrajectoryCache.build(traj, stats)
    att = cache.reattach_vectors(current_pose, current_gripper, start, stats)
    if not np.all(np.isfinite(att)):
        raise ValueError("normalized action must be finite")
    att_sims = _similarity_many(att, a_il.vector)
    rec_sims = _similarity_many(cache.rec_vectors[start:], a_il.vector)
    feasible = (att_sims > tau) & (rec_sims > tau)
    if not np.any(feasible):
        return None
    j = int(np.argmax(np.where(feasible, att_sims, -np.inf)))  # first max: earliest tie
    # postcondition: both constraints hold for the returned point
    assert att_sims[j] > tau and rec_sims[j] > tau
    return start + j


@dataclass
class EnsembleState:
    ff_trajectory: TrajectorySegment
    stats: ActionStats
    mode: str = "feedforward"
    ff_cursor: int = 0
    cooldown_remaining: int = 0
    disagreement_streak: int = 0
    step_index: int = 0
    trace: list[dict] = field(default_factory=list)
    cache: _TrajectoryCache | None = None

    @classmethod
    def initial(cls, traj: TrajectorySegment, stats: ActionStats | None = None) -> "EnsembleState":
        stats = stats or ActionStats.from_trajectory(traj)
        return cls(ff_trajectory=traj, stats=stats, cache=_TrajectoryCache.build(traj, stats))

    def switch_steps(self) -> list[int]:
        return [e["step"] for e in self.trace if e["switched"]]


def ensemble_step(
    state: EnsembleState,
    feedback_action: Action,
    current_pose: Pose,
    current_gripper: float,
    tau_switch: float = TAU_SWITCH,
    streak_window: int = STREAK_WINDOW,
    cooldown: int = COOLDOWN,
    tau_reattach: float = TAU_REATTACH,
) -> tuple[Action, EnsembleState]:
    """Advance the switching machine one control step.

    Feedforward executes the cursor's trajectory action while scoring it
    against the feedback action; a sub-threshold streak of length
    streak_window flips to feedback once the cooldown since the last flip
    has elapsed. Feedback executes the feedback action and scans for a
    reattach point, resuming feedforward there. Cursor exhaustion makes
    feedback permanent: the flip label waits out any live cooldown (acting
    as fallback in the meantime) so flips always sit >= cooldown apart.
    """
    traj = state.ff_trajectory
    if state.cooldown_remaining > 0:
        state.cooldown_remaining -= 1
    switched = False
    sim = None

    if state.mode == "feedforward":
        try:
            executed = _trajectory_action(traj, state.ff_cursor)
        except TrajectoryExhausted:
            executed = feedback_action.copy()
            if state.cooldown_remaining == 0:
                state.mode = "feedback"
                state.cooldown_remaining = cooldown
                state.disagreement_streak = 0
                switched = True
        else:
            a_ff = normalize(
                action_delta(current_pose, current_gripper, executed.pose, executed.gripper),
                state.stats,
            )
            a_fb = normalize(
                action_delta(
                    current_pose, current_gripper, feedback_action.pose, feedback_action.gripper
                ),
                state.stats,
            )
            sim = similarity(a_ff, a_fb)
            if sim < tau_switch:
                state.disagreement_streak += 1
            else:
                state.disagreement_streak = 0
            state.ff_cursor += 1
            if state.disagreement_streak >= streak_window and state.cooldown_remaining == 0:
                state.mode = "feedback"
                state.cooldown_remaining = cooldown
                state.disagreement_streak = 0
                switched = True
    else:
        executed = feedback_action.copy()
        if state.cooldown_remaining == 0:
            a_il = normalize(
                action_delta(
                    current_pose, current_gripper, feedback_action.pose, feedback_action.gripper
                ),
                state.stats,
            )
            t_star = select_reattach(
                traj,
                current_pose,
                current_gripper,
                state.ff_cursor,
                a_il,
                state.stats,
                tau_reattach,
                cache=state.cache,
            )
            if t_star is not None:
                state.mode = "feedforward"
                state.ff_cursor = t_star
                state.cooldown_remaining = cooldown
                switched = True

    state.trace.append(
        {
            "step": state.step_index,
            "mode": state.mode,
            "similarity": sim,
            "switched": switched,
            "ff_cursor": state.ff_cursor,
        }
    )
    state.step_index += 1
    return executed, state


def _trajectory_action(traj: TrajectorySegment, cursor: int) -> Action:
    if cursor >= len(traj):
        raise TrajectoryExhausted(f"cursor {cursor} past trajectory end {len(traj) - 1}")
    return Action(traj.poses[cursor].copy(), float(traj.gripper[cursor]))
