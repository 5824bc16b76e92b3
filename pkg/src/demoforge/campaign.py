"""Campaign orchestration: mint annotations, retarget, warp, roll out, persist.

The generation loop treats each annotation as a bandit arm and each rollout
as one Bernoulli pull. Successful rollouts land in a JSON-lines dataset with
enough provenance to replay them from their reset seed; the bandit state is
checkpointed after every rollout so an interrupted campaign resumes without
losing work.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .annotation import (
    Annotation,
    AnnotationFailed,
    TaskDescription,
    create_annotation,
    scripted_annotate,
)
from .bandit import (
    Arm,
    BanditState,
    PriorFit,
    decide_new_arm,
    estimate_horizon,
    fit_arm_prior,
    record_outcome,
    thompson_select,
)
from .demos import Action, Demonstration, Observation, ObjectObservation
from .ensemble import EnsembleState, ensemble_step
from .gateway import GatewayError
from .geometry import Pose, Rotation
from .retargeting import (
    RetargetFailed,
    SceneObservation,
    build_request,
    retarget,
    scripted_retarget,
)
from .simworld import (
    BUNDLED_TASKS,
    ScriptedPolicy,
    TaskSpec,
    inject_disturbance,
    observation,
    record_demo,
    reset,
    rollout,
    scene_observation,
    step,
    success,
)
from .warping import TrajectorySegment, warp_trajectory_by_keyposes

TASK_DESCRIPTIONS = {
    "pick_place": "Pick up the block and place it inside the goal region.",
    "stack": "Stack the two blocks on the goal region in the tagged color order.",
    "stack_flipped": "Stack the two blocks on the goal region in the tagged color order.",
    "stack_walking": "Stack the two slowly drifting blocks on the goal region in the tagged color order.",
    "drawer_mug": "Open the drawer, put the mug inside, and close it.",
}

_Z95 = float(norm.ppf(0.975))

# seed-stream tags: every random decision derives from (campaign seed, tag,
# counter), so a resumed campaign replays the identical stream
_TAG_SCENE = 11
_TAG_MINT = 23
_TAG_NOISE = 37
_TAG_DECIDE = 41
_TAG_THOMPSON = 53
_TAG_PRIOR = 67
_TAG_EVAL = 79


class ConfigError(ValueError):
    """Bad campaign configuration; the CLI maps this to exit code 2."""


class SchemaViolation(ValueError):
    """A dataset line that does not parse into a demonstration."""

    def __init__(self, line: int, why: str):
        self.line = line
        super().__init__(f"line {line}: {why}")


def _seeded(seed: int, tag: int, n: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag, int(n)]))


def _scene_seed(seed: int, n: int) -> int:
    return int(np.random.SeedSequence([int(seed), _TAG_SCENE, int(n)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Dataset persistence: JSON lines, one demonstration per line. Floats are
# written with repr precision, so read(write(demos)) is identical bit for bit.


def _pose_doc(pose: Pose) -> dict:
    return {"p": pose.position.tolist(), "R": pose.rotation.as_matrix().tolist()}


def _pose_from_doc(doc: dict) -> Pose:
    return Pose(np.asarray(doc["p"], dtype=float), Rotation.from_matrix(np.asarray(doc["R"], dtype=float)))


def demo_to_doc(demo: Demonstration) -> dict:
    steps = []
    for obs, act in demo.steps:
        steps.append(
            {
                "obs": {
                    "robot": _pose_doc(obs.robot_pose),
                    "gripper": obs.gripper,
                    "objects": [
                        {"name": o.name, "pose": _pose_doc(o.pose), "color": o.color} for o in obs.objects
                    ],
                },
                "act": {"pose": _pose_doc(act.pose), "gripper": act.gripper},
            }
        )
    return {
        "id": demo.demo_id,
        "task": demo.task,
        "seed": demo.seed,
        "success": demo.success,
        "provenance": demo.provenance,
        "steps": steps,
    }


def demo_from_doc(doc: dict) -> Demonstration:
    steps = []
    for row in doc["steps"]:
        obs = Observation(
            robot_pose=_pose_from_doc(row["obs"]["robot"]),
            gripper=float(row["obs"]["gripper"]),
            objects=[
                ObjectObservation(o["name"], _pose_from_doc(o["pose"]), o["color"])
                for o in row["obs"]["objects"]
            ],
        )
        act = Action(_pose_from_doc(row["act"]["pose"]), float(row["act"]["gripper"]))
        steps.append((obs, act))
    if len(steps) < 2:
        raise ValueError(f"demonstration needs at least 2 steps, got {len(steps)}")
    return Demonstration(
        task=doc["task"],
        steps=steps,
        demo_id=doc["id"],
        seed=doc["seed"],
        success=bool(doc["success"]),
        provenance=dict(doc["provenance"]),
    )


def write_dataset(demos: list[Demonstration], path) -> None:
    with open(path, "w") as fh:
        for demo in demos:
            fh.write(json.dumps(demo_to_doc(demo), separators=(",", ":")) + "\n")


def append_demo(path, demo: Demonstration) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(demo_to_doc(demo), separators=(",", ":")) + "\n")


def read_dataset(path) -> list[Demonstration]:
    demos = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                demos.append(demo_from_doc(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise SchemaViolation(line_no, str(err)) from err
    return demos


def replay_demo(demo: Demonstration) -> bool:
    """Re-execute a stored demo's actions from its recorded reset seed."""
    if demo.seed is None:
        raise ValueError(f"demo {demo.demo_id!r} has no recorded seed to replay from")
    spec = TaskSpec(demo.task)
    state, _ = reset(spec, demo.seed)
    poses = [demo.action(t).pose for t in range(len(demo))]
    grips = [demo.action(t).gripper for t in range(len(demo))]
    return rollout(state, TrajectorySegment(poses, grips)).success


@dataclass
class AuditResult:
    total: int
    replayed_ok: int
    failed_ids: list[str]

    @property
    def all_ok(self) -> bool:
        return self.replayed_ok == self.total


def audit_dataset(path) -> AuditResult:
    """Replay every stored demo; the dataset is self-consistent iff all pass."""
    demos = read_dataset(path)
    failed = [d.demo_id for d in demos if not replay_demo(d)]
    return AuditResult(total=len(demos), replayed_ok=len(demos) - len(failed), failed_ids=failed)


# ---------------------------------------------------------------------------
# Policy evaluation.


def wilson_interval(successes: int, trials: int, z: float = _Z95) -> tuple[float, float]:
    if trials < 1:
        raise ValueError("need at least one trial")
    if not 0 <= successes <= trials:
        raise ValueError("successes must lie in [0, trials]")
    phat = successes / trials
    denom = 1.0 + z * z / trials
    center = (phat + z * z / (2 * trials)) / denom
    half = z * math.sqrt(phat * (1 - phat) / trials + z * z / (4 * trials * trials)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


@dataclass
class EvalReport:
    n_trials: int
    successes: int
    rate: float
    ci_low: float
    ci_high: float


def evaluate_policy(policy, spec: TaskSpec, n_trials: int, seed: int = 0) -> EvalReport:
    """Run ``policy(spec, scene_seed) -> bool`` over n seeded fresh scenes.

    Scene seeds depend only on (seed, trial index), so two policies
    evaluated with the same seed face identical scenes, trial for trial.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    wins = 0
    for i in range(n_trials):
        trial_seed = int(np.random.SeedSequence([int(seed), _TAG_EVAL, i]).generate_state(1)[0])
        wins += bool(policy(spec, trial_seed))
    lo, hi = wilson_interval(wins, n_trials)
    return EvalReport(n_trials, wins, wins / n_trials, lo, hi)


def _scene_from_observation(obs: Observation) -> SceneObservation:
    return SceneObservation(
        robot_pose=obs.robot_pose.copy(),
        objects={o.name: o.pose.copy() for o in obs.objects},
        task_metadata={},
    )


def _retarget_and_warp(annotation, source_demo, scene, noise_std=0.0, rng=None):
    old_scene = _scene_from_observation(source_demo.observation(0))
    kps = scripted_retarget(annotation, scene, old_scene, noise_std=noise_std, rng=rng)
    return warp_trajectory_by_keyposes(
        source_demo, annotation.keypose_pairs(), [(k.timestep, k.pose) for k in kps]
    )


def scripted_runner(max_steps: int = 5000):
    """The oracle controller run closed-loop: succeeds unless the task can't."""

    def run(spec: TaskSpec, scene_seed: int) -> bool:
        state, _ = reset(spec, scene_seed)
        policy = ScriptedPolicy(spec)
        for _ in range(max_steps):
            if success(state):
                return True
            act = policy.action(state)
            if act is None:
                break
            step(state, act)
        return success(state)

    return run


def feedforward_runner(annotation, source_demo, noise_std: float = 0.0, disturbance=None):
    """Open-loop replay of the warped trajectory on a fresh scene.

    ``disturbance`` maps the warped trajectory to (point_index, object,
    delta) triples, so perturbations can be placed relative to e.g. the
    grasp timestep of this particular trajectory.
    """

    def run(spec: TaskSpec, scene_seed: int) -> bool:
        state, scene = reset(spec, scene_seed)
        rng = _seeded(scene_seed, _TAG_NOISE, 0)
        traj = _retarget_and_warp(annotation, source_demo, scene, noise_std, rng)
        dist = disturbance(traj) if disturbance else None
        return rollout(state, traj, dist).success

    return run


def ensemble_runner(annotation, source_demo, noise_std: float = 0.0, disturbance=None, max_steps=None):
    """Warped trajectory plus scripted feedback under the switching ensemble."""

    def run(spec: TaskSpec, scene_seed: int) -> bool:
        state, scene = reset(spec, scene_seed)
        rng = _seeded(scene_seed, _TAG_NOISE, 0)
        traj = _retarget_and_warp(annotation, source_demo, scene, noise_std, rng)
        dist = disturbance(traj) if disturbance else None
        return run_ensemble_episode(state, traj, disturbances=dist, max_steps=max_steps).success

    return run


@dataclass
class EpisodeOutcome:
    success: bool
    steps: int
    ensemble: EnsembleState


def run_ensemble_episode(state, traj: TrajectorySegment, disturbances=None, max_steps=None) -> EpisodeOutcome:
    """Step the world under the feedforward/feedback switching machine.

    The scripted controller provides the feedback action each step; when it
    has nothing to say (it believes the task is done) the ensemble is fed a
    hold-position action. ``disturbances`` are (env step, object, delta).
    """
    state = state.copy()
    policy = ScriptedPolicy(state.spec)
    es = EnsembleState.initial(traj)
    by_step: dict[int, list[tuple[str, np.ndarray]]] = {}
    for idx, obj, delta in disturbances or []:
        by_step.setdefault(idx, []).append((obj, delta))
    limit = max_steps if max_steps is not None else 2 * len(traj) + 400

    steps = 0
    for i in range(limit):
        if success(state):
            break
        for obj, delta in by_step.get(i, []):
            inject_disturbance(state, obj, delta)
        fb = policy.action(state) or Action(state.robot_pose.copy(), state.gripper)
        act, es = ensemble_step(es, fb, state.robot_pose, state.gripper)
        step(state, act)
        steps += 1
    return EpisodeOutcome(success=success(state), steps=steps, ensemble=es)


# ---------------------------------------------------------------------------
# The campaign itself.


@dataclass
class CampaignConfig:
    task: str
    goal_successes: int
    seed: int = 0
    mode: str = "bandit"  # bandit | no_optimization | fixed_first
    annotator: str = "scripted"  # scripted | llm
    retargeter: str = "scripted"  # scripted | llm
    noise_min: float = 0.001  # meters; per-annotation retarget noise floor
    noise_max: float = 0.020
    decision_samples: int = 1000  # k ground-truth sets per add-arm decision
    prior_samples: int = 1000  # m posterior samples per arm for the prior fit
    max_retries: int = 3
    source_demo_seeds: tuple = (1001, 1002, 1003)
    max_rollouts: int | None = None
    dataset_path: str | None = None
    checkpoint_path: str | None = None

    MODES = ("bandit", "no_optimization", "fixed_first")

    def validate(self) -> None:
        if self.task not in BUNDLED_TASKS:
            raise ConfigError(f"unknown task {self.task!r}; pick one of {BUNDLED_TASKS}")
        if self.goal_successes < 1:
            raise ConfigError("goal_successes must be >= 1")
        if self.mode not in self.MODES:
            raise ConfigError(f"mode must be one of {self.MODES}, got {self.mode!r}")
        if self.annotator not in ("scripted", "llm"):
            raise ConfigError(f"annotator must be scripted or llm, got {self.annotator!r}")
        if self.retargeter not in ("scripted", "llm"):
            raise ConfigError(f"retargeter must be scripted or llm, got {self.retargeter!r}")
        if not (0.0 <= self.noise_min <= self.noise_max):
            raise ConfigError("need 0 <= noise_min <= noise_max")
        if self.decision_samples < 1 or self.prior_samples < 1:
            raise ConfigError("decision_samples and prior_samples must be >= 1")
        if not self.source_demo_seeds:
            raise ConfigError("need at least one source demo seed")

    @classmethod
    def from_dict(cls, doc: dict) -> "CampaignConfig":
        if not isinstance(doc, dict):
            raise ConfigError(f"config root must be a mapping, got {type(doc).__name__}")
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = {"task", "goal_successes"} - set(doc)
        if missing:
            raise ConfigError(f"missing required config keys: {sorted(missing)}")
        doc = dict(doc)
        if "source_demo_seeds" in doc:
            doc["source_demo_seeds"] = tuple(doc["source_demo_seeds"])
        try:
            cfg = cls(**doc)
        except TypeError as err:
            raise ConfigError(str(err)) from err
        cfg.validate()
        return cfg

    def fingerprint(self) -> dict:
        """The fields that determine the campaign's random stream."""
        return {
            "task": self.task,
            "goal_successes": self.goal_successes,
            "seed": self.seed,
            "mode": self.mode,
            "annotator": self.annotator,
            "retargeter": self.retargeter,
            "noise_min": self.noise_min,
            "noise_max": self.noise_max,
            "decision_samples": self.decision_samples,
            "prior_samples": self.prior_samples,
            "source_demo_seeds": list(self.source_demo_seeds),
        }


@dataclass
class ArmMeta:
    """Everything needed to roll an arm out again: its annotation, the noise
    level it was minted with, and which source demo its keyposes index."""

    annotation: Annotation
    noise_std: float
    source_demo_id: str

    def to_json(self) -> dict:
        return {
            "annotation": self.annotation.to_json(),
            "noise_std": self.noise_std,
            "source_demo_id": self.source_demo_id,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ArmMeta":
        return cls(Annotation.from_json(doc["annotation"]), doc["noise_std"], doc["source_demo_id"])


@dataclass
class CampaignReport:
    task: str
    mode: str
    goal_successes: int
    total_rollouts: int
    successes: int
    new_arm_attempts: int
    new_arm_successes: int
    per_arm: list[dict]
    best_arm_rate: float
    success_rate: float
    wall_time: float
    baseline_rate: float | None = None

    def __post_init__(self):
        if self.successes > self.total_rollouts:
            raise ValueError("successes cannot exceed total rollouts")

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "mode": self.mode,
            "goal_successes": self.goal_successes,
            "total_rollouts": self.total_rollouts,
            "successes": self.successes,
            "new_arm_attempts": self.new_arm_attempts,
            "new_arm_successes": self.new_arm_successes,
            "per_arm": self.per_arm,
            "best_arm_rate": self.best_arm_rate,
            "success_rate": self.success_rate,
            "wall_time": self.wall_time,
            "baseline_rate": self.baseline_rate,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CampaignReport":
        return cls(**doc)

    def render_table(self) -> str:
        lines = [
            f"task: {self.task}   mode: {self.mode}",
            f"successes: {self.successes}/{self.total_rollouts} rollouts "
            f"(rate {self.success_rate:.3f}, goal {self.goal_successes})",
            f"new arms: {self.new_arm_successes} kept / {self.new_arm_attempts} attempted",
            f"best arm rate: {self.best_arm_rate:.3f}",
        ]
        if self.baseline_rate is not None:
            lines.append(f"no-optimization baseline rate: {self.baseline_rate:.3f}")
        lines.append(f"wall time: {self.wall_time:.1f} s")
        lines.append("")
        lines.append(f"{'arm':<24}{'successes':>10}{'failures':>10}{'noise mm':>10}")
        for row in self.per_arm:
            noise_mm = row["noise_std"] * 1000.0
            lines.append(
                f"{row['annotation_id']:<24}{row['n_suc']:>10}{row['n_fail']:>10}{noise_mm:>10.1f}"
            )
        return "\n".join(lines)


def _record_source_demos(cfg: CampaignConfig) -> dict[str, Demonstration]:
    spec = TaskSpec(cfg.task)
    demos = {}
    for j, s in enumerate(cfg.source_demo_seeds):
        demo = record_demo(spec, s, demo_id=f"{cfg.task}-src{j:02d}")
        demos[demo.demo_id] = demo
    return demos


def _mint_arm(cfg: CampaignConfig, state: BanditState, sources: dict, gateway) -> ArmMeta:
    mint_idx = state.new_arm_attempts
    rng = _seeded(cfg.seed, _TAG_MINT, mint_idx)
    source = sources[sorted(sources)[int(rng.integers(len(sources)))]]
    noise = float(rng.uniform(cfg.noise_min, cfg.noise_max))
    if cfg.annotator == "scripted":
        ann = scripted_annotate(source, cfg.task)
    else:
        ann = create_annotation(
            gateway, source, TaskDescription(TASK_DESCRIPTIONS[cfg.task]), max_retries=cfg.max_retries
        )
    ann.id = f"{cfg.task}-arm{mint_idx:03d}"
    return ArmMeta(annotation=ann, noise_std=noise, source_demo_id=source.demo_id)


def _rollout_arm(cfg, meta: ArmMeta, source: Demonstration, scene_seed: int, rollout_idx: int, gateway):
    """One pull of an arm: fresh scene, retarget, warp, roll out."""
    spec = TaskSpec(cfg.task)
    state, scene = reset(spec, scene_seed)
    if cfg.retargeter == "scripted":
        kps = scripted_retarget(
            meta.annotation,
            scene,
            _scene_from_observation(source.observation(0)),
            noise_std=meta.noise_std,
            rng=_seeded(cfg.seed, _TAG_NOISE, rollout_idx),
        )
    else:
        req = build_request(meta.annotation, TaskDescription(TASK_DESCRIPTIONS[cfg.task]), scene)
        kps = retarget(gateway, req, max_retries=cfg.max_retries)
    traj = warp_trajectory_by_keyposes(
        source, meta.annotation.keypose_pairs(), [(k.timestep, k.pose) for k in kps]
    )
    out = rollout(state, traj)
    if not out.success:
        return False, None
    demo = Demonstration(
        task=cfg.task,
        steps=out.trace,
        demo_id=f"{cfg.task}-gen{scene_seed:010d}",
        seed=scene_seed,
        success=True,
        provenance={
            "kind": "generated",
            "annotation_id": meta.annotation.id,
            "seed": scene_seed,
            "noise_std": meta.noise_std,
        },
    )
    return True, demo


def _cached_prior(cfg: CampaignConfig, state: BanditState, cache: dict) -> PriorFit:
    # keyed by posterior counts: the fit only changes when an outcome lands,
    # and seeding off the counts keeps a resumed campaign on the same stream
    key = tuple((a.n_suc, a.n_fail) for a in state.arms)
    if key not in cache:
        entropy = [cfg.seed, _TAG_PRIOR] + [c for pair in key for c in pair]
        rng = np.random.default_rng(np.random.SeedSequence(entropy))
        cache[key] = fit_arm_prior(state.arms, m=cfg.prior_samples, rng=rng)
    return cache[key]


def _should_mint(cfg: CampaignConfig, state: BanditState, rollout_idx: int, prior_cache: dict) -> bool:
    if not state.arms:
        return True
    if cfg.mode == "no_optimization":
        return True
    if cfg.mode == "fixed_first":
        return False
    T = estimate_horizon(state)
    prior = _cached_prior(cfg, state, prior_cache)
    return decide_new_arm(
        state, T, prior, k=cfg.decision_samples, rng=_seeded(cfg.seed, _TAG_DECIDE, rollout_idx)
    )


def _write_checkpoint(cfg, state, arms_meta, rollouts, elapsed) -> None:
    if cfg.checkpoint_path is None:
        return
    doc = {
        "fingerprint": cfg.fingerprint(),
        "bandit": state.to_json(),
        "arms": [m.to_json() for m in arms_meta],
        "rollouts": rollouts,
        "elapsed": elapsed,
    }
    tmp = str(cfg.checkpoint_path) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, cfg.checkpoint_path)


def _load_checkpoint(cfg: CampaignConfig):
    with open(cfg.checkpoint_path) as fh:
        doc = json.load(fh)
    if doc["fingerprint"] != cfg.fingerprint():
        raise ConfigError("checkpoint was produced by a different campaign configuration")
    state = BanditState.from_json(doc["bandit"])
    arms_meta = [ArmMeta.from_json(m) for m in doc["arms"]]
    return state, arms_meta, doc["rollouts"], doc["elapsed"]


def run_campaign(cfg: CampaignConfig, gateway=None, resume: bool = False) -> CampaignReport:
    """Generate demonstrations until goal_successes land in the dataset.

    Each iteration either mints a new annotation (always, in no_optimization
    mode; never after the first, in fixed_first mode; by expected-value
    comparison in bandit mode) or Thompson-samples an existing arm, then
    rolls the choice out on a fresh scene. Gateway transport errors abort
    with the checkpoint already written; rerun with resume=True to continue.
    """
    cfg.validate()
    if (cfg.annotator == "llm" or cfg.retargeter == "llm") and gateway is None:
        raise ConfigError("llm annotator/retargeter needs a gateway")

    sources = _record_source_demos(cfg)
    resuming = resume and cfg.checkpoint_path is not None and os.path.exists(cfg.checkpoint_path)
    if resuming:
        state, arms_meta, rollouts, elapsed_prior = _load_checkpoint(cfg)
        if cfg.dataset_path is not None:
            have = sum(1 for line in open(cfg.dataset_path) if line.strip())
            if have != state.current_successes:
                raise ConfigError(
                    f"dataset has {have} demos but checkpoint says {state.current_successes}"
                )
    else:
        state = BanditState(goal_successes=cfg.goal_successes, rng_seed=cfg.seed)
        arms_meta, rollouts, elapsed_prior = [], 0, 0.0
        if cfg.dataset_path is not None:
            open(cfg.dataset_path, "w").close()

    prior_cache: dict = {}
    t0 = time.monotonic()

    while state.current_successes < cfg.goal_successes:
        if cfg.max_rollouts is not None and rollouts >= cfg.max_rollouts:
            break
        minted = _should_mint(cfg, state, rollouts, prior_cache)
        scene_seed = _scene_seed(cfg.seed, rollouts)
        succ, demo = False, None
        pull_idx = None
        try:
            if minted:
                meta = _mint_arm(cfg, state, sources, gateway)
                succ, demo = _rollout_arm(cfg, meta, sources[meta.source_demo_id], scene_seed, rollouts, gateway)
                state.new_arm_attempts += 1
                if succ:
                    state.new_arm_successes += 1
                    state.arms.append(Arm(meta.annotation.id, 1, 0))
                    arms_meta.append(meta)
            else:
                pull_idx = thompson_select(state, _seeded(cfg.seed, _TAG_THOMPSON, rollouts))
                meta = arms_meta[pull_idx]
                succ, demo = _rollout_arm(cfg, meta, sources[meta.source_demo_id], scene_seed, rollouts, gateway)
                record_outcome(state, pull_idx, succ)
        except AnnotationFailed:
            state.new_arm_attempts += 1
        except RetargetFailed:
            if minted:
                state.new_arm_attempts += 1
            else:
                record_outcome(state, pull_idx, False)
        except GatewayError:
            _write_checkpoint(cfg, state, arms_meta, rollouts, elapsed_prior + time.monotonic() - t0)
            raise

        if succ:
            state.current_successes += 1
            if cfg.dataset_path is not None:
                append_demo(cfg.dataset_path, demo)
        rollouts += 1
        _write_checkpoint(cfg, state, arms_meta, rollouts, elapsed_prior + time.monotonic() - t0)

    elapsed = elapsed_prior + time.monotonic() - t0
    discarded = state.new_arm_attempts - state.new_arm_successes
    pulls_on_arms = sum(a.n_suc + a.n_fail for a in state.arms)
    assert pulls_on_arms + discarded == rollouts, "rollout conservation violated"

    per_arm = [
        {
            "annotation_id": arm.annotation_id,
            "n_suc": arm.n_suc,
            "n_fail": arm.n_fail,
            "noise_std": meta.noise_std,
        }
        for arm, meta in zip(state.arms, arms_meta)
    ]
    if state.arms:
        best = max(state.arms, key=lambda a: a.posterior_mean)
        best_rate = best.n_suc / (best.n_suc + best.n_fail)
    else:
        best_rate = 0.0
    return CampaignReport(
        task=cfg.task,
        mode=cfg.mode,
        goal_successes=cfg.goal_successes,
        total_rollouts=rollouts,
        successes=state.current_successes,
        new_arm_attempts=state.new_arm_attempts,
        new_arm_successes=state.new_arm_successes,
        per_arm=per_arm,
        best_arm_rate=best_rate,
        success_rate=state.current_successes / rollouts if rollouts else 0.0,
        wall_time=elapsed,
    )
