"""Turning one demonstration into a reusable annotated demo.

The annotation is the unit of reuse: a keypose list (where the task inflects:
grasps, releases, endpoints) plus a processed description of the demo. It is
produced either by an LLM over a text summary of the demo, or by a scripted
annotator that keys on gripper transitions (the deterministic stand-in used
throughout the tests).

LLM responses are never trusted: listed keypose poses are overwritten with
the recorded poses at those timesteps, endpoints are inserted if missing,
and out-of-range or unparseable responses restart the whole query against a
fresh session.

Keypose poses are stored in the prompt units (millimeters / intrinsic X-Y-Z
degrees) so serialization is exact; meters/Rotation views are derived.
"""
from __future__ import annotations

import json
import re
import uuid
from dataclasses import dataclass, field

import numpy as np

from .demos import Demonstration, Observation
from .geometry import Pose, Rotation, pose_text

VIEWFRAME_CAP = 8
MAX_RETRIES = 3


class EmptyDemo(ValueError):
    pass


class MalformedResponse(ValueError):
    """Gateway answered, but not in a usable shape; caller may restart."""


class AnnotationFailed(RuntimeError):
    """All annotation attempts exhausted."""


@dataclass
class TaskDescription:
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("task description must be non-empty")


@dataclass
class DemoSummary:
    """Text digest of a demo: sampled rows of robot/object poses."""

    sampled_rows: list[tuple[int, str, dict[str, str]]]
    home_rotation: Rotation
    first_image_ref: object | None = None
    final_image_ref: object | None = None

    @property
    def timesteps(self) -> list[int]:
        return [t for t, _, _ in self.sampled_rows]

    @property
    def horizon(self) -> int:
        return self.sampled_rows[-1][0]

    def rows_text(self) -> str:
        lines = []
        for t, robot, objs in self.sampled_rows:
            lines.append(f"t={t}: robot {robot}")
            for name, text in objs.items():
                lines.append(f"       {name} {text}")
        return "\n".join(lines)


@dataclass
class Keypose:
    """One key moment of a demo. pos_mm / euler_deg are the stored truth;
    position (meters) and rotation are derived views for the geometry code."""

    timestep: int
    pos_mm: np.ndarray
    euler_deg: np.ndarray
    gripper: float
    relevant_objects: list[str] = field(default_factory=list)
    relation_note: str = ""

    def __post_init__(self):
        self.pos_mm = np.asarray(self.pos_mm, dtype=float).reshape(3)
        self.euler_deg = np.asarray(self.euler_deg, dtype=float).reshape(3)
        if self.timestep < 0:
            raise ValueError("keypose timestep must be >= 0")
        if not (np.all(np.isfinite(self.pos_mm)) and np.all(np.isfinite(self.euler_deg))):
            raise ValueError("keypose pose must be finite")

    @classmethod
    def from_pose(cls, timestep: int, pose: Pose, gripper: float, relevant_objects=None, relation_note="") -> "Keypose":
        return cls(
            timestep=timestep,
            pos_mm=pose.position * 1000.0,
            euler_deg=pose.rotation.euler_deg(),
            gripper=gripper,
            relevant_objects=list(relevant_objects or []),
            relation_note=relation_note,
        )

    @property
    def position(self) -> np.ndarray:
        return self.pos_mm / 1000.0

    @property
    def rotation(self) -> Rotation:
        return Rotation.from_euler_deg(*self.euler_deg)

    @property
    def pose(self) -> Pose:
        return Pose(self.position, self.rotation)

    def copy(self) -> "Keypose":
        return Keypose(
            self.timestep, self.pos_mm.copy(), self.euler_deg.copy(), self.gripper,
            list(self.relevant_objects), self.relation_note,
        )

    def to_json(self) -> dict:
        return {
            "t": self.timestep,
            "pos_mm": [float(v) for v in self.pos_mm],
            "euler_deg": [float(v) for v in self.euler_deg],
            "gripper": float(self.gripper),
            "objects": list(self.relevant_objects),
            "note": self.relation_note,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Keypose":
        return cls(
            timestep=int(doc["t"]),
            pos_mm=doc["pos_mm"],
            euler_deg=doc["euler_deg"],
            gripper=float(doc["gripper"]),
            relevant_objects=list(doc.get("objects", [])),
            relation_note=str(doc.get("note", "")),
        )


@dataclass
class Annotation:
    id: str
    keyposes: list[Keypose]
    description_text: str
    source_demo_id: str
    created_by: str  # "scripted" or "llm(<model tag>)"

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "source_demo_id": self.source_demo_id,
            "created_by": self.created_by,
            "description_text": self.description_text,
            "keyposes": [k.to_json() for k in self.keyposes],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Annotation":
        return cls(
            id=doc["id"],
            keyposes=[Keypose.from_json(k) for k in doc["keyposes"]],
            description_text=doc["description_text"],
            source_demo_id=doc["source_demo_id"],
            created_by=doc["created_by"],
        )

    def keypose_pairs(self) -> list[tuple[int, Pose]]:
        """(timestep, Pose) pairs in the shape the warper wants."""
        return [(k.timestep, k.pose) for k in self.keyposes]


def summarize_demo(demo: Demonstration, cadence: int = 5, jitter: int = 2, rng_seed=0) -> DemoSummary:
    """Sample the demo roughly every ``cadence`` timesteps into text rows.

    Gaps are drawn uniformly from [cadence - jitter, cadence + jitter] while
    always landing exactly on t = 0 and t = T; the jitter keeps downstream
    consumers from anchoring to exact timestep arithmetic. When the horizon
    forces it (tiny demos, indivisible remainders) the final gap may fall
    below the lower bound, never above the upper one.

    Robot rotations are reported relative to the home rotation (the first
    observation's rotation); object rotations are absolute.
    """
    if len(demo) == 0:
        raise EmptyDemo("cannot summarize an empty demo")
    if cadence < 1:
        raise ValueError("cadence must be >= 1")
    if jitter >= cadence:
        raise ValueError("jitter must be < cadence")
    rng = np.random.default_rng(rng_seed)
    horizon = demo.horizon
    lo, hi = max(1, cadence - jitter), cadence + jitter

    timesteps = [0]
    while timesteps[-1] < horizon:
        rem = horizon - timesteps[-1]
        allowed = [g for g in range(lo, min(hi, rem) + 1) if rem - g == 0 or rem - g >= lo]
        gap = int(rng.choice(allowed)) if allowed else min(rem, hi)
        timesteps.append(timesteps[-1] + gap)

    home = demo.observation(0).robot_pose.rotation
    rows = []
    for t in timesteps:
        obs = demo.observation(t)
        robot = f"{pose_text(obs.robot_pose, home=home)} gripper {_gripper_word(obs.gripper)}"
        objs = {o.name: pose_text(o.pose) for o in obs.objects}
        rows.append((t, robot, objs))
    return DemoSummary(sampled_rows=rows, home_rotation=home)


def _gripper_word(g: float) -> str:
    return "open" if g >= 0.5 else "closed"


_INT_TOKEN = re.compile(r"-?\d+")


def select_viewframes(gateway, summary: DemoSummary, task: TaskDescription, cap: int = VIEWFRAME_CAP) -> list[int]:
    """Ask which sampled timesteps deserve a closer look.

    The response is read as a list of integers; anything outside the demo
    range is a MalformedResponse (callers restart with a fresh session).
    Deduplication keeps first mention, the cap keeps the first ``cap``
    distinct frames, and the result is sorted.
    """
    if not summary.sampled_rows:
        raise ValueError("summary has no rows")
    prompt = render_prompt(
        "viewframes",
        task=task.text,
        rows=summary.rows_text(),
        horizon=summary.horizon,
        cap=cap,
    )
    text = gateway.fresh_session().complete(prompt, temperature=0.2)
    tokens = [int(tok) for tok in _INT_TOKEN.findall(text)]
    if not tokens:
        raise MalformedResponse(f"no timesteps in response: {text!r}")
    seen: list[int] = []
    for t in tokens:
        if t < 0 or t > summary.horizon:
            raise MalformedResponse(f"timestep {t} outside [0, {summary.horizon}]")
        if t not in seen:
            seen.append(t)
    return sorted(seen[:cap])


def _strip_code_fences(text: str) -> str:
    m = re.search(r"```(?:json)?\s*(.*?)```", text, flags=re.DOTALL)
    return m.group(1) if m else text


def _parse_annotation_response(text: str, demo: Demonstration) -> tuple[str, list[Keypose]]:
    try:
        doc = json.loads(_strip_code_fences(text))
    except json.JSONDecodeError as err:
        raise MalformedResponse(f"response is not JSON: {err}") from None
    if not isinstance(doc, dict) or "keyposes" not in doc:
        raise MalformedResponse("response missing 'keyposes'")
    description = str(doc.get("description", ""))
    keyposes = []
    for item in doc["keyposes"]:
        try:
            kp = Keypose.from_json(item)
        except (KeyError, TypeError, ValueError) as err:
            raise MalformedResponse(f"bad keypose entry {item!r}: {err}") from None
        if kp.timestep > demo.horizon:
            raise MalformedResponse(f"keypose timestep {kp.timestep} outside demo range")
        keyposes.append(kp)
    if not keyposes:
        raise MalformedResponse("empty keypose list")
    return description, keyposes


def annotate(
    gateway,
    demo: Demonstration,
    frames: list[int],
    task: TaskDescription,
    summary: DemoSummary | None = None,
    max_retries: int = MAX_RETRIES,
    model_tag: str = "",
) -> Annotation:
    """Full annotation query with the restart-on-malformed rule.

    Each attempt runs against a fresh session; a parse failure or range
    violation discards the response and restarts, up to max_retries total
    attempts.
    """
    if any(t < 0 or t > demo.horizon for t in frames):
        raise ValueError("frames outside demo range")
    summary = summary if summary is not None else summarize_demo(demo)
    prompt = render_prompt(
        "annotate",
        task=task.text,
        rows=summary.rows_text(),
        frames=", ".join(str(t) for t in frames),
        horizon=demo.horizon,
    )
    last_error: Exception | None = None
    for _ in range(max_retries):
        text = gateway.fresh_session().complete(prompt, temperature=0.7)
        try:
            description, keyposes = _parse_annotation_response(text, demo)
        except MalformedResponse as err:
            last_error = err
            continue
        raw = Annotation(
            id=f"ann-{uuid.uuid4().hex[:12]}",
            keyposes=keyposes,
            description_text=description,
            source_demo_id=demo.demo_id,
            created_by=f"llm({model_tag})" if model_tag else "llm()",
        )
        return repair_annotation(raw, demo)
    raise AnnotationFailed(f"no usable annotation after {max_retries} attempts: {last_error}")


_KEYPOSE_BLOCK = re.compile(r"\n*Key poses:\n(?:.*\n?)*", flags=re.MULTILINE)


def _keypose_block(keyposes: list[Keypose]) -> str:
    lines = ["Key poses:"]
    for k in keyposes:
        objs = ", ".join(k.relevant_objects) if k.relevant_objects else "none"
        note = f"; note: {k.relation_note}" if k.relation_note else ""
        lines.append(
            f"t={k.timestep}: {pose_text(k.pose)} gripper {_gripper_word(k.gripper)}"
            f"; objects: {objs}{note}"
        )
    return "\n".join(lines)


def repair_annotation(raw: Annotation, demo: Demonstration) -> Annotation:
    """Make an annotation trustworthy regardless of who wrote it.

    Listed keypose poses and grippers are overwritten with the demo's
    recorded commanded pose at that timestep, endpoints (t=0, t=T) are
    inserted when missing, duplicates collapse to the first mention, and
    the description's "Key poses:" block is regenerated to match.
    Idempotent by construction.
    """
    by_t: dict[int, Keypose] = {}
    for kp in sorted(raw.keyposes, key=lambda k: k.timestep):
        if kp.timestep in by_t:
            continue
        by_t[kp.timestep] = kp
    for t in (0, demo.horizon):
        if t not in by_t:
            by_t[t] = Keypose(t, np.zeros(3), np.zeros(3), 0.0)

    repaired = []
    for t in sorted(by_t):
        kp = by_t[t]
        action = demo.action(t)
        repaired.append(
            Keypose(
                timestep=t,
                pos_mm=action.pose.position * 1000.0,
                euler_deg=action.pose.rotation.euler_deg(),
                gripper=action.gripper,
                relevant_objects=list(kp.relevant_objects),
                relation_note=kp.relation_note,
            )
        )

    body = _KEYPOSE_BLOCK.sub("", raw.description_text).rstrip()
    description = (body + "\n\n" if body else "") + _keypose_block(repaired)
    return Annotation(
        id=raw.id,
        keyposes=repaired,
        description_text=description,
        source_demo_id=raw.source_demo_id,
        created_by=raw.created_by,
    )


# The container task's place target (the drawer) is observed at its handle,
# 10 cm from where releases actually happen, so nearest-entity would anchor
# the mug instead. The LLM annotator reads this relation off the scene; the
# scripted one needs it spelled out.
_RELEASE_ANCHOR_OVERRIDE = {"drawer_mug": "drawer"}


def scripted_annotate(demo: Demonstration, task_kind: str) -> Annotation:
    """Deterministic annotator: keyposes at gripper transitions plus endpoints.

    Each keypose anchors to the scene entity nearest the end-effector at that
    timestep. At release keyposes the object being held is skipped: its
    distance is degenerately zero and the pose relates to the place target,
    not the carried object. Held candidates are movable entities (no color
    tag) within 15 mm of the gripper; goal markers are never held, so they
    stay eligible and win the anchor at a release right on top of them.
    """
    from .simworld import BUNDLED_TASKS

    if task_kind not in BUNDLED_TASKS:
        raise ValueError(f"unknown task kind {task_kind!r}; bundled: {sorted(BUNDLED_TASKS)}")
    if len(demo) < 2:
        raise EmptyDemo("scripted annotator needs at least 2 steps")

    timesteps = sorted(set([0, demo.horizon] + demo.gripper_transition_timesteps()))
    keyposes = []
    for t in timesteps:
        obs = demo.observation(t)
        action = demo.action(t)
        releasing = t > 0 and action.gripper >= 0.5 and demo.action(t - 1).gripper < 0.5
        override = _RELEASE_ANCHOR_OVERRIDE.get(task_kind) if releasing else None
        if override is not None:
            anchor = next((o for o in obs.objects if o.name == override), None)
        else:
            held = _held_candidates(obs) if releasing else set()
            anchor = _nearest_object(obs, exclude=held)
        objects, note = [], ""
        if anchor is not None:
            offset_mm = (action.pose.position - anchor.pose.position) * 1000.0
            objects = [anchor.name]
            note = (
                f"end-effector offset from {anchor.name}: "
                f"[{offset_mm[0]:.1f}, {offset_mm[1]:.1f}, {offset_mm[2]:.1f}] mm"
            )
        keyposes.append(Keypose.from_pose(t, action.pose, action.gripper, objects, note))

    raw = Annotation(
        id=f"ann-{uuid.uuid4().hex[:12]}",
        keyposes=keyposes,
        description_text=f"Scripted annotation of a {task_kind} demonstration.",
        source_demo_id=demo.demo_id,
        created_by="scripted",
    )
    return repair_annotation(raw, demo)


def _held_candidates(obs: Observation, held_radius: float = 0.015) -> set[str]:
    """Movable entities close enough to the gripper to be the thing it holds."""
    return {
        o.name
        for o in obs.objects
        if o.color is None
        and float(np.linalg.norm(o.pose.position - obs.robot_pose.position)) < held_radius
    }


def _nearest_object(obs: Observation, exclude: set[str] = frozenset()):
    # strict < keeps the first of equally distant entities; observations list
    # goal markers ahead of movable objects, so ties resolve to the marker
    best, best_d = None, np.inf
    for o in obs.objects:
        if o.name in exclude:
            continue
        d = float(np.linalg.norm(o.pose.position - obs.robot_pose.position))
        if d < best_d:
            best, best_d = o, d
    return best


def create_annotation(
    gateway,
    demo: Demonstration,
    task: TaskDescription,
    cadence: int = 5,
    jitter: int = 2,
    rng_seed=0,
    max_retries: int = MAX_RETRIES,
    model_tag: str = "",
) -> Annotation:
    """Summarize, pick viewframes, then annotate: the whole query pipeline.

    Viewframe selection and annotation use separate fresh sessions; a
    malformed frame selection restarts that stage up to max_retries.
    """
    summary = summarize_demo(demo, cadence=cadence, jitter=jitter, rng_seed=rng_seed)
    last_error: Exception | None = None
    for _ in range(max_retries):
        try:
            frames = select_viewframes(gateway, summary, task)
            break
        except MalformedResponse as err:
            last_error = err
    else:
        raise AnnotationFailed(f"viewframe selection failed {max_retries} times: {last_error}")
    return annotate(
        gateway, demo, frames, task, summary=summary, max_retries=max_retries, model_tag=model_tag
    )


def render_prompt(name: str, **fields) -> str:
    from importlib import resources
    from string import Template

    text = resources.files("demoforge").joinpath(f"prompts/{name}.txt").read_text(encoding="utf-8")
    return Template(text).substitute(**fields)
