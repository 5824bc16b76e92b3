import numpy as np
import pytest

from demoforge.demos import Action, Demonstration, Observation
from demoforge.geometry import Pose, Rotation
from demoforge.warping import (
    DegenerateChord,
    KeyposeMismatch,
    TrajectorySegment,
    compute_warp,
    warp_positions,
    warp_rotations,
    warp_trajectory_by_keyposes,
)

from oracles import grid_max_z_alignment, quat_slerp_matrix


def p(x, y, z, rot=None):
    return Pose(np.array([x, y, z], dtype=float), rot or Rotation.identity())


def random_pose(rng, span=1.0):
    return Pose(rng.uniform(-span, span, size=3), Rotation.from_rotvec(rng.normal(size=3)))


class TestComputeWarp:
    def test_identity_when_endpoints_match(self):
        a, b = p(0.1, 0.2, 0.3), p(0.4, 0.5, 0.6)
        tf = compute_warp(a, b, a, b)
        assert tf.scale == pytest.approx(1.0, abs=1e-12)
        assert tf.rotation.allclose(Rotation.identity(), atol=1e-9)
        assert np.allclose(tf.translation, 0.0, atol=1e-9)

    def test_x_chord_to_y_chord_is_90_about_z(self):
        # frozen grid-search oracle (1e-4 resolution): max z.R.z = 1.0 at phi = 0,
        # which lands on exactly Rz(90 deg)
        tf = compute_warp(p(0, 0, 0), p(1, 0, 0), p(0, 0, 0), p(0, 1, 0))
        assert tf.rotation.allclose(Rotation.about_z_deg(90.0), atol=1e-9)
        m = tf.rotation.as_matrix()
        assert m[2, 2] == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(tf.translation, 0.0, atol=1e-12)
        assert tf.scale == pytest.approx(1.0, abs=1e-12)
        oracle_val, _ = grid_max_z_alignment([1.0, 0, 0], [0, 1.0, 0], resolution=1e-4)
        assert m[2, 2] >= oracle_val - 1e-9

    def test_collinear_stretch(self):
        tf = compute_warp(p(0, 0, 0), p(1, 0, 0), p(0, 0, 0), p(2, 0, 0))
        assert tf.scale == pytest.approx(2.0, abs=1e-12)
        assert tf.rotation.allclose(Rotation.identity(), atol=1e-9)

    def test_endpoint_exactness_random(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            os_, oe = random_pose(rng), random_pose(rng)
            ns, ne = random_pose(rng), random_pose(rng)
            if np.linalg.norm(oe.position - os_.position) < 1e-3:
                continue
            tf = compute_warp(os_, oe, ns, ne)
            assert np.linalg.norm(tf.transform_point(os_.position) - ns.position) < 1e-9
            assert np.linalg.norm(tf.transform_point(oe.position) - ne.position) < 1e-9

    def test_z_alignment_beats_grid(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            os_, oe = random_pose(rng), random_pose(rng)
            ns, ne = random_pose(rng), random_pose(rng)
            c_old = oe.position - os_.position
            c_new = ne.position - ns.position
            if min(np.linalg.norm(c_old), np.linalg.norm(c_new)) < 1e-3:
                continue
            tf = compute_warp(os_, oe, ns, ne)
            got = tf.rotation.as_matrix()[2, 2]
            best, _ = grid_max_z_alignment(
                c_old / np.linalg.norm(c_old), c_new / np.linalg.norm(c_new), resolution=1e-3
            )
            assert got >= best - 1e-5

    def test_rigid_when_chords_equal(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            os_ = random_pose(rng)
            d = rng.normal(size=3)
            oe = Pose(os_.position + d)
            ns = random_pose(rng)
            # rotate the same chord somewhere else: length unchanged
            ne = Pose(ns.position + Rotation.from_rotvec(rng.normal(size=3)).apply(d))
            tf = compute_warp(os_, oe, ns, ne)
            assert tf.scale == pytest.approx(1.0, abs=1e-9)
            pts = rng.uniform(-1, 1, size=(4, 3))
            imgs = np.stack([tf.transform_point(q) for q in pts])
            for i in range(4):
                for j in range(i + 1, 4):
                    assert np.linalg.norm(imgs[i] - imgs[j]) == pytest.approx(
                        np.linalg.norm(pts[i] - pts[j]), abs=1e-9
                    )

    def test_chord_along_z_tie_break_is_deterministic_and_minimal(self):
        # new chord parallel to z: objective is flat, tie-break must pick the
        # smallest total rotation; mapping z-chord onto itself needs none at all
        tf = compute_warp(p(0, 0, 0), p(0, 0, 1), p(0.2, 0, 0), p(0.2, 0, 1))
        assert tf.rotation.allclose(Rotation.identity(), atol=1e-9)
        tf2 = compute_warp(p(0, 0, 0), p(0, 0, 1), p(0.2, 0, 0), p(0.2, 0, 1))
        assert np.array_equal(tf.rotation.as_matrix(), tf2.rotation.as_matrix())

    def test_degenerate_both_chords(self):
        a = p(0.1, 0.1, 0.1)
        tf = compute_warp(a, a, p(0.5, 0, 0), p(0.5, 0, 0))
        assert tf.scale == 1.0
        assert tf.rotation.allclose(Rotation.identity(), atol=1e-12)
        assert np.allclose(tf.transform_point(a.position), [0.5, 0, 0], atol=1e-12)

    def test_degenerate_old_chord_raises(self):
        a = p(0.1, 0.1, 0.1)
        with pytest.raises(DegenerateChord):
            compute_warp(a, a, p(0, 0, 0), p(1, 0, 0))


class TestWarpPositions:
    def _seg(self):
        poses = [p(0, 0, 0), p(0.3, 0, 0), p(1, 0, 0)]
        return TrajectorySegment(poses, [1.0, 1.0, 0.0])

    def test_identity(self):
        from demoforge.geometry import RigidTransform

        seg = self._seg()
        out = warp_positions(seg, RigidTransform.identity())
        assert np.allclose(out.positions(), seg.positions())
        assert out.gripper == seg.gripper

    def test_pure_translation(self):
        from demoforge.geometry import RigidTransform

        seg = self._seg()
        out = warp_positions(seg, RigidTransform.from_translation([0.1, -0.2, 0.3]))
        assert np.allclose(out.positions(), seg.positions() + np.array([0.1, -0.2, 0.3]))

    def test_collinear_ratios_preserved(self):
        # frozen affine-invariance oracle: images of (0,0,0),(0.3,0,0),(1,0,0)
        # under the 90-about-z warp stay collinear with ratio 0.3
        seg = self._seg()
        tf = compute_warp(p(0, 0, 0), p(1, 0, 0), p(0, 0, 0), p(0, 1, 0))
        out = warp_positions(seg, tf).positions()
        v1, v2 = out[1] - out[0], out[2] - out[0]
        assert np.linalg.norm(np.cross(v1, v2)) < 1e-12
        assert np.linalg.norm(v1) / np.linalg.norm(v2) == pytest.approx(0.3, abs=1e-12)

    def test_rotations_untouched(self):
        from demoforge.geometry import RigidTransform

        rot = Rotation.about_z_deg(33.0)
        seg = TrajectorySegment([p(0, 0, 0, rot), p(1, 0, 0, rot)], [0.0, 0.0])
        out = warp_positions(seg, RigidTransform(Rotation.about_z_deg(90.0), np.zeros(3)))
        for q in out.poses:
            assert q.rotation.allclose(rot, atol=1e-12)


class TestWarpRotations:
    def _seg(self, rots):
        return TrajectorySegment([p(float(i), 0, 0, r) for i, r in enumerate(rots)], [0.0] * len(rots))

    def test_unchanged_when_endpoints_match(self):
        rots = [Rotation.about_z_deg(a) for a in (0.0, 20.0, 50.0)]
        out = warp_rotations(self._seg(rots), rots[0], rots[-1])
        for got, want in zip(out.poses, rots):
            assert got.rotation.allclose(want, atol=1e-9)

    def test_constant_delta(self):
        rots = [Rotation.about_z_deg(a) for a in (0.0, 20.0, 50.0)]
        dz = Rotation.about_z_deg(90.0)
        out = warp_rotations(self._seg(rots), dz @ rots[0], dz @ rots[-1])
        for got, base in zip(out.poses, rots):
            assert got.rotation.allclose(dz @ base, atol=1e-9)

    def test_midpoint_delta_is_half_turn(self):
        # frozen quaternion-slerp oracle: midpoint of I -> Rz(90) is Rz(45)
        rots = [Rotation.identity()] * 3
        out = warp_rotations(self._seg(rots), Rotation.identity(), Rotation.about_z_deg(90.0))
        assert out.poses[1].rotation.allclose(Rotation.about_z_deg(45.0), atol=1e-6)

    def test_midpoint_matches_quaternion_oracle_random(self):
        rng = np.random.default_rng(23)
        for _ in range(50):
            rots = [Rotation.from_rotvec(rng.normal(size=3)) for _ in range(3)]
            new0 = Rotation.from_rotvec(rng.normal(size=3))
            new2 = Rotation.from_rotvec(rng.normal(size=3))
            out = warp_rotations(self._seg(rots), new0, new2)
            d0 = new0.as_matrix() @ rots[0].as_matrix().T
            d2 = new2.as_matrix() @ rots[2].as_matrix().T
            want = quat_slerp_matrix(d0, d2, 0.5) @ rots[1].as_matrix()
            assert np.linalg.norm(out.poses[1].rotation.as_matrix() - want) < 1e-9

    def test_endpoint_rotations_exact(self):
        rng = np.random.default_rng(29)
        for _ in range(200):
            rots = [Rotation.from_rotvec(rng.normal(size=3)) for _ in range(5)]
            new0 = Rotation.from_rotvec(rng.normal(size=3))
            new4 = Rotation.from_rotvec(rng.normal(size=3))
            out = warp_rotations(self._seg(rots), new0, new4)
            assert np.linalg.norm(out.poses[0].rotation.as_matrix() - new0.as_matrix()) < 1e-9
            assert np.linalg.norm(out.poses[-1].rotation.as_matrix() - new4.as_matrix()) < 1e-9


def make_demo(positions, rots=None, grippers=None, task="pick_place"):
    n = len(positions)
    rots = rots or [Rotation.identity()] * n
    grippers = grippers if grippers is not None else [1.0] * n
    steps = []
    for i in range(n):
        pose = Pose(np.asarray(positions[i], dtype=float), rots[i])
        obs = Observation(pose.copy(), grippers[i], [])
        steps.append((obs, Action(pose, grippers[i])))
    return Demonstration(task=task, steps=steps, demo_id="d0")


class TestWarpTrajectoryByKeyposes:
    def _demo(self):
        xs = np.linspace(0.0, 1.0, 11)
        rots = [Rotation.about_z_deg(5.0 * i) for i in range(11)]
        return make_demo([[x, 0.0, 0.1] for x in xs], rots, [1.0] * 5 + [0.0] * 6)

    def _kp(self, demo, ts):
        return [(t, demo.action(t).pose.copy()) for t in ts]

    def test_identity_warp(self):
        demo = self._demo()
        kp = self._kp(demo, [0, 5, 10])
        out = warp_trajectory_by_keyposes(demo, kp, self._kp(demo, [0, 5, 10]))
        assert len(out) == len(demo)
        for t in range(len(demo)):
            assert np.allclose(out.poses[t].position, demo.action(t).pose.position, atol=1e-9)
            assert out.poses[t].rotation.allclose(demo.action(t).pose.rotation, atol=1e-9)
            assert out.gripper[t] == demo.action(t).gripper

    def test_single_segment_end_shift(self):
        demo = self._demo()
        old = self._kp(demo, [0, 10])
        new = self._kp(demo, [0, 10])
        new[1] = (10, Pose(old[1][1].position + np.array([0.1, 0.0, 0.0]), old[1][1].rotation))
        out = warp_trajectory_by_keyposes(demo, old, new)
        assert np.allclose(out.poses[-1].position, demo.action(10).pose.position + [0.1, 0, 0], atol=1e-9)
        assert np.allclose(out.poses[0].position, demo.action(0).pose.position, atol=1e-12)

    def test_middle_keypose_moved_segments_align(self):
        demo = self._demo()
        old = self._kp(demo, [0, 5, 10])
        new = self._kp(demo, [0, 5, 10])
        moved = Pose(old[1][1].position + np.array([0.0, 0.2, 0.05]), Rotation.about_z_deg(60.0))
        new[1] = (5, moved)
        out = warp_trajectory_by_keyposes(demo, old, new)
        # each segment independently lands on its keypose endpoints
        assert np.allclose(out.poses[0].position, new[0][1].position, atol=1e-9)
        assert np.allclose(out.poses[5].position, moved.position, atol=1e-9)
        assert np.allclose(out.poses[10].position, new[2][1].position, atol=1e-9)
        assert out.poses[5].rotation.allclose(moved.rotation, atol=1e-9)

    def test_boundary_is_bitwise_shared(self):
        demo = self._demo()
        old = self._kp(demo, [0, 5, 10])
        new = self._kp(demo, [0, 5, 10])
        new[1] = (5, Pose(np.array([0.7, 0.3, 0.2]), Rotation.about_z_deg(45.0)))
        # warp the two spans separately and compare the shared keypose pose
        left = warp_trajectory_by_keyposes(
            make_demo([demo.action(t).pose.position for t in range(6)],
                      [demo.action(t).pose.rotation for t in range(6)],
                      [demo.action(t).gripper for t in range(6)]),
            [(0, old[0][1]), (5, old[1][1])],
            [(0, new[0][1]), (5, new[1][1])],
        )
        right = warp_trajectory_by_keyposes(
            make_demo([demo.action(t).pose.position for t in range(5, 11)],
                      [demo.action(t).pose.rotation for t in range(5, 11)],
                      [demo.action(t).gripper for t in range(5, 11)]),
            [(0, old[1][1]), (5, old[2][1])],
            [(0, new[1][1]), (5, new[2][1])],
        )
        assert np.array_equal(left.poses[-1].position, right.poses[0].position)
        assert np.array_equal(left.poses[-1].rotation.as_matrix(), right.poses[0].rotation.as_matrix())

    def test_gripper_copied_verbatim(self):
        demo = self._demo()
        old = self._kp(demo, [0, 5, 10])
        new = self._kp(demo, [0, 5, 10])
        new[2] = (10, Pose(np.array([2.0, 1.0, 0.3]), Rotation.identity()))
        out = warp_trajectory_by_keyposes(demo, old, new)
        assert out.gripper == [demo.action(t).gripper for t in range(len(demo))]

    def test_mismatch_errors(self):
        demo = self._demo()
        kp3 = self._kp(demo, [0, 5, 10])
        with pytest.raises(KeyposeMismatch):
            warp_trajectory_by_keyposes(demo, kp3, kp3[:2])
        with pytest.raises(KeyposeMismatch):
            warp_trajectory_by_keyposes(demo, self._kp(demo, [0, 5]), self._kp(demo, [0, 6]))
        dup = self._kp(demo, [0, 10])
        dup[1] = (0, dup[1][1])  # timesteps [0, 0]: not strictly increasing
        with pytest.raises(KeyposeMismatch):
            warp_trajectory_by_keyposes(demo, dup, [(t, q.copy()) for t, q in dup])
        with pytest.raises(KeyposeMismatch):
            warp_trajectory_by_keyposes(demo, self._kp(demo, [1, 10]), self._kp(demo, [1, 10]))
        with pytest.raises(KeyposeMismatch):
            warp_trajectory_by_keyposes(demo, self._kp(demo, [0, 5]), self._kp(demo, [0, 5]))


def test_segment_validation():
    with pytest.raises(ValueError):
        TrajectorySegment([p(0, 0, 0)], [1.0])
    with pytest.raises(ValueError):
        TrajectorySegment([p(0, 0, 0), p(1, 0, 0)], [1.0])
