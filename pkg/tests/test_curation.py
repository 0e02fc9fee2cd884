import numpy as np
import pytest

from ocfkit.curation import aggregate_to_target, segment_sweep, sync_object, unify_frame
from ocfkit.errors import RangeError
from ocfkit.geometry import OrientedBox, RigidTransform
from ocfkit.raw_io import InstanceBoxTrack, LidarSweep, RawSequence

from oracles import mat4_apply, transform_to_mat4


IDENT = RigidTransform.identity()


def sweep_at(frame, points, ego_pose=IDENT):
    return LidarSweep(frame, 0.1 * frame, np.asarray(points, float), ego_pose, np.zeros(3))


class TestUnifyFrame:
    def test_identity_chain_keeps_points(self):
        pts = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
        sweep = sweep_at(0, pts)
        out, origin = unify_frame(sweep, IDENT, IDENT)
        assert np.array_equal(out, pts)
        assert np.array_equal(origin, np.zeros(3))

    def test_translated_ego(self):
        # Ego advanced +5 m in x between t and 0: the old sensor origin shows
        # up at (-5, 0, 0) in the t=0 frame.
        sweep = sweep_at(0, [[0.0, 0.0, 0.0]])
        pose_t0 = RigidTransform(translation=(5.0, 0.0, 0.0))
        out, origin = unify_frame(sweep, pose_t0, IDENT)
        assert np.allclose(out[0], [-5.0, 0.0, 0.0])
        assert np.allclose(origin, [-5.0, 0.0, 0.0])

    def test_rotated_ego_matrix_chain_oracle(self):
        pose_t = RigidTransform.from_rotation_z(np.pi / 2, (2.0, 1.0, 0.0))
        pose_t0 = RigidTransform.from_rotation_z(-np.pi / 4, (-1.0, 3.0, 0.5))
        mount = RigidTransform(translation=(0.2, 0.0, 1.5))
        sweep = sweep_at(0, [[1.0, 0.0, 0.0]], ego_pose=pose_t)
        out, origin = unify_frame(sweep, pose_t0, mount)
        chain = (
            np.linalg.inv(transform_to_mat4(pose_t0))
            @ transform_to_mat4(pose_t)
            @ transform_to_mat4(mount)
        )
        assert np.allclose(out[0], mat4_apply(chain, [1.0, 0.0, 0.0]), atol=1e-9)
        assert np.allclose(origin, mat4_apply(chain, [0.0, 0.0, 0.0]), atol=1e-9)


class TestSegmentSweep:
    def test_no_boxes_all_static(self):
        pts = np.random.default_rng(0).uniform(-5, 5, (20, 3))
        seg = segment_sweep(pts, np.zeros(3), [])
        assert np.array_equal(seg.static_points, pts)
        assert seg.dynamic_points == {}

    def test_box_captures_its_points(self):
        pts = np.array(
            [[0.1, 0.0, 0.0], [0.2, 0.1, 0.0], [-0.3, 0.0, 0.1]]
            + [[5.0 + i, 5.0, 0.0] for i in range(7)]
        )
        box = OrientedBox(IDENT, (1.0, 1.0, 1.0), "obj")
        seg = segment_sweep(pts, np.zeros(3), [box])
        assert seg.dynamic_points["obj"].shape[0] == 3
        assert seg.static_points.shape[0] == 7
        # brute-force containment cross-check
        for p in pts:
            inside = bool(np.all(np.abs(p) <= 1.0))
            in_dyn = any(np.array_equal(p, q) for q in seg.dynamic_points["obj"])
            assert inside == in_dyn

    def test_overlap_tiebreak_smallest_id(self):
        # Point equidistant from both centers: goes to lexicographically
        # smaller instance id.
        box_b = OrientedBox(RigidTransform(translation=(1.0, 0.0, 0.0)), (2.0, 2.0, 2.0), "b")
        box_a = OrientedBox(RigidTransform(translation=(-1.0, 0.0, 0.0)), (2.0, 2.0, 2.0), "a")
        seg = segment_sweep(np.array([[0.0, 0.0, 0.0]]), np.zeros(3), [box_b, box_a])
        assert "a" in seg.dynamic_points and "b" not in seg.dynamic_points

    def test_overlap_nearest_center_wins(self):
        box_a = OrientedBox(RigidTransform(translation=(-1.0, 0.0, 0.0)), (3.0, 3.0, 3.0), "a")
        box_b = OrientedBox(RigidTransform(translation=(1.0, 0.0, 0.0)), (3.0, 3.0, 3.0), "b")
        seg = segment_sweep(np.array([[0.5, 0.0, 0.0]]), np.zeros(3), [box_a, box_b])
        assert "b" in seg.dynamic_points

    def test_point_conservation(self):
        rng = np.random.default_rng(5)
        pts = rng.uniform(-10, 10, (500, 3))
        boxes = [
            OrientedBox(
                RigidTransform(rng.normal(size=4), rng.uniform(-8, 8, 3)),
                rng.uniform(0.5, 3.0, 3),
                f"obj{i}",
            )
            for i in range(5)
        ]
        seg = segment_sweep(pts, np.zeros(3), boxes)
        assert seg.num_points == 500

    def test_inflation_margin(self):
        box = OrientedBox(IDENT, (1.0, 1.0, 1.0), "obj")
        just_outside = np.array([[1.05, 0.0, 0.0]])
        assert segment_sweep(just_outside, np.zeros(3), [box]).dynamic_points == {}
        seg = segment_sweep(just_outside, np.zeros(3), [box], inflate=0.1)
        assert "obj" in seg.dynamic_points


class TestSyncObject:
    def test_same_pose_is_identity(self):
        pts = np.array([[1.0, 2.0, 3.0]])
        pose = RigidTransform.from_rotation_z(0.3, (1.0, 0.0, 0.0))
        assert np.array_equal(sync_object(pts, pose, pose), pts)

    def test_pure_translation(self):
        src = IDENT
        dst = RigidTransform(translation=(1.0, 0.0, 0.0))
        assert np.allclose(sync_object(np.zeros((1, 3)), src, dst), [[1.0, 0.0, 0.0]])

    def test_rotation_about_moved_center_oracle(self):
        # Box centered at (5,0,0) rotates 90 degrees in place: a point at
        # (6,0,0) rides to (5,1,0).
        src = RigidTransform(translation=(5.0, 0.0, 0.0))
        dst = RigidTransform.from_rotation_z(np.pi / 2, (5.0, 0.0, 0.0))
        out = sync_object(np.array([[6.0, 0.0, 0.0]]), src, dst)
        assert np.allclose(out[0], [5.0, 1.0, 0.0], atol=1e-12)
        chain = transform_to_mat4(dst) @ np.linalg.inv(transform_to_mat4(src))
        assert np.allclose(out[0], mat4_apply(chain, [6.0, 0.0, 0.0]), atol=1e-12)


def moving_box_sequence(n_frames=5, speed=1.0, n_static=30, seed=2):
    """Static wall of points plus one box moving +x at `speed` m/frame."""
    rng = np.random.default_rng(seed)
    static_pts = rng.uniform((-10, 8, 0), (10, 10, 2), size=(n_static, 3))
    half = np.array([1.0, 0.8, 0.5])
    sweeps, entries = [], {}
    for f in range(n_frames):
        center = np.array([speed * f, 0.0, 0.5])
        box = OrientedBox(RigidTransform(translation=center), half, "mover")
        entries[f] = box
        local = rng.uniform(-half, half, size=(20, 3))
        sweeps.append(sweep_at(f, np.vstack([static_pts, local + center])))
    track = InstanceBoxTrack("mover", entries)
    return RawSequence("movseq", sweeps, [track], IDENT)


class TestAggregateToTarget:
    def test_single_frame_window_matches_segment(self):
        seq = moving_box_sequence()
        agg = aggregate_to_target(seq, [2], target=2, t0=2)
        assert len(agg.frames) == 1
        sweep = seq.sweep_at(2)
        seg_pts = sweep.points
        assert agg.num_points == seg_pts.shape[0]
        assert np.array_equal(agg.dynamic_points["mover"], seq.sweep_at(2).points[30:])

    def test_static_only_is_plain_union(self):
        pts = np.random.default_rng(1).uniform(-5, 5, (15, 3))
        sweeps = [sweep_at(f, pts + 0.0) for f in range(3)]
        seq = RawSequence("s", sweeps, [], IDENT)
        agg = aggregate_to_target(seq, [0, 1, 2], target=1, t0=1)
        assert agg.static_points.shape[0] == 45
        assert np.allclose(agg.static_points[:15], pts)

    def test_synced_points_land_in_target_box(self):
        # Containment oracle: every synced dynamic point must lie inside the
        # target-frame annotation box (frame 4 of a +1 m/frame mover).
        seq = moving_box_sequence()
        agg = aggregate_to_target(seq, [0, 1, 2, 3, 4], target=4, t0=4)
        target_box = seq.track_by_id("mover").entries[4]
        synced = agg.dynamic_points["mover"]
        assert synced.shape[0] == 100
        assert target_box.contains(synced).all()

    def test_tube_without_sync(self):
        seq = moving_box_sequence()
        agg = aggregate_to_target(seq, [0, 1, 2, 3, 4], target=4, t0=4, synchronize=False)
        target_box = seq.track_by_id("mover").entries[4]
        inside = target_box.contains(agg.dynamic_points["mover"])
        assert not inside.all()  # stale points stay behind: the tube artifact

    def test_extent_collapse_vs_tube(self):
        seq = moving_box_sequence(speed=2.0)
        with_sync = aggregate_to_target(seq, [0, 1, 2, 3, 4], 4, 4)
        without = aggregate_to_target(seq, [0, 1, 2, 3, 4], 4, 4, synchronize=False)
        span_sync = np.ptp(with_sync.dynamic_points["mover"][:, 0])
        span_tube = np.ptp(without.dynamic_points["mover"][:, 0])
        assert span_sync <= 2.0 + 1e-9  # box x-extent
        assert span_tube > span_sync + 4.0  # roughly speed * window

    def test_missing_target_annotation_drops_points(self):
        seq = moving_box_sequence()
        entries = dict(seq.track_by_id("mover").entries)
        del entries[4]
        seq = RawSequence(
            "movseq", seq.sweeps, [InstanceBoxTrack("mover", entries)], seq.ego_to_sensor
        )
        agg = aggregate_to_target(seq, [0, 1, 2, 3], target=4, t0=4)
        assert "mover" not in agg.dynamic_points
        assert agg.dropped["mover"] == [0, 1, 2, 3]

    def test_point_conservation_with_sync(self):
        seq = moving_box_sequence()
        agg = aggregate_to_target(seq, [0, 1, 2, 3, 4], target=3, t0=2)
        total = sum(s.num_points for s in seq.sweeps)
        assert agg.num_points == total

    def test_static_fixed_point_across_targets(self):
        seq = moving_box_sequence()
        a = aggregate_to_target(seq, [0, 1, 2, 3, 4], target=1, t0=2)
        b = aggregate_to_target(seq, [0, 1, 2, 3, 4], target=4, t0=2)
        assert np.array_equal(a.static_points, b.static_points)

    def test_missing_window_frame_raises(self):
        seq = moving_box_sequence()
        with pytest.raises(RangeError):
            aggregate_to_target(seq, [3, 4, 5], target=4, t0=4)

    def test_one_origin_per_window_frame(self):
        seq = moving_box_sequence()
        agg = aggregate_to_target(seq, [0, 1, 2], target=2, t0=2)
        assert agg.sensor_origins.shape == (3, 3)
