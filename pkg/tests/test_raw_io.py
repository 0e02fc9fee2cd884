import hashlib
import json

import numpy as np
import pytest

from ocfkit.errors import ConsistencyError, DataError, FormatError
from ocfkit.geometry import OrientedBox, RigidTransform
from ocfkit.raw_io import (
    InstanceBoxTrack,
    LidarSweep,
    RawSequence,
    discover_sequences,
    load_sequence,
    save_sequence,
)


def make_sequence(n_frames=2, n_points=10, with_track=True, seed=0):
    rng = np.random.default_rng(seed)
    sweeps = []
    for f in range(n_frames):
        pts = rng.uniform(-20, 20, size=(n_points, 3)).astype(np.float32).astype(np.float64)
        pose = RigidTransform.from_rotation_z(0.01 * f, (1.0 * f, 0.0, 0.0))
        sweeps.append(
            LidarSweep(
                frame_index=f,
                timestamp=0.1 * f,
                points=pts,
                ego_pose=pose,
                sensor_origin=np.array([0.0, 0.0, 1.6]),
            )
        )
    tracks = []
    if with_track:
        entries = {
            f: OrientedBox(
                RigidTransform(translation=(5.0 + f, 2.0, 0.5)), (2.0, 1.0, 0.8), "car_1"
            )
            for f in range(n_frames)
        }
        tracks.append(InstanceBoxTrack("car_1", entries))
    ego_to_sensor = RigidTransform(translation=(0.0, 0.0, 1.6))
    return RawSequence("seq_a", sweeps, tracks, ego_to_sensor)


def sequences_equal(a: RawSequence, b: RawSequence) -> bool:
    if a.sequence_id != b.sequence_id or a.ego_to_sensor != b.ego_to_sensor:
        return False
    if len(a.sweeps) != len(b.sweeps) or len(a.tracks) != len(b.tracks):
        return False
    for sa, sb in zip(a.sweeps, b.sweeps):
        if sa.frame_index != sb.frame_index or sa.timestamp != sb.timestamp:
            return False
        if not np.array_equal(sa.points, sb.points):
            return False
        if sa.ego_pose != sb.ego_pose:
            return False
    for ta, tb in zip(a.tracks, b.tracks):
        if ta.instance_id != tb.instance_id or ta.entries != tb.entries:
            return False
    return True


class TestRoundTrip:
    def test_two_frame_round_trip(self, tmp_path):
        seq = make_sequence()
        save_sequence(seq, tmp_path / "seq_a")
        assert sequences_equal(load_sequence(tmp_path / "seq_a"), seq)

    def test_empty_tracks(self, tmp_path):
        seq = make_sequence(with_track=False)
        save_sequence(seq, tmp_path / "s")
        loaded = load_sequence(tmp_path / "s")
        assert loaded.tracks == []

    def test_point_payload_bit_exact(self, tmp_path):
        seq = make_sequence(n_points=10_000)
        save_sequence(seq, tmp_path / "s")
        first = hashlib.sha256((tmp_path / "s/points/000000.bin").read_bytes()).hexdigest()
        loaded = load_sequence(tmp_path / "s")
        save_sequence(loaded, tmp_path / "s2")
        second = hashlib.sha256((tmp_path / "s2/points/000000.bin").read_bytes()).hexdigest()
        assert first == second


class TestValidation:
    def test_missing_manifest(self, tmp_path):
        (tmp_path / "seq").mkdir()
        with pytest.raises(FormatError):
            load_sequence(tmp_path / "seq")

    def test_pose_count_mismatch(self, tmp_path):
        seq = make_sequence(n_frames=3)
        save_sequence(seq, tmp_path / "s")
        poses = json.loads((tmp_path / "s/poses.json").read_text())
        (tmp_path / "s/poses.json").write_text(json.dumps(poses[:2]))
        with pytest.raises(ConsistencyError):
            load_sequence(tmp_path / "s")

    def test_missing_point_file(self, tmp_path):
        seq = make_sequence(n_frames=3)
        save_sequence(seq, tmp_path / "s")
        (tmp_path / "s/points/000002.bin").unlink()
        with pytest.raises(ConsistencyError):
            load_sequence(tmp_path / "s")

    def test_non_finite_point_reports_location(self, tmp_path):
        seq = make_sequence()
        save_sequence(seq, tmp_path / "s")
        pts = np.fromfile(tmp_path / "s/points/000001.bin", dtype="<f4").reshape(-1, 3)
        pts[3, 1] = np.nan
        (tmp_path / "s/points/000001.bin").write_bytes(pts.tobytes())
        with pytest.raises(DataError, match=r"frame 1.*point 3"):
            load_sequence(tmp_path / "s")

    def test_ragged_payload(self, tmp_path):
        seq = make_sequence()
        save_sequence(seq, tmp_path / "s")
        raw = (tmp_path / "s/points/000000.bin").read_bytes()
        (tmp_path / "s/points/000000.bin").write_bytes(raw[:-4])
        with pytest.raises(FormatError):
            load_sequence(tmp_path / "s")

    def test_track_frames_must_exist(self):
        sweep = LidarSweep(0, 0.0, np.zeros((1, 3)), RigidTransform.identity(), np.zeros(3))
        box = OrientedBox(RigidTransform.identity(), (1, 1, 1), "x")
        track = InstanceBoxTrack("x", {5: box})
        with pytest.raises(ValueError):
            RawSequence("s", [sweep], [track], RigidTransform.identity())

    def test_non_consecutive_frames_rejected(self):
        s0 = LidarSweep(0, 0.0, np.zeros((1, 3)), RigidTransform.identity(), np.zeros(3))
        s2 = LidarSweep(2, 0.2, np.zeros((1, 3)), RigidTransform.identity(), np.zeros(3))
        with pytest.raises(ValueError):
            RawSequence("s", [s0, s2], [], RigidTransform.identity())

    def test_track_id_mismatch_rejected(self):
        box = OrientedBox(RigidTransform.identity(), (1, 1, 1), "y")
        with pytest.raises(ValueError):
            InstanceBoxTrack("x", {0: box})


class TestDiscovery:
    def test_discover_sorted(self, tmp_path):
        for name in ["b_seq", "a_seq"]:
            save_sequence(make_sequence(), tmp_path / name)
        found = discover_sequences(tmp_path)
        assert [p.name for p in found] == ["a_seq", "b_seq"]

    def test_discover_empty_raises(self, tmp_path):
        with pytest.raises(FormatError):
            discover_sequences(tmp_path)

    def test_simulated_sequence_survives_reparse(self, tmp_path):
        # Independence check: a 20-frame simulator output reloads with all
        # invariants holding and identical payloads.
        from ocfkit.simulator import SceneSpec, SensorSpec, simulate_sequence

        scene = SceneSpec(
            sensor=SensorSpec(n_azimuth=16, elevations_deg=(-5.0, 0.0), max_range=40.0),
            ego_trajectory=[RigidTransform(translation=(0.5 * f, 0.0, 1.5)) for f in range(20)],
            ground_z=0.0,
        )
        seq = simulate_sequence(scene, 20, "sim20")
        save_sequence(seq, tmp_path / "sim20")
        loaded = load_sequence(tmp_path / "sim20")
        assert len(loaded.sweeps) == 20
        assert loaded.frames == list(range(20))
        # float32 storage: reload agrees with the simulated points to f32 eps
        for a, b in zip(loaded.sweeps, seq.sweeps):
            assert a.points.shape == b.points.shape
            assert np.allclose(a.points, b.points, atol=1e-4)
