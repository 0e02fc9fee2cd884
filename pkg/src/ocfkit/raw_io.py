"""Reading and writing raw sweep sequences in the on-disk interchange layout.

A sequence directory looks like::

    <seq>/
      manifest.json     sequence_id, ordered frame list, ego_to_sensor
                        extrinsic, optional per-frame timestamps
      poses.json        one world-from-ego pose per frame, in frame order
      boxes.json        frame index (as string) -> list of
                        {instance_id, center, quaternion, half_extents}
      points/NNNNNN.bin little-endian float32 (x, y, z) triples, sensor frame

Poses and box poses are quaternion (w, x, y, z) + translation. The format is
deliberately thin so converters from real autonomous-driving datasets stay
trivial; the heavy payload (points) stays binary and bit-exact across a
save/load round trip.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, DataError, FormatError, IoError
from .geometry import OrientedBox, RigidTransform

__all__ = [
    "LidarSweep",
    "InstanceBoxTrack",
    "RawSequence",
    "load_sequence",
    "save_sequence",
]

DEFAULT_FRAME_PERIOD = 0.1  # seconds; used when manifests omit timestamps


@dataclass(frozen=True, eq=False)
class LidarSweep:
    """One LiDAR scan: points in the sensor frame plus the ego pose."""

    frame_index: int
    timestamp: float
    points: np.ndarray
    ego_pose: RigidTransform
    sensor_origin: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError(f"sweep {self.frame_index}: non-finite point coordinates")
        pts.setflags(write=False)
        origin = np.asarray(self.sensor_origin, dtype=np.float64).reshape(3).copy()
        origin.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "sensor_origin", origin)

    @property
    def num_points(self) -> int:
        return int(self.points.shape[0])


@dataclass(frozen=True)
class InstanceBoxTrack:
    """Per-frame oriented-box trajectory of one annotated object."""

    instance_id: str
    entries: dict[int, OrientedBox] = field(default_factory=dict)

    def __post_init__(self):
        for frame, box in self.entries.items():
            if box.instance_id != self.instance_id:
                raise ValueError(
                    f"track {self.instance_id!r}: entry at frame {frame} "
                    f"carries id {box.instance_id!r}"
                )

    def pose_at(self, frame_index: int) -> OrientedBox | None:
        return self.entries.get(frame_index)

    @property
    def frames(self) -> list[int]:
        return sorted(self.entries)


@dataclass(frozen=True)
class RawSequence:
    """A full raw sequence: ordered sweeps, box tracks, sensor extrinsic."""

    sequence_id: str
    sweeps: list[LidarSweep]
    tracks: list[InstanceBoxTrack]
    ego_to_sensor: RigidTransform

    def __post_init__(self):
        frames = [s.frame_index for s in self.sweeps]
        if frames and frames != list(range(frames[0], frames[0] + len(frames))):
            raise ValueError("sweep frame indices must be consecutive integers")
        frame_set = set(frames)
        for track in self.tracks:
            missing = [f for f in track.entries if f not in frame_set]
            if missing:
                raise ValueError(
                    f"track {track.instance_id!r} annotates frames {missing} "
                    "that are not in the sequence"
                )
        ids = [t.instance_id for t in self.tracks]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate instance ids across tracks")

    @property
    def frames(self) -> list[int]:
        return [s.frame_index for s in self.sweeps]

    def sweep_at(self, frame_index: int) -> LidarSweep:
        first = self.sweeps[0].frame_index
        pos = frame_index - first
        if pos < 0 or pos >= len(self.sweeps):
            raise KeyError(f"frame {frame_index} not in sequence {self.sequence_id!r}")
        return self.sweeps[pos]

    def has_frame(self, frame_index: int) -> bool:
        if not self.sweeps:
            return False
        first = self.sweeps[0].frame_index
        return first <= frame_index < first + len(self.sweeps)

    def track_by_id(self, instance_id: str) -> InstanceBoxTrack | None:
        for track in self.tracks:
            if track.instance_id == instance_id:
                return track
        return None

    def boxes_at(self, frame_index: int) -> list[OrientedBox]:
        """All annotated boxes (world-from-box poses) at a frame, sorted by id."""
        boxes = []
        for track in self.tracks:
            box = track.entries.get(frame_index)
            if box is not None:
                boxes.append(box)
        return sorted(boxes, key=lambda b: b.instance_id)


def _pose_to_json(t: RigidTransform) -> dict:
    return {"rotation": t.rotation.tolist(), "translation": t.translation.tolist()}


def _pose_from_json(obj: dict, where: str) -> RigidTransform:
    try:
        return RigidTransform(obj["rotation"], obj["translation"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{where}: bad pose entry ({exc})") from exc


def _point_file(frame_index: int) -> str:
    return f"{frame_index:06d}.bin"


def save_sequence(seq: RawSequence, path) -> None:
    """Write `seq` to `path` in the interchange layout (see module docstring)."""
    root = Path(path)
    try:
        (root / "points").mkdir(parents=True, exist_ok=True)

        manifest = {
            "sequence_id": seq.sequence_id,
            "frames": seq.frames,
            "timestamps": [s.timestamp for s in seq.sweeps],
            "ego_to_sensor": _pose_to_json(seq.ego_to_sensor),
        }
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

        poses = [
            {"frame_index": s.frame_index, **_pose_to_json(s.ego_pose)} for s in seq.sweeps
        ]
        (root / "poses.json").write_text(json.dumps(poses, indent=2, sort_keys=True))

        boxes: dict[str, list] = {}
        for track in sorted(seq.tracks, key=lambda t: t.instance_id):
            for frame, box in sorted(track.entries.items()):
                boxes.setdefault(str(frame), []).append(
                    {
                        "instance_id": box.instance_id,
                        "center": box.pose.translation.tolist(),
                        "quaternion": box.pose.rotation.tolist(),
                        "half_extents": box.half_extents.tolist(),
                    }
                )
        (root / "boxes.json").write_text(json.dumps(boxes, indent=2, sort_keys=True))

        for sweep in seq.sweeps:
            payload = sweep.points.astype("<f4").tobytes()
            (root / "points" / _point_file(sweep.frame_index)).write_bytes(payload)
    except OSError as exc:
        raise IoError(f"cannot write sequence to {root}: {exc}") from exc


def _load_json(path: Path, what: str):
    if not path.is_file():
        raise FormatError(f"{path.parent}: missing {what} ({path.name})")
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable {what}: {exc}") from exc


def load_sequence(path) -> RawSequence:
    """Load and fully validate one sequence directory.

    Points are kept in the sensor frame exactly as stored; unification into
    the t=0 ego frame happens later in the curation stage.
    """
    root = Path(path)
    manifest = _load_json(root / "manifest.json", "manifest")

    try:
        sequence_id = str(manifest["sequence_id"])
        frames = [int(f) for f in manifest["frames"]]
        ego_to_sensor = _pose_from_json(manifest["ego_to_sensor"], "manifest.json")
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{root}/manifest.json: {exc}") from exc

    if frames and frames != list(range(frames[0], frames[0] + len(frames))):
        raise ConsistencyError(f"{root}: manifest frames are not consecutive")

    timestamps = manifest.get("timestamps")
    if timestamps is None:
        timestamps = [f * DEFAULT_FRAME_PERIOD for f in frames]
    elif len(timestamps) != len(frames):
        raise ConsistencyError(
            f"{root}: {len(timestamps)} timestamps for {len(frames)} frames"
        )

    poses_json = _load_json(root / "poses.json", "poses")
    if len(poses_json) != len(frames):
        raise ConsistencyError(
            f"{root}: {len(poses_json)} pose entries for {len(frames)} frames"
        )
    poses = {}
    for entry in poses_json:
        try:
            poses[int(entry["frame_index"])] = _pose_from_json(entry, "poses.json")
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{root}/poses.json: {exc}") from exc
    if set(poses) != set(frames):
        raise ConsistencyError(f"{root}: pose frame indices do not match manifest frames")

    boxes_json = _load_json(root / "boxes.json", "boxes") if (root / "boxes.json").is_file() else {}
    per_instance: dict[str, dict[int, OrientedBox]] = {}
    for frame_str, box_list in boxes_json.items():
        frame = int(frame_str)
        if frame not in poses:
            raise ConsistencyError(f"{root}: boxes.json annotates unknown frame {frame}")
        for obj in box_list:
            try:
                box = OrientedBox(
                    RigidTransform(obj["quaternion"], obj["center"]),
                    obj["half_extents"],
                    str(obj["instance_id"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{root}/boxes.json frame {frame}: {exc}") from exc
            per_instance.setdefault(box.instance_id, {})[frame] = box

    sensor_origin = ego_to_sensor.apply(np.zeros(3))
    sweeps = []
    for frame, stamp in zip(frames, timestamps):
        point_path = root / "points" / _point_file(frame)
        if not point_path.is_file():
            raise ConsistencyError(f"{root}: missing point file for frame {frame}")
        raw = np.frombuffer(point_path.read_bytes(), dtype="<f4")
        if raw.size % 3 != 0:
            raise FormatError(f"{point_path}: payload is not a whole number of xyz triples")
        pts = raw.reshape(-1, 3).astype(np.float64)
        bad = ~np.isfinite(pts)
        if bad.any():
            i = int(np.argwhere(bad.any(axis=1))[0][0])
            raise DataError(f"{root}: non-finite point (frame {frame}, point {i})")
        sweeps.append(
            LidarSweep(
                frame_index=frame,
                timestamp=float(stamp),
                points=pts,
                ego_pose=poses[frame],
                sensor_origin=sensor_origin,
            )
        )

    tracks = [
        InstanceBoxTrack(instance_id, entries)
        for instance_id, entries in sorted(per_instance.items())
    ]
    try:
        return RawSequence(sequence_id, sweeps, tracks, ego_to_sensor)
    except ValueError as exc:
        raise ConsistencyError(f"{root}: {exc}") from exc


def discover_sequences(raw_dir) -> list[Path]:
    """Sequence subdirectories of a raw corpus directory, sorted by name."""
    root = Path(raw_dir)
    if not root.is_dir():
        raise FormatError(f"{root}: not a directory")
    found = sorted(p for p in root.iterdir() if (p / "manifest.json").is_file())
    if not found:
        raise FormatError(f"{root}: no sequence subdirectories with a manifest.json")
    return found
