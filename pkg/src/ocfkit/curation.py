"""Sweep unification, instance segmentation, and motion-compensated aggregation.

The stages here turn raw sweeps into point sets ready for voxelization:

1. unify_frame: express a sweep (and its sensor origin) in the t=0 ego frame,
   removing ego motion from what a forecaster must model.
2. segment_sweep: split points into static background and per-instance
   dynamic groups using the frame's annotation boxes.
3. sync_object: re-pose one instance's points from its capture-time box pose
   to the target-frame box pose, so superimposing sweeps does not smear
   moving objects into spatial-temporal tubes.
4. aggregate_to_target: run 1-3 over a window of frames for one target frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import RangeError
from .geometry import OrientedBox, RigidTransform
from .raw_io import LidarSweep, RawSequence

__all__ = [
    "SegmentedSweep",
    "FrameAggregate",
    "AggregatedSweeps",
    "unify_frame",
    "segment_sweep",
    "sync_object",
    "aggregate_to_target",
]

_EMPTY_POINTS = np.zeros((0, 3), dtype=np.float64)


@dataclass(frozen=True)
class SegmentedSweep:
    """One unified sweep split into static background and per-instance points.

    Dynamic points are still at the pose the object had at `frame_index`;
    synchronization to another frame happens in `sync_object`.
    """

    frame_index: int
    static_points: np.ndarray
    dynamic_points: dict[str, np.ndarray]
    sensor_origin_unified: np.ndarray

    @property
    def num_points(self) -> int:
        return int(self.static_points.shape[0]) + sum(
            int(p.shape[0]) for p in self.dynamic_points.values()
        )


def unify_frame(
    sweep: LidarSweep, ego_pose_t0: RigidTransform, ego_to_sensor: RigidTransform
) -> tuple[np.ndarray, np.ndarray]:
    """Express a sweep's points and sensor origin in the t=0 ego frame.

    Each sensor-frame point p maps through
    inverse(ego_pose_t0) * sweep.ego_pose * ego_to_sensor * p.
    """
    chain = ego_pose_t0.inverse().compose(sweep.ego_pose).compose(ego_to_sensor)
    points = chain.apply(sweep.points) if sweep.num_points else _EMPTY_POINTS
    origin = chain.apply(np.zeros(3))
    return points, origin


def segment_sweep(
    points: np.ndarray,
    sensor_origin: np.ndarray,
    boxes: list[OrientedBox],
    frame_index: int = 0,
    inflate: float = 0.0,
) -> SegmentedSweep:
    """Assign each point to at most one annotation box; the rest is static.

    A point inside several boxes goes to the box with the nearest center;
    exact distance ties go to the smallest instance_id. `inflate` adds a
    margin (meters) to every half extent before the containment test.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    if not boxes or n == 0:
        return SegmentedSweep(frame_index, points, {}, np.asarray(sensor_origin, float))

    best_dist = np.full(n, np.inf)
    owner = np.full(n, -1, dtype=np.int64)
    for b, box in enumerate(sorted(boxes, key=lambda bx: bx.instance_id)):
        inside = box.inflated(inflate).contains(points)
        if not np.any(inside):
            continue
        dist = np.linalg.norm(points - box.center, axis=1)
        # Strict < keeps the earlier (smaller-id) box on exact ties.
        better = inside & (dist < best_dist)
        owner[better] = b
        best_dist[better] = dist[better]

    ordered = sorted(boxes, key=lambda bx: bx.instance_id)
    dynamic: dict[str, np.ndarray] = {}
    for b, box in enumerate(ordered):
        sel = owner == b
        if np.any(sel):
            dynamic[box.instance_id] = points[sel]
    static = points[owner == -1]
    return SegmentedSweep(frame_index, static, dynamic, np.asarray(sensor_origin, float))


def sync_object(
    points: np.ndarray, box_pose_src: RigidTransform, box_pose_dst: RigidTransform
) -> np.ndarray:
    """Carry points rigidly attached to a box from its src pose to its dst pose."""
    if box_pose_src == box_pose_dst:
        return np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return box_pose_dst.compose(box_pose_src.inverse()).apply(points)


@dataclass(frozen=True)
class FrameAggregate:
    """One window frame's contribution to a target: origin plus point groups."""

    frame_index: int
    sensor_origin: np.ndarray
    static_points: np.ndarray
    dynamic_points: dict[str, np.ndarray]

    @property
    def endpoints(self) -> np.ndarray:
        """All of this frame's points (ray endpoints), stacked."""
        groups = [self.static_points] + [
            self.dynamic_points[k] for k in sorted(self.dynamic_points)
        ]
        return np.concatenate(groups, axis=0) if groups else _EMPTY_POINTS


@dataclass(frozen=True)
class AggregatedSweeps:
    """Window aggregation for one target frame, in the t0 ego frame."""

    target_frame: int
    t0_frame: int
    frames: list[FrameAggregate]
    dropped: dict[str, list[int]] = field(default_factory=dict)

    @property
    def static_points(self) -> np.ndarray:
        parts = [f.static_points for f in self.frames]
        return np.concatenate(parts, axis=0) if parts else _EMPTY_POINTS

    @property
    def dynamic_points(self) -> dict[str, np.ndarray]:
        merged: dict[str, list[np.ndarray]] = {}
        for f in self.frames:
            for inst, pts in f.dynamic_points.items():
                merged.setdefault(inst, []).append(pts)
        return {inst: np.concatenate(parts, axis=0) for inst, parts in sorted(merged.items())}

    @property
    def sensor_origins(self) -> np.ndarray:
        return np.stack([f.sensor_origin for f in self.frames], axis=0)

    @property
    def all_points(self) -> np.ndarray:
        parts = [f.endpoints for f in self.frames]
        return np.concatenate(parts, axis=0) if parts else _EMPTY_POINTS

    def rays(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-frame (sensor origin, endpoints) pairs for free-space carving."""
        return [(f.sensor_origin, f.endpoints) for f in self.frames]

    @property
    def num_points(self) -> int:
        return sum(int(f.endpoints.shape[0]) for f in self.frames)


def _segment_window(
    seq: RawSequence, window: list[int], t0: int, inflate: float = 0.0
) -> list[SegmentedSweep]:
    """Unify and segment every window frame into the t0 ego frame."""
    for f in list(window) + [t0]:
        if not seq.has_frame(f):
            raise RangeError(f"sequence {seq.sequence_id!r} has no frame {f}")
    ego_pose_t0 = seq.sweep_at(t0).ego_pose
    to_t0 = ego_pose_t0.inverse()

    segmented = []
    for f in window:
        sweep = seq.sweep_at(f)
        points, origin = unify_frame(sweep, ego_pose_t0, seq.ego_to_sensor)
        boxes_t0 = [box.transformed(to_t0) for box in seq.boxes_at(f)]
        segmented.append(segment_sweep(points, origin, boxes_t0, f, inflate))
    return segmented


def _sync_segments(
    seq: RawSequence,
    segmented: list[SegmentedSweep],
    target: int,
    t0: int,
    synchronize: bool = True,
) -> AggregatedSweeps:
    """Re-pose each instance's points to its target-frame pose (t0 ego frame)."""
    to_t0 = seq.sweep_at(t0).ego_pose.inverse()
    target_pose: dict[str, RigidTransform] = {}
    for track in seq.tracks:
        box = track.entries.get(target)
        if box is not None:
            target_pose[track.instance_id] = to_t0.compose(box.pose)

    frames = []
    dropped: dict[str, list[int]] = {}
    for seg in segmented:
        synced: dict[str, np.ndarray] = {}
        for inst, pts in seg.dynamic_points.items():
            if not synchronize:
                synced[inst] = pts
                continue
            dst = target_pose.get(inst)
            if dst is None:
                # Object has no annotation at the target frame (left the
                # scene); freezing its stale points would fabricate geometry.
                dropped.setdefault(inst, []).append(seg.frame_index)
                continue
            if seg.frame_index == target:
                synced[inst] = pts
                continue
            src_box = seq.track_by_id(inst).entries.get(seg.frame_index)
            src = to_t0.compose(src_box.pose)
            synced[inst] = sync_object(pts, src, dst)
        frames.append(
            FrameAggregate(seg.frame_index, seg.sensor_origin_unified, seg.static_points, synced)
        )
    return AggregatedSweeps(target, t0, frames, dropped)


def aggregate_to_target(
    seq: RawSequence,
    window: list[int],
    target: int,
    t0: int,
    synchronize: bool = True,
    inflate: float = 0.0,
) -> AggregatedSweeps:
    """Aggregate a window of sweeps for one target frame, in the t0 ego frame.

    Static points are the plain union of unified static points; each
    instance's points are carried from their capture-frame box pose to the
    target-frame box pose. Instances without a target-frame annotation are
    dropped (recorded in `.dropped`). One sensor origin per window frame is
    preserved for ray casting.
    """
    if not seq.has_frame(target):
        raise RangeError(f"sequence {seq.sequence_id!r} has no frame {target}")
    segmented = _segment_window(seq, window, t0, inflate)
    return _sync_segments(seq, segmented, target, t0, synchronize)
