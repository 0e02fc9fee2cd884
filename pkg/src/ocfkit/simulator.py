"""Synthetic scenes with an analytic LiDAR model.

Scenes are built from a ground plane, static boxes, and rigidly moving boxes
(linear velocity plus yaw rate about their own center), scanned by a ray-fan
sensor mounted on a scripted ego trajectory. Because every surface is
analytic, the expected occupancy and the observable region of any frame can
be computed independently of the curation pipeline, which makes the whole
pipeline testable without real driving data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, RangeError
from .geometry import GridSpec, OrientedBox, RigidTransform
from .raw_io import InstanceBoxTrack, LidarSweep, RawSequence

__all__ = [
    "SensorSpec",
    "DynamicBox",
    "SceneSpec",
    "simulate_sweep",
    "simulate_sequence",
    "analytic_occupancy",
    "analytic_observability",
    "load_scene",
    "scene_from_dict",
    "scene_to_dict",
]

_HIT_EPS = 1e-9

# Observability codes produced by `analytic_observability`.
UNREACHED = 0
TRAVERSED = 1
ENDPOINT = 2


@dataclass(frozen=True)
class SensorSpec:
    """Ray-fan pattern: azimuths uniform over 360 degrees, listed elevations."""

    n_azimuth: int = 64
    elevations_deg: tuple = (-15.0, -10.0, -6.0, -3.0, -1.0, 0.0, 1.0, 3.0)
    max_range: float = 80.0
    ego_to_sensor: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if self.n_azimuth < 1:
            raise ValueError("n_azimuth must be >= 1")
        if self.max_range <= 0:
            raise ValueError("max_range must be > 0")

    def directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame, shape (n_azimuth * n_elev, 3)."""
        az = 2.0 * np.pi * np.arange(self.n_azimuth) / self.n_azimuth
        el = np.deg2rad(np.asarray(self.elevations_deg, dtype=np.float64))
        azg, elg = np.meshgrid(az, el, indexing="ij")
        cos_el = np.cos(elg)
        dirs = np.stack([cos_el * np.cos(azg), cos_el * np.sin(azg), np.sin(elg)], axis=-1)
        return dirs.reshape(-1, 3)


@dataclass(frozen=True)
class DynamicBox:
    """A box moving with constant linear velocity and yaw rate about its center."""

    box: OrientedBox
    velocity: np.ndarray = (0.0, 0.0, 0.0)
    yaw_rate: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.velocity, dtype=np.float64).reshape(3).copy()
        v.setflags(write=False)
        object.__setattr__(self, "velocity", v)

    def pose_at(self, t: float) -> RigidTransform:
        """World-from-box pose at time t (seconds past the t=0 annotation)."""
        spin = RigidTransform.from_rotation_z(self.yaw_rate * t)
        rotation = spin.compose(RigidTransform(self.box.pose.rotation)).rotation
        return RigidTransform(rotation, self.box.pose.translation + self.velocity * t)

    def box_at(self, t: float) -> OrientedBox:
        return OrientedBox(self.pose_at(t), self.box.half_extents, self.box.instance_id)


@dataclass(frozen=True)
class SceneSpec:
    """Full scene description: geometry, sensor, and ego trajectory."""

    sensor: SensorSpec
    ego_trajectory: list[RigidTransform]
    ground_z: float | None = None
    static_boxes: list[OrientedBox] = field(default_factory=list)
    dynamic_boxes: list[DynamicBox] = field(default_factory=list)
    frame_rate: float = 10.0

    def __post_init__(self):
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be > 0")
        ids = [d.box.instance_id for d in self.dynamic_boxes]
        if len(ids) != len(set(ids)):
            raise ValueError("dynamic box instance ids must be unique")

    @property
    def n_frames(self) -> int:
        return len(self.ego_trajectory)

    def frame_time(self, frame: int) -> float:
        return frame / self.frame_rate

    def boxes_at_frame(self, frame: int) -> list[OrientedBox]:
        t = self.frame_time(frame)
        return list(self.static_boxes) + [d.box_at(t) for d in self.dynamic_boxes]


def _ray_box_hits(origin: np.ndarray, dirs: np.ndarray, box: OrientedBox) -> np.ndarray:
    """Slab test: entry distance per ray, +inf where the box is missed."""
    inv = box.pose.inverse()
    o = inv.apply(origin)
    d = dirs @ inv.rotation_matrix.T
    h = box.half_extents

    t_near = np.full(dirs.shape[0], -np.inf)
    t_far = np.full(dirs.shape[0], np.inf)
    for axis in range(3):
        da = d[:, axis]
        oa = o[axis]
        parallel = da == 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-h[axis] - oa) / da
            t2 = (h[axis] - oa) / da
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        inside = abs(oa) <= h[axis]
        lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
        t_near = np.maximum(t_near, lo)
        t_far = np.minimum(t_far, hi)

    hit = (t_near <= t_far) & (t_near > _HIT_EPS)
    return np.where(hit, t_near, np.inf)


def _trace_frame(scene: SceneSpec, frame: int):
    """Cast the frame's full ray fan against the scene.

    Returns (sensor_origin_world, dirs_world (R,3), t_hit (R,), hit_instance
    (R,) object array; '' for ground, None for no hit within max_range).
    """
    if frame < 0 or frame >= scene.n_frames:
        raise RangeError(f"frame {frame} outside trajectory of {scene.n_frames} poses")
    sensor_pose = scene.ego_trajectory[frame].compose(scene.sensor.ego_to_sensor)
    origin = sensor_pose.translation
    dirs = scene.sensor.directions() @ sensor_pose.rotation_matrix.T

    n = dirs.shape[0]
    t_best = np.full(n, np.inf)
    who = np.full(n, None, dtype=object)

    if scene.ground_z is not None:
        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (scene.ground_z - origin[2]) / dz
        ok = (dz != 0.0) & (t > _HIT_EPS) & (t < t_best)
        t_best = np.where(ok, t, t_best)
        who[ok] = ""

    t_frame = scene.frame_time(frame)
    boxes = list(scene.static_boxes) + [d.box_at(t_frame) for d in scene.dynamic_boxes]
    for box in boxes:
        t = _ray_box_hits(origin, dirs, box)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        who[closer] = box.instance_id

    in_range = t_best <= scene.sensor.max_range
    t_best = np.where(in_range, t_best, np.inf)
    who[~in_range] = None
    return origin, dirs, t_best, who


def simulate_sweep(scene: SceneSpec, frame: int) -> LidarSweep:
    """Scan the scene at `frame`; returns points in the sensor frame."""
    _, _, t_hit, _ = _trace_frame(scene, frame)
    hit = np.isfinite(t_hit)
    dirs_sensor = scene.sensor.directions()
    points = dirs_sensor[hit] * t_hit[hit, None]
    return LidarSweep(
        frame_index=frame,
        timestamp=scene.frame_time(frame),
        points=points,
        ego_pose=scene.ego_trajectory[frame],
        sensor_origin=scene.sensor.ego_to_sensor.apply(np.zeros(3)),
    )


def simulate_sequence(scene: SceneSpec, n_frames: int, sequence_id: str = "sim") -> RawSequence:
    """Simulate frames 0..n_frames-1 with exact per-frame box annotations."""
    if n_frames < 1:
        raise RangeError("n_frames must be >= 1")
    if n_frames > scene.n_frames:
        raise RangeError(
            f"requested {n_frames} frames but trajectory has {scene.n_frames} poses"
        )
    sweeps = [simulate_sweep(scene, f) for f in range(n_frames)]
    tracks = []
    for dyn in scene.dynamic_boxes:
        entries = {f: dyn.box_at(scene.frame_time(f)) for f in range(n_frames)}
        tracks.append(InstanceBoxTrack(dyn.box.instance_id, entries))
    return RawSequence(sequence_id, sweeps, tracks, scene.sensor.ego_to_sensor)


def _box_surface_distance(points: np.ndarray, box: OrientedBox) -> np.ndarray:
    """Unsigned distance from each point to the box surface."""
    local = np.abs(box.pose.inverse().apply(points)) - box.half_extents
    outside = np.linalg.norm(np.maximum(local, 0.0), axis=-1)
    inside = np.minimum(np.max(local, axis=-1), 0.0)
    return np.abs(outside + inside)


def analytic_occupancy(
    scene: SceneSpec, spec: GridSpec, frame: int, ego_pose_t0: RigidTransform
) -> np.ndarray:
    """Expected occupied voxels at `frame`, as a bool grid in the t0 ego frame.

    A voxel counts as occupied when its center lies within a surface band of
    1.5 voxel sizes of any scene surface. LiDAR aggregation can only ever
    populate a shell around surfaces, so the comparison is shell-vs-shell;
    the band absorbs discretization of the shell into voxels.
    """
    tau = 1.5 * float(np.max(spec.voxel_size))
    centers = spec.voxel_centers().reshape(-1, 3)
    centers_world = ego_pose_t0.apply(centers)

    occupied = np.zeros(centers_world.shape[0], dtype=bool)
    if scene.ground_z is not None:
        occupied |= np.abs(centers_world[:, 2] - scene.ground_z) <= tau
    for box in scene.boxes_at_frame(frame):
        occupied |= _box_surface_distance(centers_world, box) <= tau
    return occupied.reshape(tuple(int(d) for d in spec.dims))


def analytic_observability(
    scene: SceneSpec,
    spec: GridSpec,
    target_frame: int,
    window: list[int],
    ego_pose_t0: RigidTransform,
    step: float | None = None,
) -> np.ndarray:
    """Which voxels the window's rays can decide, by dense segment sampling.

    Mirrors the pipeline's ray set for one target frame: every window frame
    contributes its sensor origin and its returns, with returns on dynamic
    objects relocated to the object's target-frame pose. Segments are sampled
    at `step` meters (default: smallest voxel size / 16). Returns a uint8
    grid: 0 never reached, 1 traversed by some segment, 2 contains a return.
    """
    if step is None:
        step = float(np.min(spec.voxel_size)) / 16.0
    world_from_t0 = ego_pose_t0
    t0_from_world = world_from_t0.inverse()
    t_target = scene.frame_time(target_frame)

    state = np.zeros(tuple(int(d) for d in spec.dims), dtype=np.uint8)
    dyn_by_id = {d.box.instance_id: d for d in scene.dynamic_boxes}

    endpoint_cells = []
    for f in window:
        origin_w, dirs_w, t_hit, who = _trace_frame(scene, f)
        hit = np.isfinite(t_hit)
        if not np.any(hit):
            continue
        endpoints_w = origin_w + dirs_w[hit] * t_hit[hit, None]
        # Relocate returns on dynamic objects to their target-frame pose.
        t_f = scene.frame_time(f)
        for inst, dyn in dyn_by_id.items():
            sel = who[hit] == inst
            if not np.any(sel):
                continue
            move = dyn.pose_at(t_target).compose(dyn.pose_at(t_f).inverse())
            endpoints_w[sel] = move.apply(endpoints_w[sel])

        origin_t0 = t0_from_world.apply(origin_w)
        endpoints_t0 = t0_from_world.apply(endpoints_w)

        # One common sample count per frame (set by the longest segment) keeps
        # the sampling vectorized; shorter segments are simply oversampled.
        seg = endpoints_t0 - origin_t0
        longest = float(np.linalg.norm(seg, axis=1).max())
        n = max(int(np.ceil(longest / step)) + 1, 2)
        ts = np.linspace(0.0, 1.0, n)
        for chunk in np.array_split(np.arange(seg.shape[0]), max(1, seg.shape[0] // 512)):
            pts = origin_t0 + ts[None, :, None] * seg[chunk][:, None, :]
            idx, valid = spec.world_to_indices(pts.reshape(-1, 3))
            idx = idx[valid]
            state[idx[:, 0], idx[:, 1], idx[:, 2]] |= TRAVERSED

        end_idx, end_ok = spec.world_to_indices(endpoints_t0)
        endpoint_cells.append(end_idx[end_ok])

    for cells in endpoint_cells:
        state[cells[:, 0], cells[:, 1], cells[:, 2]] = ENDPOINT
    return state


def _box_to_dict(box: OrientedBox) -> dict:
    return {
        "instance_id": box.instance_id,
        "center": box.pose.translation.tolist(),
        "quaternion": box.pose.rotation.tolist(),
        "half_extents": box.half_extents.tolist(),
    }


def _box_from_dict(obj: dict) -> OrientedBox:
    return OrientedBox(
        RigidTransform(obj["quaternion"], obj["center"]),
        obj["half_extents"],
        str(obj["instance_id"]),
    )


def scene_to_dict(scene: SceneSpec) -> dict:
    return {
        "ground_z": scene.ground_z,
        "static_boxes": [_box_to_dict(b) for b in scene.static_boxes],
        "dynamic_boxes": [
            {
                "box": _box_to_dict(d.box),
                "velocity": d.velocity.tolist(),
                "yaw_rate": d.yaw_rate,
            }
            for d in scene.dynamic_boxes
        ],
        "sensor": {
            "n_azimuth": scene.sensor.n_azimuth,
            "elevations_deg": list(scene.sensor.elevations_deg),
            "max_range": scene.sensor.max_range,
            "ego_to_sensor": {
                "rotation": scene.sensor.ego_to_sensor.rotation.tolist(),
                "translation": scene.sensor.ego_to_sensor.translation.tolist(),
            },
        },
        "ego_trajectory": [
            {"rotation": p.rotation.tolist(), "translation": p.translation.tolist()}
            for p in scene.ego_trajectory
        ],
        "frame_rate": scene.frame_rate,
    }


def scene_from_dict(obj: dict) -> SceneSpec:
    try:
        sensor_obj = obj["sensor"]
        mount = sensor_obj.get("ego_to_sensor")
        sensor = SensorSpec(
            n_azimuth=int(sensor_obj["n_azimuth"]),
            elevations_deg=tuple(float(e) for e in sensor_obj["elevations_deg"]),
            max_range=float(sensor_obj["max_range"]),
            ego_to_sensor=(
                RigidTransform(mount["rotation"], mount["translation"])
                if mount
                else RigidTransform.identity()
            ),
        )
        trajectory = [
            RigidTransform(p["rotation"], p["translation"]) for p in obj["ego_trajectory"]
        ]
        return SceneSpec(
            sensor=sensor,
            ego_trajectory=trajectory,
            ground_z=obj.get("ground_z"),
            static_boxes=[_box_from_dict(b) for b in obj.get("static_boxes", [])],
            dynamic_boxes=[
                DynamicBox(
                    _box_from_dict(d["box"]),
                    d.get("velocity", (0.0, 0.0, 0.0)),
                    float(d.get("yaw_rate", 0.0)),
                )
                for d in obj.get("dynamic_boxes", [])
            ],
            frame_rate=float(obj.get("frame_rate", 10.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad scene description: {exc}") from exc


def load_scene(path) -> SceneSpec:
    """Read a scene JSON file (schema mirrors SceneSpec field for field)."""
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: cannot read scene file: {exc}") from exc
    return scene_from_dict(obj)
