"""Voxelization, free-space carving by ray traversal, and 3-state grids.

A target grid distinguishes three states. OCCUPIED cells contain enough
aggregated returns; FREE cells were pierced by at least one sensor ray
without holding a return; everything else is UNKNOWN and excluded from
supervision and evaluation. Precedence is OCCUPIED > FREE > UNKNOWN: a
measured return beats free-space inference from a grazing ray.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InternalError, RangeError
from .geometry import GridSpec, RigidTransform
from .raw_io import RawSequence
from .curation import _segment_window, _sync_segments, unify_frame

__all__ = [
    "FREE",
    "OCCUPIED",
    "UNKNOWN",
    "OccupancyGrid",
    "Sample",
    "voxelize",
    "traverse_ray",
    "visited_volume",
    "build_target_grid",
    "build_sample",
]

FREE = 0
OCCUPIED = 1
UNKNOWN = 2

_STATE_NAMES = {FREE: "FREE", OCCUPIED: "OCCUPIED", UNKNOWN: "UNKNOWN"}


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """Dense 3-state voxel grid over a GridSpec; states array is (nx, ny, nz)."""

    spec: GridSpec
    states: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.uint8)
        expected = tuple(int(d) for d in self.spec.dims)
        if states.shape != expected:
            raise ValueError(f"states shape {states.shape} does not match dims {expected}")
        if states.max(initial=0) > UNKNOWN:
            raise ValueError("states must be FREE (0), OCCUPIED (1), or UNKNOWN (2)")
        states = states.copy()
        states.setflags(write=False)
        object.__setattr__(self, "states", states)

    @property
    def occupied_mask(self) -> np.ndarray:
        return self.states == OCCUPIED

    @property
    def free_mask(self) -> np.ndarray:
        return self.states == FREE

    @property
    def unknown_mask(self) -> np.ndarray:
        return self.states == UNKNOWN

    @property
    def num_occupied(self) -> int:
        return int(np.count_nonzero(self.states == OCCUPIED))

    @property
    def is_binary(self) -> bool:
        """True when no cell is UNKNOWN (input grids must be binary)."""
        return not bool(np.any(self.states == UNKNOWN))

    def __eq__(self, other) -> bool:
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.states, other.states)


@dataclass(frozen=True, eq=False)
class Sample:
    """One training/eval example: input sweeps plus per-step target grids.

    inputs[k] is the voxelized single sweep at t = -T_in + k (binary);
    targets[k] is the completed 3-state grid at t = +k. Everything shares
    one GridSpec and lives in the t=0 ego frame.
    """

    sequence_id: str
    t0_frame: int
    inputs: list
    targets: list

    def __post_init__(self):
        if not self.inputs or not self.targets:
            raise ValueError("a sample needs at least one input and one target grid")
        spec = self.inputs[0].spec
        for grid in list(self.inputs) + list(self.targets):
            if grid.spec != spec:
                raise ValueError("all grids in a sample must share one GridSpec")
        for k, grid in enumerate(self.inputs):
            if not grid.is_binary:
                raise ValueError(f"input grid {k} contains UNKNOWN cells")

    @property
    def spec(self) -> GridSpec:
        return self.inputs[0].spec

    @property
    def t_in(self) -> int:
        return len(self.inputs) - 1

    @property
    def t_out(self) -> int:
        return len(self.targets) - 1

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.sequence_id == other.sequence_id
            and self.t0_frame == other.t0_frame
            and len(self.inputs) == len(other.inputs)
            and len(self.targets) == len(other.targets)
            and all(a == b for a, b in zip(self.inputs, other.inputs))
            and all(a == b for a, b in zip(self.targets, other.targets))
        )


def voxelize(points: np.ndarray, spec: GridSpec, min_points: int = 1) -> OccupancyGrid:
    """Bin points into the grid; a cell is OCCUPIED iff it holds >= min_points.

    Out-of-bounds points are ignored. The result is binary (FREE elsewhere).
    """
    if min_points < 1:
        raise ValueError("min_points must be >= 1")
    dims = tuple(int(d) for d in spec.dims)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    states = np.zeros(dims, dtype=np.uint8)
    if points.shape[0]:
        idx, valid = spec.world_to_indices(points)
        idx = idx[valid]
        if idx.shape[0]:
            flat = np.ravel_multi_index((idx[:, 0], idx[:, 1], idx[:, 2]), dims)
            counts = np.bincount(flat, minlength=spec.num_cells)
            states.reshape(-1)[counts >= min_points] = OCCUPIED
    return OccupancyGrid(spec, states)


def _clip_segment_param(lo, hi, origin, delta):
    """Parameter interval of segment origin+t*delta inside [lo, hi), per axis.

    Returns (t_enter, t_exit) clipped to [0, 1]; empty when t_enter >= t_exit.
    Scalar version used by the single-ray reference traversal.
    """
    t0, t1 = 0.0, 1.0
    for ax in range(3):
        d = delta[ax]
        o = origin[ax]
        if d == 0.0:
            if not (lo[ax] <= o < hi[ax]):
                return 1.0, 0.0
            continue
        ta = (lo[ax] - o) / d
        tb = (hi[ax] - o) / d
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
    return t0, t1


def traverse_ray(spec: GridSpec, origin, endpoint) -> list[tuple[int, int, int]]:
    """Cells whose interior the open segment origin->endpoint crosses, in order.

    The cell containing the endpoint is excluded (a return is evidence of
    occupancy there, not of free space). Cells merely touched at a face or
    corner are skipped: at an exact corner crossing all tied axes advance at
    the same parameter value, so the would-be corner cell has zero dwell.
    Segments fully outside the grid yield an empty list.
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    endpoint = np.asarray(endpoint, dtype=np.float64).reshape(3)
    if not (np.all(np.isfinite(origin)) and np.all(np.isfinite(endpoint))):
        raise ValueError("ray origin and endpoint must be finite")
    if np.array_equal(origin, endpoint):
        raise ValueError("ray origin and endpoint coincide")

    lo = spec.origin
    hi = spec.max_corner
    delta = endpoint - origin
    t0, t1 = _clip_segment_param(lo, hi, origin, delta)
    if t0 >= t1:
        return []

    entry = origin + t0 * delta
    cur = np.floor((entry - lo) / spec.voxel_size).astype(np.int64)
    cur = np.clip(cur, 0, spec.dims - 1)
    end_cell = spec.world_to_index(endpoint)

    step = np.sign(delta).astype(np.int64)
    tmax = np.empty(3)
    tdelta = np.empty(3)
    for ax in range(3):
        if delta[ax] == 0.0:
            tmax[ax] = np.inf
            tdelta[ax] = np.inf
        else:
            next_boundary = lo[ax] + (cur[ax] + (1 if step[ax] > 0 else 0)) * spec.voxel_size[ax]
            tmax[ax] = (next_boundary - origin[ax]) / delta[ax]
            tdelta[ax] = spec.voxel_size[ax] / abs(delta[ax])

    cells: list[tuple[int, int, int]] = []
    t_cur = t0
    max_steps = int(np.sum(spec.dims)) + 8
    for _ in range(max_steps):
        here = (int(cur[0]), int(cur[1]), int(cur[2]))
        if here == end_cell:
            break
        t_min = float(np.min(tmax))
        if min(t_min, t1) > t_cur:  # positive dwell: the interior is crossed
            cells.append(here)
        if t_min >= t1:
            break
        for ax in range(3):  # advance every tied axis at once
            if tmax[ax] == t_min:
                cur[ax] += step[ax]
                tmax[ax] += tdelta[ax]
        if np.any(cur < 0) or np.any(cur >= spec.dims):
            break
        t_cur = t_min
    else:
        raise InternalError("ray traversal failed to terminate")
    return cells


def visited_volume(spec: GridSpec, origins: np.ndarray, endpoints: np.ndarray) -> np.ndarray:
    """Union of traverse_ray visits for a ray batch, as a bool volume.

    Vectorized lockstep variant of `traverse_ray`: all rays advance one grid
    crossing per iteration, with tied axes stepped together. Endpoint cells
    are excluded per ray exactly as in the single-ray version.
    """
    dims = tuple(int(d) for d in spec.dims)
    visited = np.zeros(dims, dtype=bool)
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    endpoints = np.atleast_2d(np.asarray(endpoints, dtype=np.float64))
    if origins.shape[0] == 1 and endpoints.shape[0] > 1:
        origins = np.broadcast_to(origins, endpoints.shape)
    if origins.shape != endpoints.shape:
        raise ValueError("origins and endpoints must have matching shapes")
    n = origins.shape[0]
    if n == 0:
        return visited

    lo = spec.origin
    hi = spec.max_corner
    delta = endpoints - origins

    # Clip every segment's parameter range to the grid box.
    t0 = np.zeros(n)
    t1 = np.ones(n)
    for ax in range(3):
        d = delta[:, ax]
        o = origins[:, ax]
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo[ax] - o) / d
            tb = (hi[ax] - o) / d
        t_lo = np.minimum(ta, tb)
        t_hi = np.maximum(ta, tb)
        parallel = d == 0.0
        inside = (o >= lo[ax]) & (o < hi[ax])
        t_lo = np.where(parallel, np.where(inside, -np.inf, np.inf), t_lo)
        t_hi = np.where(parallel, np.where(inside, np.inf, -np.inf), t_hi)
        t0 = np.maximum(t0, t_lo)
        t1 = np.minimum(t1, t_hi)
    alive = (t0 < t1) & np.any(delta != 0.0, axis=1)
    if not np.any(alive):
        return visited

    entry = origins + t0[:, None] * delta
    cur = np.clip(np.floor((entry - lo) / spec.voxel_size).astype(np.int64), 0, spec.dims - 1)

    end_frac = np.floor((endpoints - lo) / spec.voxel_size).astype(np.int64)
    end_inside = np.all((end_frac >= 0) & (end_frac < spec.dims), axis=1)

    step = np.sign(delta).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        next_boundary = lo + (cur + (step > 0)) * spec.voxel_size
        tmax = (next_boundary - origins) / delta
        tdelta = spec.voxel_size / np.abs(delta)
    zero = delta == 0.0
    tmax[zero] = np.inf
    tdelta[zero] = np.inf

    max_steps = int(np.sum(spec.dims)) + 8
    for _ in range(max_steps):
        at_end = alive & end_inside & np.all(cur == end_frac, axis=1)
        emit = alive & ~at_end
        if np.any(emit):
            visited[cur[emit, 0], cur[emit, 1], cur[emit, 2]] = True
        alive &= ~at_end
        if not np.any(alive):
            break
        t_min = np.min(tmax, axis=1)
        alive &= t_min < t1
        if not np.any(alive):
            break
        stepped = alive[:, None] & (tmax == t_min[:, None])
        cur = np.where(stepped, cur + step, cur)
        tmax = np.where(stepped, tmax + tdelta, tmax)
        alive &= np.all((cur >= 0) & (cur < spec.dims), axis=1)
    else:
        if np.any(alive):
            raise InternalError("batched ray traversal failed to terminate")
    return visited


def build_target_grid(
    static_points: np.ndarray,
    dynamic_points,
    rays,
    spec: GridSpec,
    min_points: int = 1,
) -> OccupancyGrid:
    """Fuse aggregated points and carving rays into one 3-state target grid.

    `dynamic_points` is a mapping instance_id -> (K,3) array (or None);
    `rays` is a list of (origin (3,), endpoints (K,3)) pairs, one per window
    frame. Rays whose endpoint lies outside the grid are clipped at the grid
    boundary and still carve free space along the clipped span.
    """
    groups = [np.asarray(static_points, dtype=np.float64).reshape(-1, 3)]
    if dynamic_points:
        for inst in sorted(dynamic_points):
            groups.append(np.asarray(dynamic_points[inst], dtype=np.float64).reshape(-1, 3))
    all_points = np.concatenate(groups, axis=0)

    occ = voxelize(all_points, spec, min_points).states == OCCUPIED

    states = np.full(tuple(int(d) for d in spec.dims), UNKNOWN, dtype=np.uint8)
    for origin, endpoints in rays:
        endpoints = np.asarray(endpoints, dtype=np.float64).reshape(-1, 3)
        if endpoints.shape[0] == 0:
            continue
        keep = ~np.all(endpoints == np.asarray(origin, float), axis=1)
        if not np.any(keep):
            continue
        seen = visited_volume(spec, np.asarray(origin, float)[None, :], endpoints[keep])
        states[seen] = FREE
    states[occ] = OCCUPIED
    return OccupancyGrid(spec, states)


def build_sample(
    seq: RawSequence,
    t0_frame: int,
    t_in: int,
    t_out: int,
    spec: GridSpec,
    min_points: int = 1,
    context: int = 0,
    synchronize: bool = True,
    pooled_rays: bool = False,
    inflate: float = 0.0,
) -> Sample:
    """Build one sample anchored at t0_frame from a raw sequence.

    Inputs are single-sweep voxelizations of frames t0-t_in..t0; targets are
    aggregated 3-state grids for frames t0..t0+t_out. The aggregation window
    is the sample's own span, optionally widened by `context` frames on each
    side (clamped to the sequence). With `pooled_rays` the unknown-space
    carving is computed once from capture-pose returns and shared by all
    targets instead of re-synced per target frame.
    """
    if t_in < 0 or t_out < 0:
        raise RangeError("t_in and t_out must be >= 0")
    span = list(range(t0_frame - t_in, t0_frame + t_out + 1))
    for f in span:
        if not seq.has_frame(f):
            raise RangeError(
                f"sequence {seq.sequence_id!r}: frame {f} needed by anchor "
                f"{t0_frame} (t_in={t_in}, t_out={t_out}) is missing"
            )
    first, last = seq.frames[0], seq.frames[-1]
    window = list(
        range(max(first, span[0] - context), min(last, span[-1] + context) + 1)
    )

    ego_pose_t0 = seq.sweep_at(t0_frame).ego_pose
    inputs = []
    for f in range(t0_frame - t_in, t0_frame + 1):
        points, _ = unify_frame(seq.sweep_at(f), ego_pose_t0, seq.ego_to_sensor)
        inputs.append(voxelize(points, spec, min_points))

    segmented = _segment_window(seq, window, t0_frame, inflate)
    pooled_free = None
    if pooled_rays:
        pooled = _sync_segments(seq, segmented, t0_frame, t0_frame, synchronize=False)
        pooled_free = np.zeros(tuple(int(d) for d in spec.dims), dtype=bool)
        for origin, endpoints in pooled.rays():
            if endpoints.shape[0]:
                pooled_free |= visited_volume(spec, origin[None, :], endpoints)

    targets = []
    for f in range(t0_frame, t0_frame + t_out + 1):
        agg = _sync_segments(seq, segmented, f, t0_frame, synchronize)
        if pooled_rays:
            occ = voxelize(agg.all_points, spec, min_points).states == OCCUPIED
            states = np.full(tuple(int(d) for d in spec.dims), UNKNOWN, dtype=np.uint8)
            states[pooled_free] = FREE
            states[occ] = OCCUPIED
            targets.append(OccupancyGrid(spec, states))
        else:
            targets.append(
                build_target_grid(
                    agg.static_points, agg.dynamic_points, agg.rays(), spec, min_points
                )
            )
    return Sample(seq.sequence_id, t0_frame, inputs, targets)
