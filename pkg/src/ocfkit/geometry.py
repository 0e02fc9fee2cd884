"""Rigid transforms, oriented boxes, and voxel-grid index arithmetic.

Everything downstream (segmentation, aggregation, voxelization, the
simulator) is phrased in terms of these three types. All types are
immutable after construction and all operations are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "RigidTransform",
    "GridSpec",
    "OrientedBox",
    "point_in_box",
    "points_in_box",
]


def _unit_quaternion(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4).copy()
    norm = float(np.linalg.norm(q))
    if not np.isfinite(norm) or norm < 1e-12:
        raise ValueError(f"quaternion is not normalizable (norm={norm})")
    q /= norm
    q.setflags(write=False)
    return q


def _quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """SE(3) pose stored as a unit quaternion (w, x, y, z) plus translation.

    The quaternion is renormalized on construction, so long pose chains
    (ego trajectories, box tracks) do not drift off the unit sphere.
    """

    rotation: np.ndarray = (1.0, 0.0, 0.0, 0.0)
    translation: np.ndarray = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "rotation", _unit_quaternion(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_rotation_z(cls, angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """Rotation by `angle` radians about the +z axis, then translation."""
        half = 0.5 * angle
        return cls((np.cos(half), 0.0, 0.0, np.sin(half)), translation)

    @classmethod
    def from_matrix(cls, mat: np.ndarray) -> "RigidTransform":
        """Build from a 4x4 (or 3x4) homogeneous matrix with orthonormal rotation."""
        mat = np.asarray(mat, dtype=np.float64)
        r = mat[:3, :3]
        # Shepperd's method: pick the largest diagonal combination for stability.
        tr = np.trace(r)
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2
            q = np.array(
                [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
            )
        elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
            s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
            q = np.array(
                [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
            )
        elif r[1, 1] >= r[2, 2]:
            s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
            q = np.array(
                [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
            )
        else:
            s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
            q = np.array(
                [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
            )
        return cls(q, mat[:3, 3])

    @property
    def rotation_matrix(self) -> np.ndarray:
        w, x, y, z = self.rotation
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
            ]
        )

    def as_matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation_matrix
        mat[:3, 3] = self.translation
        return mat

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Composition self @ other: (self.compose(other)).apply(p) == self.apply(other.apply(p))."""
        q = _quat_multiply(self.rotation, other.rotation)
        t = self.rotation_matrix @ other.translation + self.translation
        return RigidTransform(q, t)

    def inverse(self) -> "RigidTransform":
        q_inv = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        rot_inv = self.rotation_matrix.T
        return RigidTransform(q_inv, -(rot_inv @ self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a single point (3,) or a point set (N, 3)."""
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 1:
            return self.rotation_matrix @ points + self.translation
        return points @ self.rotation_matrix.T + self.translation

    def __eq__(self, other) -> bool:
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __repr__(self) -> str:
        q = np.array2string(self.rotation, precision=6, suppress_small=True)
        t = np.array2string(self.translation, precision=6, suppress_small=True)
        return f"RigidTransform(rotation={q}, translation={t})"


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Dense voxel grid geometry: minimum corner, per-axis cell size, cell counts.

    Voxel intervals are half-open [lo, hi): a point on a shared face belongs
    to the higher-index voxel, so the grid is an unambiguous partition.
    """

    origin: np.ndarray
    voxel_size: np.ndarray
    dims: np.ndarray

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3).copy()
        size = np.asarray(self.voxel_size, dtype=np.float64).reshape(3).copy()
        dims = np.asarray(self.dims, dtype=np.int64).reshape(3).copy()
        if not np.all(np.isfinite(origin)):
            raise ValueError("grid origin must be finite")
        if not np.all(size > 0):
            raise ValueError("voxel_size components must be > 0")
        if not np.all(dims >= 1):
            raise ValueError("dims must all be >= 1")
        for arr in (origin, size, dims):
            arr.setflags(write=False)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxel_size", size)
        object.__setattr__(self, "dims", dims)

    @property
    def num_cells(self) -> int:
        return int(np.prod(self.dims))

    @property
    def max_corner(self) -> np.ndarray:
        return self.origin + self.dims * self.voxel_size

    def world_to_index(self, point) -> tuple[int, int, int] | None:
        """Voxel index containing `point`, or None when out of bounds."""
        frac = (np.asarray(point, dtype=np.float64) - self.origin) / self.voxel_size
        idx = np.floor(frac).astype(np.int64)
        if np.any(idx < 0) or np.any(idx >= self.dims):
            return None
        return (int(idx[0]), int(idx[1]), int(idx[2]))

    def world_to_indices(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized world_to_index: returns (indices (N,3), in_bounds (N,)).

        Index rows where in_bounds is False are meaningless.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        frac = (points - self.origin) / self.voxel_size
        idx = np.floor(frac).astype(np.int64)
        valid = np.all((idx >= 0) & (idx < self.dims), axis=1)
        return idx, valid

    def voxel_center(self, index) -> np.ndarray:
        return self.origin + (np.asarray(index, dtype=np.float64) + 0.5) * self.voxel_size

    def voxel_centers(self) -> np.ndarray:
        """Centers of every cell, shape (nx, ny, nz, 3)."""
        nx, ny, nz = (int(d) for d in self.dims)
        ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        centers = np.stack([ix, iy, iz], axis=-1).astype(np.float64)
        return self.origin + (centers + 0.5) * self.voxel_size

    def __eq__(self, other) -> bool:
        if not isinstance(other, GridSpec):
            return NotImplemented
        return (
            np.array_equal(self.origin, other.origin)
            and np.array_equal(self.voxel_size, other.voxel_size)
            and np.array_equal(self.dims, other.dims)
        )

    def __repr__(self) -> str:
        return (
            f"GridSpec(origin={self.origin.tolist()}, "
            f"voxel_size={self.voxel_size.tolist()}, dims={self.dims.tolist()})"
        )


@dataclass(frozen=True, eq=False)
class OrientedBox:
    """Oriented bounding box: world-from-box pose plus half extents.

    Containment is boundary-inclusive; annotation boxes are usually tight
    and excluding surface returns would orphan points.
    """

    pose: RigidTransform
    half_extents: np.ndarray
    instance_id: str = ""

    def __post_init__(self):
        h = np.asarray(self.half_extents, dtype=np.float64).reshape(3).copy()
        if not np.all(h > 0):
            raise ValueError("half_extents must all be > 0")
        h.setflags(write=False)
        object.__setattr__(self, "half_extents", h)
        object.__setattr__(self, "instance_id", str(self.instance_id))

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation

    def inflated(self, margin: float) -> "OrientedBox":
        """Same box with `margin` meters added to every half extent."""
        if margin == 0.0:
            return self
        return OrientedBox(self.pose, self.half_extents + margin, self.instance_id)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boundary-inclusive containment for (N, 3) points; returns bool (N,)."""
        local = self.pose.inverse().apply(np.atleast_2d(points))
        return np.all(np.abs(local) <= self.half_extents, axis=1)

    def transformed(self, transform: RigidTransform) -> "OrientedBox":
        """The same physical box expressed after `transform` (new-frame-from-old)."""
        return OrientedBox(transform.compose(self.pose), self.half_extents, self.instance_id)

    def __eq__(self, other) -> bool:
        if not isinstance(other, OrientedBox):
            return NotImplemented
        return (
            self.instance_id == other.instance_id
            and self.pose == other.pose
            and np.array_equal(self.half_extents, other.half_extents)
        )


def point_in_box(point, box: OrientedBox) -> bool:
    """True iff `point` lies inside `box` (boundary inclusive)."""
    local = box.pose.inverse().apply(np.asarray(point, dtype=np.float64))
    return bool(np.all(np.abs(local) <= box.half_extents))


def points_in_box(points: np.ndarray, box: OrientedBox) -> np.ndarray:
    """Vectorized point_in_box for an (N, 3) array."""
    return box.contains(points)
