"""Bit-exact dataset serialization: OCF1 sample files, splits, manifest.

OCF1 sample layout (all little-endian)::

    magic   4 bytes  "OCF1"
    version u16      1
    grid    3*f32 origin, 3*f32 voxel_size, 3*u32 dims
    t_in    u16
    t_out   u16
    grids   t_in+1 input grids, then t_out+1 target grids; each grid is a
            u32 run count followed by runs of (u32 length, u8 state code)

States are FREE=0, OCCUPIED=1, UNKNOWN=2; cells are linearized x-fastest,
then y, then z. Occupancy grids are highly runnable, so plain RLE gives
large compression with trivial decoding and no external dependencies.

Prediction files use the same header with magic "OCFP" and carry t_out+1
raw float32 probability grids (one value per cell, same cell order) instead
of RLE runs.

A sample's identity (sequence id and anchor frame) is transport metadata
carried by the canonical file name `<sequence_id>_t<NNNNNN>.ocf1`, keeping
the binary payload exactly as specified above.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ConsistencyError, CorruptionError, FormatError, IoError
from .geometry import GridSpec
from .occupancy import OCCUPIED, UNKNOWN, OccupancyGrid, Sample
from .metrics import ProbabilityGrid

__all__ = [
    "MAGIC_SAMPLE",
    "MAGIC_PREDICTION",
    "DatasetManifest",
    "sample_filename",
    "write_sample",
    "read_sample",
    "write_prediction",
    "read_prediction",
    "split_sequences",
    "save_manifest",
    "load_manifest",
]

MAGIC_SAMPLE = b"OCF1"
MAGIC_PREDICTION = b"OCFP"
_VERSION = 1
_RUN_DTYPE = np.dtype([("length", "<u4"), ("state", "u1")])
_NAME_RE = re.compile(r"^(?P<seq>.+)_t(?P<t0>\d{6,})$")
MANIFEST_NAME = "manifest.json"


def quantize_spec(spec: GridSpec) -> GridSpec:
    """Round a GridSpec's floats to float32 so OCF1 headers round-trip exactly."""
    return GridSpec(
        np.asarray(spec.origin, dtype=np.float32).astype(np.float64),
        np.asarray(spec.voxel_size, dtype=np.float32).astype(np.float64),
        spec.dims,
    )


def sample_filename(sequence_id: str, t0_frame: int) -> str:
    return f"{sequence_id}_t{t0_frame:06d}.ocf1"


def _parse_sample_name(stem: str) -> tuple[str, int]:
    m = _NAME_RE.match(stem)
    if m:
        return m.group("seq"), int(m.group("t0"))
    return stem, 0


def rle_encode(flat: np.ndarray) -> np.ndarray:
    """Run-length encode a 1-D uint8 array into the packed run dtype."""
    flat = np.asarray(flat, dtype=np.uint8).reshape(-1)
    if flat.size == 0:
        return np.empty(0, dtype=_RUN_DTYPE)
    boundaries = np.flatnonzero(flat[1:] != flat[:-1])
    starts = np.concatenate([[0], boundaries + 1])
    ends = np.concatenate([boundaries + 1, [flat.size]])
    runs = np.empty(starts.size, dtype=_RUN_DTYPE)
    runs["length"] = ends - starts
    runs["state"] = flat[starts]
    return runs


def rle_decode(runs: np.ndarray, expected_cells: int, what: str) -> np.ndarray:
    total = int(runs["length"].sum())
    if total != expected_cells:
        raise CorruptionError(f"{what}: run lengths sum to {total}, expected {expected_cells}")
    return np.repeat(runs["state"], runs["length"])


def _header_bytes(magic: bytes, spec: GridSpec, t_in: int, t_out: int) -> bytes:
    return (
        magic
        + struct.pack("<H", _VERSION)
        + struct.pack("<3f", *spec.origin)
        + struct.pack("<3f", *spec.voxel_size)
        + struct.pack("<3I", *(int(d) for d in spec.dims))
        + struct.pack("<2H", t_in, t_out)
    )


_HEADER_SIZE = 4 + 2 + 12 + 12 + 12 + 4


def _parse_header(buf: bytes, magic: bytes, path) -> tuple[GridSpec, int, int]:
    if len(buf) < _HEADER_SIZE:
        raise CorruptionError(f"{path}: truncated header")
    if buf[:4] != magic:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}, expected {magic!r}")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    origin = struct.unpack_from("<3f", buf, 6)
    voxel = struct.unpack_from("<3f", buf, 18)
    dims = struct.unpack_from("<3I", buf, 30)
    t_in, t_out = struct.unpack_from("<2H", buf, 42)
    try:
        spec = GridSpec(origin, voxel, dims)
    except ValueError as exc:
        raise CorruptionError(f"{path}: invalid grid header: {exc}") from exc
    return spec, t_in, t_out


def write_sample(sample: Sample, path) -> None:
    """Serialize a sample to OCF1. Use `sample_filename` for the canonical name."""
    spec = sample.spec
    parts = [_header_bytes(MAGIC_SAMPLE, spec, sample.t_in, sample.t_out)]
    for grid in list(sample.inputs) + list(sample.targets):
        runs = rle_encode(grid.states.ravel(order="F"))
        parts.append(struct.pack("<I", runs.size))
        parts.append(runs.tobytes())
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as exc:
        raise IoError(f"cannot write sample to {path}: {exc}") from exc


def read_sample(path) -> Sample:
    """Read and validate an OCF1 sample file."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc

    spec, t_in, t_out = _parse_header(buf, MAGIC_SAMPLE, path)
    n_cells = spec.num_cells
    dims = tuple(int(d) for d in spec.dims)

    offset = _HEADER_SIZE
    grids = []
    for g in range(t_in + 1 + t_out + 1):
        if offset + 4 > len(buf):
            raise CorruptionError(f"{path}: truncated before grid {g}")
        (n_runs,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        end = offset + n_runs * _RUN_DTYPE.itemsize
        if end > len(buf):
            raise CorruptionError(f"{path}: truncated inside grid {g}")
        runs = np.frombuffer(buf[offset:end], dtype=_RUN_DTYPE)
        offset = end
        flat = rle_decode(runs, n_cells, f"{path} grid {g}")
        if flat.size and flat.max() > UNKNOWN:
            raise CorruptionError(f"{path} grid {g}: state code out of range")
        grids.append(OccupancyGrid(spec, flat.reshape(dims, order="F")))
    if offset != len(buf):
        raise CorruptionError(f"{path}: {len(buf) - offset} trailing bytes")

    inputs = grids[: t_in + 1]
    targets = grids[t_in + 1 :]
    for k, grid in enumerate(inputs):
        if not grid.is_binary:
            raise CorruptionError(f"{path}: UNKNOWN code inside input grid {k}")
    sequence_id, t0 = _parse_sample_name(path.stem)
    return Sample(sequence_id, t0, inputs, targets)


def write_prediction(path, spec: GridSpec, probs: list, t_in: int = 0) -> None:
    """Write probability grids (one per output frame) in the OCFP layout."""
    if not probs:
        raise ConfigError("prediction needs at least one probability grid")
    parts = [_header_bytes(MAGIC_PREDICTION, spec, t_in, len(probs) - 1)]
    for grid in probs:
        if grid.spec != spec:
            raise ConsistencyError("prediction grids must share the header GridSpec")
        parts.append(grid.probs.astype("<f4").ravel(order="F").tobytes())
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as exc:
        raise IoError(f"cannot write prediction to {path}: {exc}") from exc


def read_prediction(path) -> tuple[int, list]:
    """Read an OCFP file; returns (t_in, probability grids)."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    spec, t_in, t_out = _parse_header(buf, MAGIC_PREDICTION, path)
    n_cells = spec.num_cells
    dims = tuple(int(d) for d in spec.dims)
    offset = _HEADER_SIZE
    grids = []
    for g in range(t_out + 1):
        end = offset + 4 * n_cells
        if end > len(buf):
            raise CorruptionError(f"{path}: truncated inside probability grid {g}")
        flat = np.frombuffer(buf[offset:end], dtype="<f4").astype(np.float64)
        offset = end
        if flat.size and (flat.min() < 0.0 or flat.max() > 1.0):
            raise CorruptionError(f"{path} grid {g}: probability outside [0, 1]")
        grids.append(ProbabilityGrid(spec, flat.reshape(dims, order="F")))
    if offset != len(buf):
        raise CorruptionError(f"{path}: {len(buf) - offset} trailing bytes")
    return t_in, grids


def split_sequences(
    sequence_ids: list[str], ratios: tuple[float, float, float], seed: int
) -> dict[str, list[str]]:
    """Deterministic scene-level train/val/test partition.

    Counts follow largest-remainder apportionment of len(ids) * ratio, so
    they match the ratios within one scene. Splitting is by whole sequence,
    never by frame, to prevent temporal leakage between splits.
    """
    import random

    if len(ratios) != 3:
        raise ConfigError("ratios must be (train, val, test)")
    ratios = tuple(float(r) for r in ratios)
    if any(r < 0 for r in ratios):
        raise ConfigError("ratios must be non-negative")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1, got {sum(ratios)}")
    ids = sorted(str(s) for s in sequence_ids)
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate sequence ids")
    n = len(ids)
    nonzero = sum(1 for r in ratios if r > 0)
    if n < nonzero:
        raise ConfigError(f"{n} sequences cannot fill {nonzero} non-empty splits")

    exact = [n * r for r in ratios]
    counts = [int(np.floor(e)) for e in exact]
    remainders = [e - c for e, c in zip(exact, counts)]
    # Hand leftover scenes to the largest remainders; ties go train > val > test.
    for _ in range(n - sum(counts)):
        best = max(range(3), key=lambda i: (remainders[i], -i))
        counts[best] += 1
        remainders[best] = -1.0

    rng = random.Random(seed)
    shuffled = list(ids)
    rng.shuffle(shuffled)
    train = sorted(shuffled[: counts[0]])
    val = sorted(shuffled[counts[0] : counts[0] + counts[1]])
    test = sorted(shuffled[counts[0] + counts[1] :])
    return {"train": train, "val": val, "test": test}


@dataclass(frozen=True)
class DatasetManifest:
    """Curated dataset index: grid geometry, horizons, splits, per-sample rows."""

    name: str
    spec: GridSpec
    t_in: int
    t_out: int
    splits: dict[str, list[str]]
    frame_counts: dict[str, int]
    samples: list[dict] = field(default_factory=list)

    def __post_init__(self):
        seen = {}
        for split, paths in self.splits.items():
            for p in paths:
                if p in seen:
                    raise ValueError(f"sample {p} appears in splits {seen[p]} and {split}")
                seen[p] = split

    def split_of(self, path: str) -> str | None:
        for split, paths in self.splits.items():
            if path in paths:
                return split
        return None


def save_manifest(manifest: DatasetManifest, dataset_dir) -> None:
    obj = {
        "name": manifest.name,
        "grid": {
            "origin": manifest.spec.origin.tolist(),
            "voxel_size": manifest.spec.voxel_size.tolist(),
            "dims": manifest.spec.dims.tolist(),
        },
        "t_in": manifest.t_in,
        "t_out": manifest.t_out,
        "splits": {k: sorted(v) for k, v in manifest.splits.items()},
        "frame_counts": dict(sorted(manifest.frame_counts.items())),
        "samples": manifest.samples,
    }
    try:
        (Path(dataset_dir) / MANIFEST_NAME).write_text(
            json.dumps(obj, indent=2, sort_keys=True) + "\n"
        )
    except OSError as exc:
        raise IoError(f"cannot write manifest: {exc}") from exc


def load_manifest(dataset_dir, check_files: bool = True) -> DatasetManifest:
    root = Path(dataset_dir)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise FormatError(f"{root}: no {MANIFEST_NAME}")
    try:
        obj = json.loads(path.read_text())
        grid = obj["grid"]
        manifest = DatasetManifest(
            name=str(obj["name"]),
            spec=GridSpec(grid["origin"], grid["voxel_size"], grid["dims"]),
            t_in=int(obj["t_in"]),
            t_out=int(obj["t_out"]),
            splits={k: list(v) for k, v in obj["splits"].items()},
            frame_counts={k: int(v) for k, v in obj.get("frame_counts", {}).items()},
            samples=list(obj.get("samples", [])),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed manifest: {exc}") from exc
    if check_files:
        for split, paths in manifest.splits.items():
            for rel in paths:
                if not (root / rel).is_file():
                    raise ConsistencyError(f"{root}: listed sample missing: {rel} ({split})")
    return manifest
