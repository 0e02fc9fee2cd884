"""Non-learned reference forecasters.

These give floor numbers for any learned model and make the end-to-end
loop runnable without training. The static-world forecaster reads the
ground-truth completed grid at t=0, so it is an oracle baseline and is
labeled as such in reports.
"""

from __future__ import annotations

import numpy as np

from .metrics import ProbabilityGrid
from .occupancy import FREE, OCCUPIED, UNKNOWN, OccupancyGrid, Sample

__all__ = [
    "static_world_forecast",
    "input_persistence_forecast",
    "input_union_forecast",
    "BASELINE_METHODS",
]


def _grid_to_probs(grid: OccupancyGrid) -> np.ndarray:
    # UNKNOWN becomes 0.5: masked in evaluation anyway, and honest for any
    # downstream consumer that cannot see the mask.
    probs = np.empty(grid.states.shape, dtype=np.float64)
    probs[grid.states == FREE] = 0.0
    probs[grid.states == OCCUPIED] = 1.0
    probs[grid.states == UNKNOWN] = 0.5
    return probs


def static_world_forecast(completed_t0: OccupancyGrid, t_out: int) -> list[ProbabilityGrid]:
    """Freeze the completed t=0 grid for every future step."""
    probs = _grid_to_probs(completed_t0)
    return [ProbabilityGrid(completed_t0.spec, probs) for _ in range(t_out + 1)]


def input_persistence_forecast(sample: Sample) -> list[ProbabilityGrid]:
    """Repeat the last (t=0) input sweep's voxelization for every step."""
    last = sample.inputs[-1]
    probs = (last.states == OCCUPIED).astype(np.float64)
    return [ProbabilityGrid(sample.spec, probs) for _ in range(sample.t_out + 1)]


def input_union_forecast(sample: Sample) -> list[ProbabilityGrid]:
    """Repeat the voxelwise union of all input sweeps for every step."""
    union = np.zeros(tuple(int(d) for d in sample.spec.dims), dtype=bool)
    for grid in sample.inputs:
        union |= grid.states == OCCUPIED
    probs = union.astype(np.float64)
    return [ProbabilityGrid(sample.spec, probs) for _ in range(sample.t_out + 1)]


def run_baseline(method: str, sample: Sample) -> list[ProbabilityGrid]:
    """Dispatch by method name; static-world uses the gt t=0 target (oracle)."""
    if method == "static-world":
        return static_world_forecast(sample.targets[0], sample.t_out)
    if method == "persistence":
        return input_persistence_forecast(sample)
    if method == "union":
        return input_union_forecast(sample)
    raise ValueError(f"unknown baseline method {method!r}")


BASELINE_METHODS = ("static-world", "persistence", "union")
