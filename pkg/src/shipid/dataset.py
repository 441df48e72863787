"""Assembly of probe-elevation inputs and motion targets into model tensors.

Inputs are an (M, T, K) stack of standardized probe elevations; targets are
(M, T, 6) standardized motion channels.  Standardization statistics are
always fitted on training data and carried to everything downstream.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .encounter import EncounterFrame, ProbeLayout, probe_elevations
from .vessel import COURSE_KEEPING, MODES, TURNING_CIRCLE, Trajectory
from .wavefield import WaveComponents

# Output channel order per mode.  Course keeping carries yaw angle; the
# turning circle replaces it with yaw rate, whose statistics stay stationary
# while the heading winds.
OUTPUT_COLUMNS = {
    COURSE_KEEPING: ("surge_vel", "sway_vel", "heave", "roll", "pitch", "yaw"),
    TURNING_CIRCLE: ("surge_vel", "sway_vel", "heave", "roll", "pitch", "yaw_rate"),
}
N_OUTPUTS = 6

DATASET_META = "meta"
_STORAGE_FORMATS = ("binary", "text")
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Standardizer:
    """Per-channel affine normalization y = (x - mean) / std.

    ``std`` is the population standard deviation (divide by N).  Fitting a
    channel with zero spread is an error, reported with the channel index.
    """

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        std = np.atleast_1d(np.asarray(self.std, dtype=float))
        if mean.shape != std.shape or mean.ndim != 1:
            raise ValueError("mean and std must be 1-d arrays of equal length")
        if np.any(std <= 0.0):
            raise ValueError("std must be positive for every channel")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def n_channels(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def fit(cls, data: np.ndarray) -> "Standardizer":
        """Fit over all leading axes; the last axis indexes channels."""
        arr = np.asarray(data, dtype=float)
        if arr.ndim < 2:
            arr = arr.reshape(-1, 1)
        flat = arr.reshape(-1, arr.shape[-1])
        if flat.shape[0] < 2:
            raise ValueError("need at least two samples per channel")
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)  # population: divide by N
        bad = np.nonzero(std == 0.0)[0]
        if bad.size:
            raise ValueError(f"channel {int(bad[0])} has zero spread; cannot standardize")
        return cls(mean, std)

    def apply(self, data: np.ndarray) -> np.ndarray:
        arr = np.asarray(data, dtype=float)
        if arr.shape[-1] != self.n_channels:
            raise ValueError("last axis must match the fitted channel count")
        return (arr - self.mean) / self.std

    def invert(self, data: np.ndarray) -> np.ndarray:
        arr = np.asarray(data, dtype=float)
        if arr.shape[-1] != self.n_channels:
            raise ValueError("last axis must match the fitted channel count")
        return arr * self.std + self.mean


def build_outputs(trajectory: Trajectory, mode: str) -> np.ndarray:
    """Stack the six target channels of one run, shape (T, 6), physical units."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    cols = [np.asarray(getattr(trajectory, name)) for name in OUTPUT_COLUMNS[mode]]
    return np.column_stack(cols)


@dataclass
class DatasetTensors:
    """Standardized inputs (M, T, K) and targets (M, T, 6) plus provenance."""

    inputs: np.ndarray
    outputs: np.ndarray
    run_seeds: list
    mode: str
    input_standardizer: Standardizer
    output_standardizer: Standardizer

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.outputs = np.asarray(self.outputs, dtype=float)
        if self.inputs.ndim != 3 or self.outputs.ndim != 3:
            raise ValueError("inputs and outputs must be 3-d arrays")
        if self.inputs.shape[:2] != self.outputs.shape[:2]:
            raise ValueError("inputs and outputs must agree on (runs, steps)")
        if self.outputs.shape[2] != N_OUTPUTS:
            raise ValueError(f"outputs must have {N_OUTPUTS} channels")
        if len(self.run_seeds) != self.inputs.shape[0]:
            raise ValueError("one seed per run required")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.input_standardizer.n_channels != self.inputs.shape[2]:
            raise ValueError("input standardizer width must match probe count")
        if self.output_standardizer.n_channels != N_OUTPUTS:
            raise ValueError("output standardizer must cover 6 channels")

    @property
    def n_runs(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_steps(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_probes(self) -> int:
        return self.inputs.shape[2]


def assemble(
    trajectories: Sequence[Trajectory],
    components: Sequence[WaveComponents],
    frame: EncounterFrame | Sequence[EncounterFrame],
    layout: ProbeLayout,
    mode: str,
    standardizers: tuple[Standardizer, Standardizer] | None = None,
) -> DatasetTensors:
    """Build standardized tensors for an ensemble of runs.

    ``frame`` is either one shared frame (the estimated ensemble frame) or a
    sequence with one frame per run (each run's actual track).  When
    ``standardizers`` is None the statistics are fitted here, which is the
    training path; validation sets must pass the training pair in.
    """
    if len(trajectories) == 0:
        raise ValueError("at least one run required")
    if len(components) != len(trajectories):
        raise ValueError("one component set per run required")
    if isinstance(frame, EncounterFrame):
        frames = [frame] * len(trajectories)
    else:
        frames = list(frame)
        if len(frames) != len(trajectories):
            raise ValueError("one frame per run required")

    t0 = trajectories[0].times
    for traj, frm in zip(trajectories, frames):
        if not np.array_equal(traj.times, t0) or not np.array_equal(frm.times, t0):
            raise ValueError("runs and frames must share an identical time grid")

    inputs = np.stack(
        [probe_elevations(comp, frm, layout) for comp, frm in zip(components, frames)]
    )
    outputs = np.stack([build_outputs(traj, mode) for traj in trajectories])

    if standardizers is None:
        in_std = Standardizer.fit(inputs)
        out_std = Standardizer.fit(outputs)
    else:
        in_std, out_std = standardizers

    seeds = [traj.seed for traj in trajectories]
    return DatasetTensors(
        inputs=in_std.apply(inputs),
        outputs=out_std.apply(outputs),
        run_seeds=seeds,
        mode=mode,
        input_standardizer=in_std,
        output_standardizer=out_std,
    )


def _float_list(arr) -> list:
    return [float(f"{v:.17g}") for v in np.asarray(arr, dtype=float)]


def save_dataset(directory, tensors: DatasetTensors, storage: str = "binary") -> None:
    """Persist tensors to a directory: a meta file plus per-run files.

    ``storage`` selects raw little-endian float64 (``binary``) or full
    precision decimal text (``text``); both load identically.
    """
    if storage not in _STORAGE_FORMATS:
        raise ValueError(f"storage must be one of {_STORAGE_FORMATS}")
    os.makedirs(directory, exist_ok=True)
    meta = {
        "format_version": _FORMAT_VERSION,
        "mode": tensors.mode,
        "n_runs": tensors.n_runs,
        "n_steps": tensors.n_steps,
        "n_probes": tensors.n_probes,
        "run_seeds": [None if s is None else int(s) for s in tensors.run_seeds],
        "storage": storage,
        "input_mean": _float_list(tensors.input_standardizer.mean),
        "input_std": _float_list(tensors.input_standardizer.std),
        "output_mean": _float_list(tensors.output_standardizer.mean),
        "output_std": _float_list(tensors.output_standardizer.std),
        "output_columns": list(OUTPUT_COLUMNS[tensors.mode]),
        "row_order": "time-major; row t holds probe columns (inputs) or motion channels (outputs)",
    }
    with open(os.path.join(directory, DATASET_META), "w", encoding="ascii") as fh:
        json.dump(meta, fh, indent=1)
        fh.write("\n")
    ext = "f64" if storage == "binary" else "txt"
    for i in range(tensors.n_runs):
        _write_matrix(os.path.join(directory, f"inputs_{i:04d}.{ext}"), tensors.inputs[i], storage)
        _write_matrix(os.path.join(directory, f"outputs_{i:04d}.{ext}"), tensors.outputs[i], storage)


def _write_matrix(path, matrix: np.ndarray, storage: str) -> None:
    if storage == "binary":
        with open(path, "wb") as fh:
            fh.write(np.ascontiguousarray(matrix, dtype="<f8").tobytes())
    else:
        with open(path, "w", encoding="ascii") as fh:
            for row in matrix:
                fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def _read_matrix(path, shape, storage: str) -> np.ndarray:
    if storage == "binary":
        with open(path, "rb") as fh:
            flat = np.frombuffer(fh.read(), dtype="<f8")
        if flat.size != shape[0] * shape[1]:
            raise ValueError(f"{path}: expected {shape[0] * shape[1]} values, got {flat.size}")
        return flat.reshape(shape).astype(float)
    data = np.loadtxt(path, dtype=float, ndmin=2)
    if data.shape != tuple(shape):
        raise ValueError(f"{path}: expected shape {tuple(shape)}, got {data.shape}")
    return data


def load_dataset(directory) -> DatasetTensors:
    """Load a dataset directory written by :func:`save_dataset`."""
    meta_path = os.path.join(directory, DATASET_META)
    if not os.path.exists(meta_path):
        raise FileNotFoundError(f"no dataset meta file in {directory}")
    with open(meta_path, "r", encoding="ascii") as fh:
        meta = json.load(fh)
    if meta.get("format_version") != _FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {meta.get('format_version')}")
    storage = meta["storage"]
    if storage not in _STORAGE_FORMATS:
        raise ValueError(f"unknown storage format {storage!r}")
    m, t, k = meta["n_runs"], meta["n_steps"], meta["n_probes"]
    ext = "f64" if storage == "binary" else "txt"
    inputs = np.stack(
        [_read_matrix(os.path.join(directory, f"inputs_{i:04d}.{ext}"), (t, k), storage) for i in range(m)]
    )
    outputs = np.stack(
        [
            _read_matrix(os.path.join(directory, f"outputs_{i:04d}.{ext}"), (t, N_OUTPUTS), storage)
            for i in range(m)
        ]
    )
    return DatasetTensors(
        inputs=inputs,
        outputs=outputs,
        run_seeds=meta["run_seeds"],
        mode=meta["mode"],
        input_standardizer=Standardizer(np.array(meta["input_mean"]), np.array(meta["input_std"])),
        output_standardizer=Standardizer(np.array(meta["output_mean"]), np.array(meta["output_std"])),
    )
