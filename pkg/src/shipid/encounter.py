"""Encounter frame estimation and moving wave-probe sampling.

The surrogate never sees the true ship track at prediction time, so wave
inputs are sampled along a reference frame that translates and rotates with
the ensemble-average motion of the training runs.  Probes ride that frame at
fixed offsets and record the free-surface elevation under themselves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .vessel import Trajectory
from .wavefield import WaveComponents


def rotation(psi: float) -> np.ndarray:
    """2x2 matrix rotating body-frame offsets into the earth frame."""
    c, s = np.cos(psi), np.sin(psi)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class EncounterFrame:
    """A moving reference pose (position and yaw) on a uniform time grid."""

    times: np.ndarray
    position: np.ndarray   # (T, 2) earth-frame track [m]
    yaw: np.ndarray        # (T,) [rad]

    def __post_init__(self) -> None:
        t = np.asarray(self.times, dtype=float)
        pos = np.asarray(self.position, dtype=float)
        yaw = np.asarray(self.yaw, dtype=float)
        if t.ndim != 1 or t.shape[0] < 2:
            raise ValueError("times must be a 1-d grid of at least two samples")
        if pos.shape != (t.shape[0], 2):
            raise ValueError("position must have shape (len(times), 2)")
        if yaw.shape != t.shape:
            raise ValueError("yaw must match times in length")
        if np.any(np.diff(t) <= 0.0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "yaw", yaw)

    @property
    def n_steps(self) -> int:
        return self.times.shape[0]


def _check_common_grid(trajectories) -> np.ndarray:
    if len(trajectories) == 0:
        raise ValueError("at least one trajectory required")
    t0 = trajectories[0].times
    for traj in trajectories[1:]:
        if traj.times.shape != t0.shape or not np.array_equal(traj.times, t0):
            raise ValueError("trajectories must share an identical time grid")
    return t0


def estimate_frame(trajectories, include_yaw: bool = True) -> EncounterFrame:
    """Ensemble-mean frame of a set of runs on a common time grid.

    Position is the arithmetic mean of (x, y) per step.  Yaw is averaged on
    the circle (atan2 of mean sine and cosine), which stays well defined when
    individual runs wrap.  With ``include_yaw=False`` the frame keeps a
    constant yaw equal to the circular mean of the initial headings, so only
    the translation is followed.
    """
    times = _check_common_grid(trajectories)
    xs = np.stack([traj.x for traj in trajectories])
    ys = np.stack([traj.y for traj in trajectories])
    position = np.column_stack((xs.mean(axis=0), ys.mean(axis=0)))

    yaws = np.stack([traj.yaw for traj in trajectories])
    if include_yaw:
        yaw = np.arctan2(np.sin(yaws).mean(axis=0), np.cos(yaws).mean(axis=0))
    else:
        psi0 = np.arctan2(np.sin(yaws[:, 0]).mean(), np.cos(yaws[:, 0]).mean())
        yaw = np.full_like(times, psi0)
    return EncounterFrame(times, position, yaw)


def actual_frame(trajectory: Trajectory) -> EncounterFrame:
    """Frame that follows one run's own track and heading exactly."""
    position = np.column_stack((trajectory.x, trajectory.y))
    return EncounterFrame(trajectory.times, position, trajectory.yaw.copy())


@dataclass(frozen=True)
class ProbeLayout:
    """Fixed probe offsets in the frame's body axes, one (x, y) row each [m]."""

    offsets: np.ndarray

    def __post_init__(self) -> None:
        off = np.asarray(self.offsets, dtype=float)
        if off.ndim != 2 or off.shape[1] != 2 or off.shape[0] < 1:
            raise ValueError("offsets must be an (K, 2) array with K >= 1")
        if np.unique(off, axis=0).shape[0] != off.shape[0]:
            raise ValueError("probe offsets must be distinct")
        object.__setattr__(self, "offsets", off)

    @property
    def n_probes(self) -> int:
        return self.offsets.shape[0]


def probe_layout(n_probes: int, peak_wavelength: float) -> ProbeLayout:
    """Centerline probe arrangement spanning half a peak wavelength each way.

    One probe sits at the frame origin; more are spaced uniformly along the
    body x axis from -peak_wavelength/2 to +peak_wavelength/2.
    """
    if n_probes < 1:
        raise ValueError("n_probes must be at least 1")
    if peak_wavelength <= 0.0:
        raise ValueError("peak_wavelength must be positive")
    if n_probes == 1:
        xs = np.array([0.0])
    else:
        xs = np.linspace(-0.5 * peak_wavelength, 0.5 * peak_wavelength, n_probes)
    return ProbeLayout(np.column_stack((xs, np.zeros_like(xs))))


def probe_elevations(
    components: WaveComponents, frame: EncounterFrame, layout: ProbeLayout
) -> np.ndarray:
    """Elevation time series under each probe, shape (T, K).

    Probe k at body offset b_k samples the surface at
    position(t) + R(yaw(t)) b_k, so the matrix is

        eta[t, k] = sum_n a_n cos(w_n t - k_n . p_k(t) + phi_n)
    """
    t = frame.times
    c, s = np.cos(frame.yaw), np.sin(frame.yaw)
    bx, by = layout.offsets[:, 0], layout.offsets[:, 1]
    # Earth-frame probe tracks, (T, K).
    px = frame.position[:, 0][:, None] + c[:, None] * bx[None, :] - s[:, None] * by[None, :]
    py = frame.position[:, 1][:, None] + s[:, None] * bx[None, :] + c[:, None] * by[None, :]

    kx = components.wavenumber_vectors[:, 0]
    ky = components.wavenumber_vectors[:, 1]
    theta = (
        components.frequencies[None, None, :] * t[:, None, None]
        - (px[:, :, None] * kx[None, None, :] + py[:, :, None] * ky[None, None, :])
        + components.phases[None, None, :]
    )
    return np.sum(components.amplitudes[None, None, :] * np.cos(theta), axis=2)


def save_frame(path, frame: EncounterFrame) -> None:
    """Write the frame as CSV with columns t, x_E, y_E, psi_E."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("t,x_E,y_E,psi_E\n")
        for i in range(frame.n_steps):
            fh.write(
                f"{frame.times[i]:.17g},{frame.position[i, 0]:.17g},"
                f"{frame.position[i, 1]:.17g},{frame.yaw[i]:.17g}\n"
            )


def load_frame(path) -> EncounterFrame:
    """Read a frame CSV written by :func:`save_frame`."""
    data = np.loadtxt(path, dtype=float, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != 4:
        raise ValueError(f"expected 4 columns, got {data.shape[1]}")
    return EncounterFrame(data[:, 0], data[:, 1:3], data[:, 3])
