"""Reduced-order 6-DoF vessel dynamics in irregular seas.

The model is deliberately compact but dynamically coupled through geometry
and control: surge follows a first-order speed command with turn-induced
loss, sway and yaw are first-order responses to rudder and local wave slope,
and heave, roll, and pitch are decoupled second-order oscillators driven by
the wave surface evaluated at the instantaneous center of gravity.  A PID
autopilot (course keeping) or a held rudder (turning circle) closes the loop.

State integration is fixed-step RK4 with an internal step of dt/substeps;
outputs are recorded every dt.  Wave forcing is evaluated analytically from
the component sum, never by differencing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .wavefield import WaveComponents, elevation_and_slope

TWO_PI = 2.0 * math.pi

COURSE_KEEPING = "course_keeping"
TURNING_CIRCLE = "turning_circle"
MODES = (COURSE_KEEPING, TURNING_CIRCLE)


@dataclass(frozen=True)
class VesselParams:
    """Coefficients of the reduced-order hull response.

    Defaults are tuned to a 142 m destroyer-type hull at 20 knots: a hard
    35 degree turn settles near 1.6 deg/s yaw rate with roughly 30 percent
    speed loss, and the oscillatory modes sit at typical destroyer periods.
    """

    length_bp: float = 142.0          # length between perpendiculars [m]
    nominal_speed: float = 10.289     # commanded forward speed [m/s]

    surge_relaxation_time: float = 20.0   # speed recovery time constant [s]
    turn_speed_loss: float = 0.75         # speed decay per unit |yaw rate| [-]
    sway_time_constant: float = 8.0       # [s]
    yaw_time_constant: float = 12.0       # [s]
    rudder_effectiveness: float = 0.0669  # steady yaw rate per rad rudder at nominal speed [1/s]
    sway_rudder_gain: float = -0.25       # steady sway velocity per (speed * rad rudder) [-]

    heave_period: float = 8.0     # natural period [s]
    roll_period: float = 11.0
    pitch_period: float = 7.0
    heave_damping: float = 0.35   # damping ratio [-]
    roll_damping: float = 0.12
    pitch_damping: float = 0.40

    heave_wave_gain: float = 0.9   # static heave per unit elevation [m/m]
    roll_wave_gain: float = 1.6    # static roll per unit lateral slope [rad/rad]
    pitch_wave_gain: float = 0.8   # static pitch per unit longitudinal slope [rad/rad]
    surge_wave_gain: float = 3.0   # speed command shift per unit longitudinal slope [m/s per rad]
    sway_wave_gain: float = 6.0    # sway command per unit lateral slope [m/s per rad]
    yaw_wave_gain: float = 0.06    # yaw-rate command per unit lateral slope [1/s per rad]

    def __post_init__(self) -> None:
        positive = (
            "length_bp",
            "nominal_speed",
            "surge_relaxation_time",
            "sway_time_constant",
            "yaw_time_constant",
            "heave_period",
            "roll_period",
            "pitch_period",
            "heave_damping",
            "roll_damping",
            "pitch_damping",
        )
        for name in positive:
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")
        if self.turn_speed_loss < 0.0:
            raise ValueError("turn_speed_loss must be non-negative")


@dataclass(frozen=True)
class PidGains:
    """Heading autopilot gains and rudder limits.

    The commanded deflection is

        delta_c = Kp * e + Ki * integral(e) + sign * Kd * yaw_rate

    with e the heading error wrapped to (-pi, pi].  ``derivative_sign``
    selects how the raw yaw rate enters: +1 adds it as written above, -1
    gives the conventional damping form.
    """

    proportional: float = 4.0
    integral: float = 0.0
    derivative: float = 1.0
    max_rudder_rate: float = math.radians(35.0)   # [rad/s]
    max_deflection: float = math.radians(35.0)    # [rad]
    desired_heading: float = 0.0                  # [rad]
    derivative_sign: float = 1.0

    def __post_init__(self) -> None:
        if not self.max_rudder_rate > 0.0:
            raise ValueError("max_rudder_rate must be positive")
        if not self.max_deflection > 0.0:
            raise ValueError("max_deflection must be positive")
        if self.derivative_sign not in (-1.0, 1.0):
            raise ValueError("derivative_sign must be +1 or -1")


def wrap_angle(angle: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = (angle + math.pi) % TWO_PI - math.pi
    if wrapped == -math.pi:
        return math.pi
    return wrapped


def pid_rudder(
    psi_d: float,
    psi: float,
    error_integral: float,
    psi_dot: float,
    gains: PidGains,
) -> tuple[float, bool]:
    """Commanded rudder deflection [rad] and a saturation flag.

    The heading error is wrapped to (-pi, pi] before use; the command is
    clamped to +-max_deflection and the flag reports whether clamping acted.
    """
    err = wrap_angle(psi_d - psi)
    cmd = (
        gains.proportional * err
        + gains.integral * error_integral
        + gains.derivative_sign * gains.derivative * psi_dot
    )
    limited = min(max(cmd, -gains.max_deflection), gains.max_deflection)
    return limited, limited != cmd


def rudder_rate_limit(current: float, commanded: float, dt: float, max_rate: float) -> float:
    """Move the rudder toward the command, at most ``max_rate * dt`` per call."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    step = commanded - current
    cap = max_rate * dt
    if step > cap:
        step = cap
    elif step < -cap:
        step = -cap
    return current + step


@dataclass
class Trajectory:
    """Recorded motion history on a uniform time grid.

    Velocities u, v are body-frame surge and sway [m/s]; r is the yaw rate
    [rad/s]; yaw is continuous (not wrapped), so turning circles wind
    monotonically.
    """

    times: np.ndarray
    x: np.ndarray
    y: np.ndarray
    heave: np.ndarray
    roll: np.ndarray
    pitch: np.ndarray
    yaw: np.ndarray
    surge_vel: np.ndarray
    sway_vel: np.ndarray
    yaw_rate: np.ndarray
    rudder: np.ndarray
    seed: int | None = None
    mode: str = COURSE_KEEPING

    _FIELDS = (
        "times",
        "x",
        "y",
        "heave",
        "roll",
        "pitch",
        "yaw",
        "surge_vel",
        "sway_vel",
        "yaw_rate",
        "rudder",
    )

    def __post_init__(self) -> None:
        n = None
        for name in self._FIELDS:
            arr = np.asarray(getattr(self, name), dtype=float)
            setattr(self, name, arr)
            if arr.ndim != 1:
                raise ValueError(f"{name} must be one-dimensional")
            if n is None:
                n = arr.shape[0]
            elif arr.shape[0] != n:
                raise ValueError("all trajectory fields must share one length")
        if n < 2:
            raise ValueError("a trajectory needs at least two samples")
        steps = np.diff(self.times)
        if np.any(steps <= 0.0) or not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
            raise ValueError("times must increase on a uniform grid")

    @property
    def n_steps(self) -> int:
        return self.times.shape[0]

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


class SimulationDiverged(RuntimeError):
    """Raised when the integrator produces a non-finite or runaway state."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"simulation diverged at output step {step}")


# State vector layout for the integrator.
_X, _Y, _PSI, _U, _V, _R = 0, 1, 2, 3, 4, 5
_Z, _ZV, _PHI, _PHIV, _THETA, _THETAV = 6, 7, 8, 9, 10, 11
_EINT = 12
_NSTATE = 13


def _derivatives(
    state: np.ndarray,
    t: float,
    delta: float,
    params: VesselParams,
    psi_d: float,
    components: WaveComponents,
) -> np.ndarray:
    eta, gx, gy = elevation_and_slope(components, (state[_X], state[_Y]), t)
    psi = state[_PSI]
    cp, sp = math.cos(psi), math.sin(psi)
    # Wave slope in the body frame: longitudinal (bow-up positive) and lateral.
    s_lon = cp * gx + sp * gy
    s_lat = -sp * gx + cp * gy

    u, v, r = state[_U], state[_V], state[_R]
    un = params.nominal_speed

    ds = np.empty(_NSTATE)
    ds[_X] = u * cp - v * sp
    ds[_Y] = u * sp + v * cp
    ds[_PSI] = r

    u_cmd = un + params.surge_wave_gain * s_lon
    ds[_U] = (u_cmd - u) / params.surge_relaxation_time - params.turn_speed_loss * u * abs(r)

    v_cmd = params.sway_rudder_gain * u * delta + params.sway_wave_gain * s_lat
    ds[_V] = (v_cmd - v) / params.sway_time_constant

    r_cmd = params.rudder_effectiveness * (u / un) * delta + params.yaw_wave_gain * s_lat
    ds[_R] = (r_cmd - r) / params.yaw_time_constant

    wn = TWO_PI / params.heave_period
    ds[_Z] = state[_ZV]
    ds[_ZV] = wn * wn * (params.heave_wave_gain * eta - state[_Z]) - 2.0 * params.heave_damping * wn * state[_ZV]

    wn = TWO_PI / params.roll_period
    ds[_PHI] = state[_PHIV]
    ds[_PHIV] = wn * wn * (params.roll_wave_gain * s_lat - state[_PHI]) - 2.0 * params.roll_damping * wn * state[_PHIV]

    wn = TWO_PI / params.pitch_period
    ds[_THETA] = state[_THETAV]
    ds[_THETAV] = wn * wn * (params.pitch_wave_gain * s_lon - state[_THETA]) - 2.0 * params.pitch_damping * wn * state[_THETAV]

    ds[_EINT] = wrap_angle(psi_d - psi)
    return ds


def _rk4_step(state, t, dt, delta, params, psi_d, components):
    k1 = _derivatives(state, t, delta, params, psi_d, components)
    k2 = _derivatives(state + 0.5 * dt * k1, t + 0.5 * dt, delta, params, psi_d, components)
    k3 = _derivatives(state + 0.5 * dt * k2, t + 0.5 * dt, delta, params, psi_d, components)
    k4 = _derivatives(state + dt * k3, t + dt, delta, params, psi_d, components)
    return state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def simulate(
    params: VesselParams,
    gains: PidGains,
    components: WaveComponents,
    mode: str,
    duration: float,
    dt: float = 0.5,
    initial_pose: tuple[float, float, float] = (0.0, 0.0, 0.0),
    turn_rudder: float = math.radians(35.0),
    substeps: int = 4,
    seed: int | None = None,
) -> Trajectory:
    """Integrate one run and record every ``dt`` seconds.

    ``mode`` selects course keeping (PID heading hold) or a turning circle
    (rudder ramped to ``turn_rudder`` and held).  The run starts at
    ``initial_pose`` with forward speed at nominal and all other states at
    rest.  Samples are taken at t = 0, dt, ..., duration - dt, so a run of
    length ``duration`` yields ``duration / dt`` rows.

    Raises :class:`SimulationDiverged` with the offending output step if the
    state stops being finite or runs away.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if dt <= 0.0 or duration <= 0.0:
        raise ValueError("duration and dt must be positive")
    if substeps < 1:
        raise ValueError("substeps must be at least 1")
    n_steps = duration / dt
    if abs(n_steps - round(n_steps)) > 1e-9 or round(n_steps) < 2:
        raise ValueError("duration must be an integer multiple (>= 2) of dt")
    n_steps = int(round(n_steps))

    state = np.zeros(_NSTATE)
    state[_X], state[_Y], state[_PSI] = initial_pose
    state[_U] = params.nominal_speed
    psi_d = gains.desired_heading
    delta = 0.0
    dti = dt / substeps
    # Beyond this speed the reduced-order model is meaningless.
    speed_limit = 50.0 * params.nominal_speed

    out = np.empty((n_steps, 11))
    for j in range(n_steps):
        t = j * dt
        out[j] = (
            t,
            state[_X],
            state[_Y],
            state[_Z],
            state[_PHI],
            state[_THETA],
            state[_PSI],
            state[_U],
            state[_V],
            state[_R],
            delta,
        )
        for i in range(substeps):
            ti = t + i * dti
            if mode == COURSE_KEEPING:
                cmd, _ = pid_rudder(psi_d, state[_PSI], state[_EINT], state[_R], gains)
            else:
                cmd = min(max(turn_rudder, -gains.max_deflection), gains.max_deflection)
            delta = rudder_rate_limit(delta, cmd, dti, gains.max_rudder_rate)
            state = _rk4_step(state, ti, dti, delta, params, psi_d, components)
        if not np.all(np.isfinite(state)) or abs(state[_U]) > speed_limit or abs(state[_V]) > speed_limit:
            raise SimulationDiverged(j)

    return Trajectory(
        times=out[:, 0],
        x=out[:, 1],
        y=out[:, 2],
        heave=out[:, 3],
        roll=out[:, 4],
        pitch=out[:, 5],
        yaw=out[:, 6],
        surge_vel=out[:, 7],
        sway_vel=out[:, 8],
        yaw_rate=out[:, 9],
        rudder=out[:, 10],
        seed=seed,
        mode=mode,
    )


def steady_turn_state(params: VesselParams, delta: float) -> tuple[float, float, float]:
    """Analytic fixed point (u, v, r) of the calm-water turn at rudder ``delta``.

    Solves the coupled steady equations

        u = U / (1 + tau_u * c * |r|)
        r = K * (u / U) * delta
        v = Y * u * delta

    which reduce to a quadratic in r.
    """
    tau_c = params.surge_relaxation_time * params.turn_speed_loss
    kd = params.rudder_effectiveness * delta
    if tau_c == 0.0:
        r = kd
    else:
        sign = 1.0 if kd >= 0.0 else -1.0
        r = sign * (-1.0 + math.sqrt(1.0 + 4.0 * tau_c * abs(kd))) / (2.0 * tau_c)
    u = params.nominal_speed / (1.0 + tau_c * abs(r))
    v = params.sway_rudder_gain * u * delta
    return u, v, r


_TRAJ_COLUMNS = "t x y heave roll pitch yaw u v r rudder"


def save_trajectory(path, traj: Trajectory) -> None:
    """Write a trajectory as text with a seed/mode/dt header."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"# seed {'none' if traj.seed is None else traj.seed}\n")
        fh.write(f"# mode {traj.mode}\n")
        fh.write(f"# dt {traj.dt:.17g}\n")
        fh.write(f"# columns {_TRAJ_COLUMNS}\n")
        rows = np.column_stack([getattr(traj, name) for name in Trajectory._FIELDS])
        for row in rows:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_trajectory(path) -> Trajectory:
    """Read a trajectory file written by :func:`save_trajectory`."""
    header: dict[str, str] = {}
    with open(path, "r", encoding="ascii") as fh:
        pos = fh.tell()
        while True:
            line = fh.readline()
            if not line.startswith("#"):
                fh.seek(pos)
                break
            pos = fh.tell()
            parts = line[1:].split(None, 1)
            if len(parts) == 2:
                header[parts[0]] = parts[1].strip()
        data = np.loadtxt(fh, dtype=float, ndmin=2)
    if data.shape[1] != 11:
        raise ValueError(f"expected 11 columns, got {data.shape[1]}")
    seed_text = header.get("seed", "none")
    seed = None if seed_text == "none" else int(seed_text)
    mode = header.get("mode", COURSE_KEEPING)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r} in {path}")
    return Trajectory(
        times=data[:, 0],
        x=data[:, 1],
        y=data[:, 2],
        heave=data[:, 3],
        roll=data[:, 4],
        pitch=data[:, 5],
        yaw=data[:, 6],
        surge_vel=data[:, 7],
        sway_vel=data[:, 8],
        yaw_rate=data[:, 9],
        rudder=data[:, 10],
        seed=seed,
        mode=mode,
    )
