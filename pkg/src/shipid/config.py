"""Experiment configuration: one YAML file drives every command.

Defaults describe the reference case (a 142 m destroyer hull at 20 knots in
a 7.5 m, 15 s stern-quartering seaway), so a config file only has to list
deviations.  Angles appear in degrees in the file and are converted at the
boundary; everything internal is radians and SI.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import yaml

from .vessel import COURSE_KEEPING, MODES, PidGains, VesselParams
from .wavefield import OMEGA_BAND_FACTORS


class ConfigError(ValueError):
    """Invalid or inconsistent configuration; the message names the field."""


# Hull particulars carried for reference only; the reduced-order dynamics
# never read them.
HULL_METADATA = {
    "length_bp_m": 142.0,
    "beam_m": 19.06,
    "draft_m": 6.15,
    "displacement_t": 8431.8,
    "lcg_m": 71.6,
    "vcg_m": 7.555,
    "gm_t_m": 1.95,
    "roll_gyradius_m": 7.62,
    "pitch_gyradius_m": 35.50,
    "yaw_gyradius_m": 35.50,
    "water_density_kg_m3": 1024.81,
}


@dataclass(frozen=True)
class SpectrumConfig:
    significant_wave_height: float = 7.5    # [m]
    peak_modal_period: float = 15.0         # [s]
    wave_heading_deg: float = 135.0         # arrival direction from +x [deg]
    gravity: float = 9.80665                # [m/s^2]
    n_components: int = 400
    omega_low_factor: float = OMEGA_BAND_FACTORS[0]   # times peak frequency
    omega_high_factor: float = OMEGA_BAND_FACTORS[1]


@dataclass(frozen=True)
class PidConfig:
    proportional: float = 4.0
    integral: float = 0.0
    derivative: float = 1.0
    max_rudder_rate_deg: float = 35.0   # [deg/s]
    max_deflection_deg: float = 35.0    # [deg]
    desired_heading_deg: float = 0.0
    # -1 applies the yaw-rate term as damping (the stabilizing convention);
    # +1 adds it with positive sign.  Experiments default to damping.
    derivative_sign: int = -1

    def gains(self) -> PidGains:
        return PidGains(
            proportional=self.proportional,
            integral=self.integral,
            derivative=self.derivative,
            max_rudder_rate=math.radians(self.max_rudder_rate_deg),
            max_deflection=math.radians(self.max_deflection_deg),
            desired_heading=math.radians(self.desired_heading_deg),
            derivative_sign=float(self.derivative_sign),
        )


@dataclass(frozen=True)
class SimulationConfig:
    mode: str = COURSE_KEEPING
    duration: float = 360.0        # [s]
    time_step: float = 0.5         # output interval [s]
    substeps: int = 4              # internal RK4 steps per output step
    n_training_runs: int = 640
    n_validation_runs: int = 1000
    training_seed_base: int = 1000
    validation_seed_base: int = 900000
    turn_rudder_deg: float = 35.0


@dataclass(frozen=True)
class ProbeConfig:
    count: int = 27


@dataclass(frozen=True)
class NetworkConfig:
    units: int = 250
    layers: int = 3
    dropout: float = 0.1
    learning_rate: float = 1e-5
    epochs: int = 2000
    batch_policy: str = "full"
    grad_clip_norm: float | None = 10.0
    forget_bias: float = 1.0
    init_seed: int = 42
    mask_per_step: bool = False


@dataclass(frozen=True)
class UncertaintyConfig:
    mc_samples: int = 100
    mc_seed: int = 777


@dataclass(frozen=True)
class StudyConfig:
    probe_counts: tuple = (1, 3, 9, 27)
    run_counts: tuple = (10, 20, 40, 80, 160, 320, 640)
    # "estimated" uses the ensemble-mean frame of the training subset;
    # "actual" lets every run carry its own track.
    frame_source: str = "estimated"
    pdf_runs: int = 400        # validation-scale runs pooled for PDF comparisons
    pdf_max_bins: int = 24
    pdf_seed_base: int = 700000


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 1234
    spectrum: SpectrumConfig = field(default_factory=SpectrumConfig)
    vessel: VesselParams = field(default_factory=VesselParams)
    pid: PidConfig = field(default_factory=PidConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    probes: ProbeConfig = field(default_factory=ProbeConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    uncertainty: UncertaintyConfig = field(default_factory=UncertaintyConfig)
    study: StudyConfig = field(default_factory=StudyConfig)
    hull_metadata: dict = field(default_factory=lambda: dict(HULL_METADATA))


_SECTIONS = {
    "spectrum": SpectrumConfig,
    "vessel": VesselParams,
    "pid": PidConfig,
    "simulation": SimulationConfig,
    "probes": ProbeConfig,
    "network": NetworkConfig,
    "uncertainty": UncertaintyConfig,
    "study": StudyConfig,
}


def _build_section(cls, mapping, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(mapping) - known
    if unknown:
        raise ConfigError(f"{section}.{sorted(unknown)[0]}: unknown field")
    kwargs = {}
    for f in fields(cls):
        if f.name in mapping:
            value = mapping[f.name]
            if isinstance(value, list):
                value = tuple(value)
            kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section '{section}': {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build and validate a config from a nested plain dict."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    known = set(_SECTIONS) | {"seed", "hull_metadata"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown section")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            section = raw[name]
            if not isinstance(section, dict):
                raise ConfigError(f"section '{name}' must be a mapping")
            kwargs[name] = _build_section(cls, section, name)
    if "seed" in raw:
        kwargs["seed"] = int(raw["seed"])
    if "hull_metadata" in raw:
        kwargs["hull_metadata"] = dict(raw["hull_metadata"])
    cfg = ExperimentConfig(**kwargs)
    validate_config(cfg)
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Plain nested dict representation (lists, not tuples, for YAML)."""
    out = {"seed": cfg.seed}
    for name in _SECTIONS:
        section = asdict(getattr(cfg, name))
        for key, value in section.items():
            if isinstance(value, tuple):
                section[key] = list(value)
        out[name] = section
    out["hull_metadata"] = dict(cfg.hull_metadata)
    return out


def validate_config(cfg: ExperimentConfig) -> None:
    """Raise :class:`ConfigError` naming the first offending field."""
    sp = cfg.spectrum
    if sp.significant_wave_height <= 0:
        raise ConfigError("spectrum.significant_wave_height: must be positive")
    if sp.peak_modal_period <= 0:
        raise ConfigError("spectrum.peak_modal_period: must be positive")
    if not 0.0 <= sp.wave_heading_deg < 360.0:
        raise ConfigError("spectrum.wave_heading_deg: must lie in [0, 360)")
    if sp.n_components < 1:
        raise ConfigError("spectrum.n_components: must be at least 1")
    if not 0.0 < sp.omega_low_factor < sp.omega_high_factor:
        raise ConfigError("spectrum.omega_low_factor: band must satisfy 0 < low < high")

    sim = cfg.simulation
    if sim.mode not in MODES:
        raise ConfigError(f"simulation.mode: must be one of {MODES}")
    if sim.duration <= 0 or sim.time_step <= 0:
        raise ConfigError("simulation.duration: duration and time_step must be positive")
    steps = sim.duration / sim.time_step
    if abs(steps - round(steps)) > 1e-9 or round(steps) < 2:
        raise ConfigError("simulation.duration: must be an integer multiple (>= 2) of time_step")
    if sim.substeps < 1:
        raise ConfigError("simulation.substeps: must be at least 1")
    if sim.n_training_runs < 1 or sim.n_validation_runs < 1:
        raise ConfigError("simulation.n_training_runs: run counts must be positive")
    train_range = range(sim.training_seed_base, sim.training_seed_base + sim.n_training_runs)
    val_range = range(sim.validation_seed_base, sim.validation_seed_base + sim.n_validation_runs)
    if max(train_range.start, val_range.start) < min(train_range.stop, val_range.stop):
        raise ConfigError("simulation.validation_seed_base: training and validation seed ranges overlap")

    if cfg.probes.count < 1:
        raise ConfigError("probes.count: must be at least 1")

    net = cfg.network
    if net.units < 1 or net.layers < 1:
        raise ConfigError("network.units: units and layers must be positive")
    if not 0.0 <= net.dropout < 1.0:
        raise ConfigError("network.dropout: must lie in [0, 1)")
    if net.learning_rate <= 0:
        raise ConfigError("network.learning_rate: must be positive")
    if net.epochs < 0:
        raise ConfigError("network.epochs: must be non-negative")
    if net.batch_policy not in ("full", "per_run"):
        raise ConfigError("network.batch_policy: must be 'full' or 'per_run'")

    if cfg.uncertainty.mc_samples < 1:
        raise ConfigError("uncertainty.mc_samples: must be at least 1")

    st = cfg.study
    if len(st.probe_counts) == 0 or len(st.run_counts) == 0:
        raise ConfigError("study.probe_counts: study grids must be non-empty")
    if any(k < 1 for k in st.probe_counts):
        raise ConfigError("study.probe_counts: entries must be positive")
    if any(m < 1 for m in st.run_counts):
        raise ConfigError("study.run_counts: entries must be positive")
    if max(st.run_counts) > sim.n_training_runs:
        raise ConfigError("study.run_counts: largest cell exceeds simulation.n_training_runs")
    if st.frame_source not in ("estimated", "actual"):
        raise ConfigError("study.frame_source: must be 'estimated' or 'actual'")
    if st.pdf_runs < 2:
        raise ConfigError("study.pdf_runs: must be at least 2")
    if st.pdf_max_bins < 4:
        raise ConfigError("study.pdf_max_bins: must be at least 4")
    if cfg.pid.derivative_sign not in (-1, 1):
        raise ConfigError("pid.derivative_sign: must be -1 or +1")


def load_config(path) -> ExperimentConfig:
    """Parse a YAML config file."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        raw = {}
    return config_from_dict(raw)


def save_config(path, cfg: ExperimentConfig) -> None:
    """Emit the full config as YAML; load(save(cfg)) reproduces cfg exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)


def with_mode(cfg: ExperimentConfig, mode: str) -> ExperimentConfig:
    """Copy of the config with the simulation mode replaced."""
    if mode not in MODES:
        raise ConfigError(f"simulation.mode: must be one of {MODES}")
    return replace(cfg, simulation=replace(cfg.simulation, mode=mode))
