"""Shared orchestration: seeded run generation, dataset building, training.

Every run is identified by one integer seed that fixes its wave-phase
realization, so ensembles are reproducible and training/validation sets stay
disjoint by construction.  Heavier ensemble work can fan out over worker
processes; results are identical for any worker count because each run is
seeded independently.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .config import ExperimentConfig
from .dataset import DatasetTensors, assemble, build_outputs
from .encounter import EncounterFrame, ProbeLayout, actual_frame, estimate_frame, probe_layout
from .lstm import LstmModel, TrainSettings, forward, train
from .vessel import Trajectory, simulate
from .wavefield import SpectrumParams, WaveComponents, discretize_spectrum

WORKERS_ENV = "SHIPID_WORKERS"


def worker_count(requested: int | None = None) -> int:
    """Resolve the worker count: explicit argument, else environment, else 1."""
    if requested is not None:
        return max(1, int(requested))
    raw = os.environ.get(WORKERS_ENV, "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def spectrum_params(cfg: ExperimentConfig) -> SpectrumParams:
    sp = cfg.spectrum
    return SpectrumParams(
        significant_wave_height=sp.significant_wave_height,
        peak_modal_period=sp.peak_modal_period,
        wave_heading=math.radians(sp.wave_heading_deg),
        gravity=sp.gravity,
    )


def components_for_seed(cfg: ExperimentConfig, seed: int) -> WaveComponents:
    """The wave realization of one run: shared bins, run-seeded phases."""
    params = spectrum_params(cfg)
    wp = params.peak_frequency
    band = (cfg.spectrum.omega_low_factor * wp, cfg.spectrum.omega_high_factor * wp)
    return discretize_spectrum(params, cfg.spectrum.n_components, band, seed=seed)


def simulate_seed(cfg: ExperimentConfig, seed: int) -> tuple[Trajectory, WaveComponents]:
    """Simulate the single run identified by ``seed``."""
    comps = components_for_seed(cfg, seed)
    sim = cfg.simulation
    traj = simulate(
        params=cfg.vessel,
        gains=cfg.pid.gains(),
        components=comps,
        mode=sim.mode,
        duration=sim.duration,
        dt=sim.time_step,
        turn_rudder=math.radians(sim.turn_rudder_deg),
        substeps=sim.substeps,
        seed=seed,
    )
    return traj, comps


def _simulate_star(args):
    cfg_dict, seed = args
    from .config import config_from_dict

    return simulate_seed(config_from_dict(cfg_dict), seed)


def simulate_ensemble(cfg: ExperimentConfig, seeds, workers: int = 1):
    """Simulate a list of seeds, optionally across processes.

    Returns parallel lists (trajectories, components) in seed order.
    """
    seeds = list(seeds)
    if workers <= 1 or len(seeds) < 2:
        results = [simulate_seed(cfg, s) for s in seeds]
    else:
        from .config import config_to_dict

        cfg_dict = config_to_dict(cfg)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_simulate_star, [(cfg_dict, s) for s in seeds], chunksize=1))
    trajs = [r[0] for r in results]
    comps = [r[1] for r in results]
    return trajs, comps


def training_seeds(cfg: ExperimentConfig, count: int | None = None):
    sim = cfg.simulation
    n = sim.n_training_runs if count is None else count
    return list(range(sim.training_seed_base, sim.training_seed_base + n))


def validation_seeds(cfg: ExperimentConfig, count: int | None = None):
    sim = cfg.simulation
    n = sim.n_validation_runs if count is None else count
    return list(range(sim.validation_seed_base, sim.validation_seed_base + n))


def cell_seed(base: int, n_probes: int, n_runs: int) -> int:
    """Deterministic per-cell initialization seed for study grids."""
    return int(base) + 1000 * int(n_probes) + int(n_runs)


def layout_for(cfg: ExperimentConfig, n_probes: int) -> ProbeLayout:
    return probe_layout(n_probes, spectrum_params(cfg).peak_wavelength)


def frames_for(
    trajectories, frame_source: str, training_frame: EncounterFrame | None = None
):
    """Resolve the frame argument for :func:`shipid.dataset.assemble`.

    ``estimated`` shares one frame (the training ensemble mean, passed in or
    computed here); ``actual`` gives every run its own track.
    """
    if frame_source == "actual":
        return [actual_frame(t) for t in trajectories]
    if frame_source != "estimated":
        raise ValueError("frame_source must be 'estimated' or 'actual'")
    if training_frame is None:
        training_frame = estimate_frame(trajectories)
    return training_frame


def train_settings(cfg: ExperimentConfig) -> TrainSettings:
    net = cfg.network
    return TrainSettings(
        units=net.units,
        n_layers=net.layers,
        dropout_rate=net.dropout,
        learning_rate=net.learning_rate,
        epochs=net.epochs,
        batch_policy=net.batch_policy,
        grad_clip_norm=net.grad_clip_norm,
        forget_bias=net.forget_bias,
        mask_per_step=net.mask_per_step,
    )


def build_training_set(
    cfg: ExperimentConfig,
    trajectories,
    components,
    layout: ProbeLayout,
    frame_source: str = "estimated",
) -> tuple[DatasetTensors, EncounterFrame]:
    """Assemble and standardize the training tensors.

    The returned frame is the estimated ensemble frame of these runs (always
    computed, for persistence), even when the tensors use actual frames.
    """
    est = estimate_frame(trajectories)
    frame = frames_for(trajectories, frame_source, est)
    tensors = assemble(trajectories, components, frame, layout, cfg.simulation.mode)
    return tensors, est


def build_validation_set(
    cfg: ExperimentConfig,
    trajectories,
    components,
    layout: ProbeLayout,
    training: DatasetTensors,
    training_frame: EncounterFrame,
    frame_source: str = "estimated",
) -> DatasetTensors:
    """Assemble validation tensors with the training standardizers.

    Estimated-frame models reuse the frozen training frame; actual-frame
    models follow each validation run's own track.
    """
    frame = frames_for(trajectories, frame_source, training_frame)
    return assemble(
        trajectories,
        components,
        frame,
        layout,
        cfg.simulation.mode,
        standardizers=(training.input_standardizer, training.output_standardizer),
    )


def predict_physical(model: LstmModel, tensors: DatasetTensors) -> np.ndarray:
    """Deterministic (dropout off) predictions for every run, physical units."""
    raw = forward(model, tensors.inputs)
    return model.output_standardizer.invert(raw)


def true_physical(tensors: DatasetTensors) -> np.ndarray:
    """Target channels of every run, de-standardized back to physical units."""
    return tensors.output_standardizer.invert(tensors.outputs)


def train_on(cfg: ExperimentConfig, tensors: DatasetTensors, init_seed: int | None = None):
    """Train with the config's hyperparameters; returns (model, history)."""
    seed = cfg.network.init_seed if init_seed is None else init_seed
    return train(tensors, train_settings(cfg), init_seed=seed)
