"""Toolkit for learning 6-DoF ship motion responses in irregular seas.

The package generates synthetic seakeeping data with a reduced-order vessel
simulator, turns trajectory ensembles into wave-probe input tensors, trains a
stacked LSTM regressor written directly on numpy, and evaluates prediction
quality against the simulator it learned from.
"""

__version__ = "0.1.0"

from .wavefield import (
    SpectrumParams,
    WaveComponents,
    discretize_spectrum,
    elevation_at,
    spectral_density,
    wavenumber,
)
from .vessel import PidGains, SimulationDiverged, Trajectory, VesselParams, simulate
from .encounter import EncounterFrame, ProbeLayout, actual_frame, estimate_frame, probe_layout
from .dataset import DatasetTensors, Standardizer, assemble, build_outputs
from .lstm import (
    LstmModel,
    PredictionEnsemble,
    TrainSettings,
    TrainingDiverged,
    init_model,
    forward,
    mc_predict,
    train,
)

__all__ = [
    "SpectrumParams",
    "WaveComponents",
    "discretize_spectrum",
    "elevation_at",
    "spectral_density",
    "wavenumber",
    "PidGains",
    "SimulationDiverged",
    "Trajectory",
    "VesselParams",
    "simulate",
    "EncounterFrame",
    "ProbeLayout",
    "actual_frame",
    "estimate_frame",
    "probe_layout",
    "DatasetTensors",
    "Standardizer",
    "assemble",
    "build_outputs",
    "LstmModel",
    "PredictionEnsemble",
    "TrainSettings",
    "TrainingDiverged",
    "init_model",
    "forward",
    "mc_predict",
    "train",
]
