"""Standardization, tensor assembly, and dataset persistence."""

import json

import numpy as np
import pytest

from shipid.dataset import (
    OUTPUT_COLUMNS,
    DatasetTensors,
    Standardizer,
    assemble,
    build_outputs,
    load_dataset,
    save_dataset,
)
from shipid.encounter import EncounterFrame, actual_frame, estimate_frame, probe_layout
from shipid.vessel import COURSE_KEEPING, TURNING_CIRCLE, Trajectory
from shipid.wavefield import SpectrumParams, discretize_spectrum

GRID = np.arange(12) * 0.5


def make_traj(seed):
    rng = np.random.default_rng(seed)
    fields = {name: rng.standard_normal(12) for name in Trajectory._FIELDS}
    fields["times"] = GRID
    fields["x"] = np.linspace(0.0, 60.0, 12) + rng.normal(0, 1, 12)
    return Trajectory(**fields, seed=seed)


def make_components(seed):
    return discretize_spectrum(SpectrumParams(7.5, 15.0, wave_heading=2.0), 10, seed=seed)


class TestStandardizer:
    def test_fit_matches_population_moments(self):
        rng = np.random.default_rng(0)
        data = rng.normal(3.0, 2.0, (5, 40, 3))
        std = Standardizer.fit(data)
        flat = data.reshape(-1, 3)
        assert np.allclose(std.mean, flat.mean(axis=0))
        assert np.allclose(std.std, flat.std(axis=0, ddof=0))

    def test_apply_invert_roundtrip(self):
        rng = np.random.default_rng(1)
        data = rng.normal(-1.0, 5.0, (4, 7, 2))
        std = Standardizer.fit(data)
        normalized = std.apply(data)
        assert np.allclose(normalized.mean(axis=(0, 1)), 0.0, atol=1e-12)
        assert np.allclose(normalized.std(axis=(0, 1)), 1.0, atol=1e-12)
        assert np.allclose(std.invert(normalized), data, atol=1e-12)

    def test_zero_spread_channel_reported(self):
        data = np.random.default_rng(2).normal(0, 1, (30, 3))
        data[:, 1] = 4.0  # binary-exact so the column spread is exactly zero
        with pytest.raises(ValueError, match="channel 1"):
            Standardizer.fit(data)

    def test_width_mismatch_rejected(self):
        std = Standardizer.fit(np.random.default_rng(3).normal(0, 1, (10, 2)))
        with pytest.raises(ValueError):
            std.apply(np.zeros((5, 3)))
        with pytest.raises(ValueError):
            std.invert(np.zeros((5, 3)))

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            Standardizer.fit(np.zeros((1, 4)))

    def test_rejects_nonpositive_std(self):
        with pytest.raises(ValueError):
            Standardizer(np.zeros(2), np.array([1.0, 0.0]))


class TestBuildOutputs:
    def test_course_keeping_carries_yaw_angle(self):
        traj = make_traj(0)
        out = build_outputs(traj, COURSE_KEEPING)
        assert out.shape == (12, 6)
        order = OUTPUT_COLUMNS[COURSE_KEEPING]
        for j, name in enumerate(order):
            assert np.array_equal(out[:, j], getattr(traj, name))
        assert "yaw" in order and "yaw_rate" not in order

    def test_turning_circle_swaps_in_yaw_rate(self):
        traj = make_traj(0)
        out = build_outputs(traj, TURNING_CIRCLE)
        order = OUTPUT_COLUMNS[TURNING_CIRCLE]
        assert "yaw_rate" in order and "yaw" not in order
        assert np.array_equal(out[:, order.index("yaw_rate")], traj.yaw_rate)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            build_outputs(make_traj(0), "drifting")


class TestAssemble:
    def build(self, n_runs=4, **kwargs):
        trajs = [make_traj(i) for i in range(n_runs)]
        comps = [make_components(i) for i in range(n_runs)]
        frame = estimate_frame(trajs)
        layout = probe_layout(3, 200.0)
        return assemble(trajs, comps, frame, layout, COURSE_KEEPING, **kwargs), trajs, comps

    def test_training_tensors_are_standardized(self):
        tensors, _, _ = self.build()
        assert tensors.inputs.shape == (4, 12, 3)
        assert tensors.outputs.shape == (4, 12, 6)
        assert np.allclose(tensors.inputs.reshape(-1, 3).mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(tensors.inputs.reshape(-1, 3).std(axis=0), 1.0, atol=1e-12)
        assert np.allclose(tensors.outputs.reshape(-1, 6).mean(axis=0), 0.0, atol=1e-12)
        assert tensors.run_seeds == [0, 1, 2, 3]

    def test_validation_reuses_training_statistics(self):
        train, trajs, comps = self.build()
        val_trajs = [make_traj(i + 100) for i in range(2)]
        val_comps = [make_components(i + 100) for i in range(2)]
        frame = estimate_frame(trajs)
        layout = probe_layout(3, 200.0)
        pair = (train.input_standardizer, train.output_standardizer)
        val = assemble(val_trajs, val_comps, frame, layout, COURSE_KEEPING, standardizers=pair)
        # The statistics come from training, so validation channels are close
        # to but not exactly centered.
        assert val.input_standardizer is train.input_standardizer
        means = val.outputs.reshape(-1, 6).mean(axis=0)
        assert not np.allclose(means, 0.0, atol=1e-9)
        assert np.all(np.abs(means) < 3.0)

    def test_no_leakage_from_validation_runs(self):
        # Training statistics must be a function of the training runs alone.
        first, trajs, comps = self.build(n_runs=4)
        again, _, _ = self.build(n_runs=4)
        assert np.array_equal(first.input_standardizer.mean, again.input_standardizer.mean)
        assert np.array_equal(first.output_standardizer.std, again.output_standardizer.std)

    def test_per_run_frames(self):
        trajs = [make_traj(i) for i in range(3)]
        comps = [make_components(i) for i in range(3)]
        frames = [actual_frame(t) for t in trajs]
        tensors = assemble(trajs, comps, frames, probe_layout(2, 150.0), COURSE_KEEPING)
        assert tensors.n_runs == 3
        # A shared-frame assembly gives different probe signals.
        shared = assemble(trajs, comps, estimate_frame(trajs), probe_layout(2, 150.0), COURSE_KEEPING)
        assert not np.allclose(tensors.input_standardizer.mean, shared.input_standardizer.mean)

    def test_count_mismatches_rejected(self):
        trajs = [make_traj(i) for i in range(3)]
        comps = [make_components(i) for i in range(2)]
        with pytest.raises(ValueError):
            assemble(trajs, comps, estimate_frame(trajs), probe_layout(2, 150.0), COURSE_KEEPING)
        comps = [make_components(i) for i in range(3)]
        frames = [actual_frame(t) for t in trajs[:2]]
        with pytest.raises(ValueError):
            assemble(trajs, comps, frames, probe_layout(2, 150.0), COURSE_KEEPING)

    def test_grid_mismatch_rejected(self):
        trajs = [make_traj(i) for i in range(2)]
        frame = EncounterFrame(np.arange(12) * 0.25, np.zeros((12, 2)), np.zeros(12))
        comps = [make_components(i) for i in range(2)]
        with pytest.raises(ValueError):
            assemble(trajs, comps, frame, probe_layout(2, 150.0), COURSE_KEEPING)


class TestTensorContainer:
    def test_shape_validation(self):
        std2 = Standardizer(np.zeros(2), np.ones(2))
        std6 = Standardizer(np.zeros(6), np.ones(6))
        good = dict(
            inputs=np.zeros((2, 5, 2)),
            outputs=np.zeros((2, 5, 6)),
            run_seeds=[1, 2],
            mode=COURSE_KEEPING,
            input_standardizer=std2,
            output_standardizer=std6,
        )
        DatasetTensors(**good)
        with pytest.raises(ValueError):
            DatasetTensors(**{**good, "outputs": np.zeros((2, 5, 5))})
        with pytest.raises(ValueError):
            DatasetTensors(**{**good, "run_seeds": [1]})
        with pytest.raises(ValueError):
            DatasetTensors(**{**good, "inputs": np.zeros((3, 5, 2))})
        with pytest.raises(ValueError):
            DatasetTensors(**{**good, "mode": "adrift"})
        with pytest.raises(ValueError):
            DatasetTensors(**{**good, "input_standardizer": std6})


class TestPersistence:
    def build(self):
        trajs = [make_traj(i) for i in range(3)]
        comps = [make_components(i) for i in range(3)]
        return assemble(trajs, comps, estimate_frame(trajs), probe_layout(3, 200.0), COURSE_KEEPING)

    @pytest.mark.parametrize("storage", ["binary", "text"])
    def test_roundtrip_exact(self, tmp_path, storage):
        tensors = self.build()
        save_dataset(tmp_path / "ds", tensors, storage=storage)
        back = load_dataset(tmp_path / "ds")
        assert np.array_equal(back.inputs, tensors.inputs)
        assert np.array_equal(back.outputs, tensors.outputs)
        assert back.run_seeds == tensors.run_seeds
        assert back.mode == tensors.mode
        assert np.array_equal(back.input_standardizer.mean, tensors.input_standardizer.mean)
        assert np.array_equal(back.output_standardizer.std, tensors.output_standardizer.std)

    def test_missing_meta(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)

    def test_version_check(self, tmp_path):
        tensors = self.build()
        save_dataset(tmp_path / "ds", tensors)
        meta_path = tmp_path / "ds" / "meta"
        meta = json.loads(meta_path.read_text())
        meta["format_version"] = 99
        meta_path.write_text(json.dumps(meta))
        with pytest.raises(ValueError):
            load_dataset(tmp_path / "ds")

    def test_truncated_matrix_detected(self, tmp_path):
        tensors = self.build()
        save_dataset(tmp_path / "ds", tensors)
        victim = tmp_path / "ds" / "inputs_0001.f64"
        victim.write_bytes(victim.read_bytes()[:-16])
        with pytest.raises(ValueError):
            load_dataset(tmp_path / "ds")

    def test_unknown_storage_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            save_dataset(tmp_path / "ds", self.build(), storage="parquet")
