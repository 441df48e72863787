"""Recurrent network core: forward, gradients, training, prediction."""

import math
import warnings

import numpy as np
import pytest

from shipid.dataset import DatasetTensors, Standardizer
from shipid.lstm import (
    AdamState,
    LstmLayerParams,
    LstmModel,
    PredictionEnsemble,
    TrainSettings,
    TrainingDiverged,
    adam_step,
    backward,
    clip_gradients,
    forward,
    forward_cached,
    init_model,
    integrate_velocities,
    load_checkpoint,
    lstm_cell_forward,
    mc_predict,
    parameter_list,
    sample_masks,
    sample_masks_per_step,
    save_checkpoint,
    save_loss_history,
    sequence_loss,
    train,
)
from shipid.vessel import COURSE_KEEPING, TURNING_CIRCLE, PidGains, VesselParams, simulate
from shipid.wavefield import SpectrumParams, discretize_spectrum


def strong_model(seed, n_probes=2, units=3, n_layers=2, dropout=0.0):
    """A model whose weights are big enough that no gradient sits near zero."""
    model = init_model(seed, n_probes, units=units, n_layers=n_layers, dropout_rate=dropout)
    rng = np.random.default_rng(seed + 99)
    for p in parameter_list(model):
        if p.ndim == 2:
            p[:] = rng.uniform(-1.5, 1.5, p.shape)
        else:
            p[:] = rng.uniform(-0.5, 0.5, p.shape)
    return model


class TestCellStep:
    def test_hand_computed_single_unit(self):
        # One unit, one input: every gate is a scalar we can work out by hand.
        params = LstmLayerParams(
            W_f=[[0.5, -0.3]], W_i=[[0.2, 0.4]], W_C=[[-0.6, 0.1]], W_o=[[0.3, 0.7]],
            b_f=[0.1], b_i=[-0.2], b_C=[0.05], b_o=[0.0],
        )
        h_prev, c_prev, x = 0.3, -0.4, 0.9

        def sig(v):
            return 1.0 / (1.0 + math.exp(-v))

        f = sig(0.5 * h_prev - 0.3 * x + 0.1)
        i = sig(0.2 * h_prev + 0.4 * x - 0.2)
        g = math.tanh(-0.6 * h_prev + 0.1 * x + 0.05)
        c = f * c_prev + i * g
        o = sig(0.3 * h_prev + 0.7 * x)
        h = o * math.tanh(c)

        h_got, c_got = lstm_cell_forward([x], [h_prev], [c_prev], params)
        assert h_got[0] == pytest.approx(h, abs=1e-14)
        assert c_got[0] == pytest.approx(c, abs=1e-14)

    def test_width_mismatch(self):
        params = LstmLayerParams(
            W_f=np.zeros((2, 5)), W_i=np.zeros((2, 5)), W_C=np.zeros((2, 5)), W_o=np.zeros((2, 5)),
            b_f=np.zeros(2), b_i=np.zeros(2), b_C=np.zeros(2), b_o=np.zeros(2),
        )
        with pytest.raises(ValueError):
            lstm_cell_forward([1.0, 2.0], [0.0, 0.0], [0.0, 0.0], params)

    def test_layer_params_validation(self):
        with pytest.raises(ValueError):
            LstmLayerParams(
                W_f=np.zeros((3, 3)), W_i=np.zeros((3, 3)), W_C=np.zeros((3, 3)),
                W_o=np.zeros((3, 3)), b_f=np.zeros(3), b_i=np.zeros(3), b_C=np.zeros(3),
                b_o=np.zeros(3),
            )


class TestForward:
    def compose_by_cells(self, model, batch, masks=None):
        # Independent re-implementation: march the plain cell step by step.
        b_sz, t_len, _ = batch.shape
        outputs = np.empty((b_sz, t_len, 6))
        for b in range(b_sz):
            stream = batch[b]
            for li, layer in enumerate(model.layers):
                h = np.zeros(layer.units)
                c = np.zeros(layer.units)
                rows = np.empty((t_len, layer.units))
                for t in range(t_len):
                    h, c = lstm_cell_forward(stream[t], h, c, layer)
                    rows[t] = h
                if masks is not None:
                    rows = rows * masks[li][b]
                stream = rows
            outputs[b] = stream @ model.W_out.T + model.b_out
        return outputs

    def test_matches_cell_composition(self):
        model = strong_model(3)
        rng = np.random.default_rng(10)
        batch = rng.standard_normal((2, 5, 2))
        got = forward(model, batch)
        assert np.allclose(got, self.compose_by_cells(model, batch), atol=1e-12)

    def test_masked_paths_agree_with_composition(self):
        model = strong_model(4, dropout=0.4)
        rng = np.random.default_rng(11)
        batch = rng.standard_normal((3, 6, 2))
        masks = sample_masks(model, 3, np.random.default_rng(7))
        out, cache = forward_cached(model, batch, masks)
        assert np.allclose(out, self.compose_by_cells(model, batch, masks), atol=1e-12)
        assert cache.outputs is out

    def test_cached_and_inference_paths_agree(self):
        model = strong_model(5)
        rng = np.random.default_rng(12)
        batch = rng.standard_normal((4, 7, 2))
        cached, _ = forward_cached(model, batch)
        assert np.allclose(forward(model, batch), cached, atol=1e-12)

    def test_single_sequence_shape(self):
        model = strong_model(6)
        seq = np.random.default_rng(0).standard_normal((5, 2))
        out = forward(model, seq)
        assert out.shape == (5, 6)
        assert np.allclose(out, forward(model, seq[None])[0])

    def test_probe_width_checked(self):
        model = strong_model(7)
        with pytest.raises(ValueError):
            forward(model, np.zeros((4, 3)))

    def test_dropout_seed_changes_output(self):
        model = strong_model(8, dropout=0.3)
        seq = np.random.default_rng(1).standard_normal((6, 2))
        plain = forward(model, seq)
        a = forward(model, seq, dropout_seed=1)
        b = forward(model, seq, dropout_seed=1)
        c = forward(model, seq, dropout_seed=2)
        assert np.array_equal(a, b)
        assert not np.allclose(a, plain)
        assert not np.allclose(a, c)


class TestGradients:
    def check_gradients(self, model, batch, targets, masks=None, h=1e-6):
        _, cache = forward_cached(model, batch, masks)
        loss, grads = backward(model, cache, targets)
        params = parameter_list(model)
        worst = 0.0
        for p, g in zip(params, grads):
            it = np.nditer(p, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                keep = p[idx]
                p[idx] = keep + h
                up, _ = forward_cached(model, batch, masks)
                p[idx] = keep - h
                dn, _ = forward_cached(model, batch, masks)
                p[idx] = keep
                fd = (sequence_loss(up, targets) - sequence_loss(dn, targets)) / (2.0 * h)
                err = abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-3)
                worst = max(worst, err)
        return loss, worst

    def make_problem(self, seed, b_sz=3, t_len=4, dropout=0.0):
        model = strong_model(seed, dropout=dropout)
        rng = np.random.default_rng(seed + 7)
        batch = rng.standard_normal((b_sz, t_len, 2))
        targets = rng.standard_normal((b_sz, t_len, 6))
        masks = None
        if dropout > 0.0:
            masks = sample_masks(model, b_sz, np.random.default_rng(seed + 13))
        return model, batch, targets, masks

    def test_backprop_matches_finite_differences(self):
        model, batch, targets, _ = self.make_problem(1)
        _, worst = self.check_gradients(model, batch, targets)
        assert worst < 1e-5

    def test_backprop_with_dropout_masks(self):
        model, batch, targets, masks = self.make_problem(2, dropout=0.35)
        _, worst = self.check_gradients(model, batch, targets, masks)
        assert worst < 1e-5

    def test_loss_matches_direct_formula(self):
        model, batch, targets, _ = self.make_problem(3)
        out, cache = forward_cached(model, batch)
        loss, _ = backward(model, cache, targets)
        expected = np.sum((out - targets) ** 2) / out.shape[1] / out.shape[0]
        assert loss == pytest.approx(expected, rel=1e-12)
        assert loss == pytest.approx(sequence_loss(out, targets), rel=1e-12)

    def test_gradient_list_matches_parameter_list(self):
        model, batch, targets, _ = self.make_problem(4)
        _, cache = forward_cached(model, batch)
        _, grads = backward(model, cache, targets)
        params = parameter_list(model)
        assert len(grads) == len(params)
        for g, p in zip(grads, params):
            assert g.shape == p.shape

    def test_backward_rejects_bad_inputs(self):
        model, batch, targets, _ = self.make_problem(5)
        _, cache = forward_cached(model, batch)
        with pytest.raises(ValueError):
            backward(model, "not a cache", targets)
        with pytest.raises(ValueError):
            backward(model, cache, targets[:, :-1, :])


class TestMasks:
    def test_inverted_dropout_values(self):
        model = init_model(0, 2, units=50, n_layers=2, dropout_rate=0.3)
        masks = sample_masks(model, 200, np.random.default_rng(3))
        assert len(masks) == 2
        keep = 1.0 / 0.7
        for m in masks:
            assert m.shape == (200, 50)
            values = np.unique(m)
            assert len(values) == 2
            assert values[0] == 0.0
            assert values[1] == pytest.approx(keep, rel=1e-12)
            assert np.mean(m) == pytest.approx(1.0, abs=0.02)

    def test_zero_rate_means_identity(self):
        model = init_model(0, 2, units=4, n_layers=1, dropout_rate=0.0)
        masks = sample_masks(model, 5, np.random.default_rng(0))
        assert np.array_equal(masks[0], np.ones((5, 4)))

    def test_per_step_masks_vary_in_time(self):
        model = init_model(0, 2, units=20, n_layers=1, dropout_rate=0.4)
        masks = sample_masks_per_step(model, 3, 15, np.random.default_rng(5))
        assert masks[0].shape == (3, 15, 20)
        assert not np.array_equal(masks[0][:, 0, :], masks[0][:, 1, :])


class TestOptimizer:
    def test_first_step_is_learning_rate_sized(self):
        p = np.array([1.0])
        g = np.array([0.5])
        state = AdamState.for_params([p])
        adam_step([p], [g], state, lr=0.1)
        # With bias correction the first update is lr * g / |g| (epsilon aside).
        assert p[0] == pytest.approx(0.9, abs=1e-8)
        assert state.t == 1

    def test_hand_computed_second_step(self):
        p = np.array([1.0])
        state = AdamState.for_params([p])
        adam_step([p], [np.array([0.5])], state, lr=0.1)
        adam_step([p], [np.array([-0.25])], state, lr=0.1)
        p1 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8)
        m = 0.9 * (0.1 * 0.5) + 0.1 * (-0.25)
        v = 0.999 * (0.001 * 0.25) + 0.001 * 0.0625
        expected = p1 - 0.1 * (m / (1 - 0.9**2)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
        assert p[0] == pytest.approx(expected, abs=1e-12)

    def test_converges_on_quadratic(self):
        p = np.array([10.0, -4.0])
        state = AdamState.for_params([p])
        for _ in range(800):
            adam_step([p], [2.0 * (p - 3.0)], state, lr=0.05)
        assert np.allclose(p, 3.0, atol=1e-3)

    def test_alignment_checked(self):
        p = np.array([1.0])
        with pytest.raises(ValueError):
            adam_step([p], [np.zeros(1), np.zeros(1)], AdamState.for_params([p]), lr=0.1)

    def test_clip_rescales_to_max_norm(self):
        grads = [np.array([3.0, 0.0]), np.array([4.0])]
        norm = clip_gradients(grads, 2.5)
        assert norm == pytest.approx(5.0)
        clipped = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
        assert clipped == pytest.approx(2.5)

    def test_clip_leaves_small_gradients_alone(self):
        grads = [np.array([0.3, 0.4])]
        clip_gradients(grads, 10.0)
        assert np.array_equal(grads[0], [0.3, 0.4])
        clip_gradients(grads, None)
        assert np.array_equal(grads[0], [0.3, 0.4])


def linear_problem(m_runs=3, t_len=12, k=2, seed=0):
    """Targets are a fixed affine map of the instantaneous inputs."""
    rng = np.random.default_rng(seed)
    inputs = rng.standard_normal((m_runs, t_len, k))
    coefs = rng.uniform(-1.0, 1.0, (k, 6))
    outputs = inputs @ coefs
    return DatasetTensors(
        inputs=inputs,
        outputs=outputs,
        run_seeds=list(range(m_runs)),
        mode=COURSE_KEEPING,
        input_standardizer=Standardizer(np.zeros(k), np.ones(k)),
        output_standardizer=Standardizer(np.zeros(6), np.ones(6)),
    )


class TestTraining:
    def settings(self, **overrides):
        base = dict(
            units=6, n_layers=1, dropout_rate=0.0, learning_rate=0.02, epochs=120,
            batch_policy="full",
        )
        base.update(overrides)
        return TrainSettings(**base)

    def test_loss_drops_on_learnable_problem(self):
        data = linear_problem()
        model, history = train(data, self.settings(), init_seed=0)
        assert len(history) == 120
        assert history[-1] < 0.2 * history[0]
        assert model.meta["mode"] == COURSE_KEEPING

    def test_per_run_policy_learns_too(self):
        data = linear_problem()
        _, history = train(data, self.settings(batch_policy="per_run", epochs=60), init_seed=0)
        assert history[-1] < 0.5 * history[0]

    def test_reproducible_given_seed(self):
        data = linear_problem()
        m1, h1 = train(data, self.settings(epochs=10, dropout_rate=0.2), init_seed=5)
        m2, h2 = train(data, self.settings(epochs=10, dropout_rate=0.2), init_seed=5)
        m3, _ = train(data, self.settings(epochs=10, dropout_rate=0.2), init_seed=6)
        assert h1 == h2
        for a, b in zip(parameter_list(m1), parameter_list(m2)):
            assert np.array_equal(a, b)
        assert any(
            not np.array_equal(a, b) for a, b in zip(parameter_list(m1), parameter_list(m3))
        )

    def test_zero_epochs_returns_fresh_model(self):
        data = linear_problem()
        model, history = train(data, self.settings(epochs=0), init_seed=3)
        assert history == []
        fresh = init_model(
            3, data.n_probes, units=6, n_layers=1, dropout_rate=0.0,
            input_standardizer=data.input_standardizer,
            output_standardizer=data.output_standardizer,
        )
        for a, b in zip(parameter_list(model), parameter_list(fresh)):
            assert np.array_equal(a, b)

    def test_divergence_raises_with_epoch(self):
        data = linear_problem()
        wild = self.settings(learning_rate=1e160, epochs=50, grad_clip_norm=None)
        with warnings.catch_warnings():
            # The exploding step overflows on purpose before detection trips.
            warnings.simplefilter("ignore", RuntimeWarning)
            with pytest.raises(TrainingDiverged) as info:
                train(data, wild, init_seed=0)
        assert info.value.epoch >= 1

    def test_settings_validation(self):
        with pytest.raises(ValueError):
            TrainSettings(batch_policy="minibatch")
        with pytest.raises(ValueError):
            TrainSettings(epochs=-1)
        with pytest.raises(ValueError):
            TrainSettings(chunk_size=0)


class TestMcPredict:
    def make_model(self, dropout=0.25):
        model = strong_model(9, dropout=dropout)
        return model, np.random.default_rng(2).standard_normal((10, 2))

    def test_reproducible_and_seed_sensitive(self):
        model, seq = self.make_model()
        a = mc_predict(model, seq, n_samples=8, seed=4)
        b = mc_predict(model, seq, n_samples=8, seed=4)
        c = mc_predict(model, seq, n_samples=8, seed=5)
        assert np.array_equal(a.samples, b.samples)
        assert not np.allclose(a.samples, c.samples)

    def test_sample_identity_independent_of_ensemble_size(self):
        model, seq = self.make_model()
        big = mc_predict(model, seq, n_samples=5, seed=1)
        small = mc_predict(model, seq, n_samples=2, seed=1)
        assert np.allclose(big.samples[1], small.samples[1], rtol=1e-5, atol=1e-6)

    def test_no_dropout_collapses_spread(self):
        model, seq = self.make_model(dropout=0.0)
        ens = mc_predict(model, seq, n_samples=6, seed=0)
        assert np.all(ens.std == 0.0)
        assert np.array_equal(ens.samples[0], ens.samples[5])

    def test_band_is_five_sigma(self):
        model, seq = self.make_model()
        ens = mc_predict(model, seq, n_samples=16, seed=0)
        assert np.array_equal(ens.band_halfwidth, PredictionEnsemble.BAND_SIGMA * ens.std)
        assert PredictionEnsemble.BAND_SIGMA == 5.0

    def test_physical_units_restored(self):
        model, seq = self.make_model(dropout=0.0)
        shifted = LstmModel(
            layers=model.layers, W_out=model.W_out, b_out=model.b_out, dropout_rate=0.0,
            input_standardizer=model.input_standardizer,
            output_standardizer=Standardizer(np.full(6, 100.0), np.full(6, 10.0)),
        )
        raw = forward(model, seq)
        ens = mc_predict(shifted, seq, n_samples=2, seed=0, single_precision=False)
        assert np.allclose(ens.mean, raw * 10.0 + 100.0, atol=1e-12)

    def test_single_precision_close_to_double(self):
        model, seq = self.make_model()
        fast = mc_predict(model, seq, n_samples=4, seed=3, single_precision=True)
        slow = mc_predict(model, seq, n_samples=4, seed=3, single_precision=False)
        assert np.allclose(fast.samples, slow.samples, rtol=1e-4, atol=1e-4)

    def test_input_validation(self):
        model, seq = self.make_model()
        with pytest.raises(ValueError):
            mc_predict(model, seq, n_samples=0)
        with pytest.raises(ValueError):
            mc_predict(model, np.zeros((4, 9)))


class TestTrackIntegration:
    def test_straight_line(self):
        t_len = 50
        pred = np.zeros((t_len, 6))
        pred[:, 0] = 4.0
        x, y, yaw = integrate_velocities(pred, COURSE_KEEPING, dt=0.5, initial_pose=(10.0, -5.0, 0.0))
        assert np.allclose(x, 10.0 + 4.0 * np.arange(t_len) * 0.5)
        assert np.allclose(y, -5.0)
        assert np.allclose(yaw, 0.0)

    def test_constant_rate_turn_closes_a_circle(self):
        dt, rate, speed = 0.05, 0.1, 5.0
        t = np.arange(0.0, 2.0 * np.pi / rate, dt)
        pred = np.zeros((t.size, 6))
        pred[:, 0] = speed
        pred[:, 5] = rate
        x, y, yaw = integrate_velocities(pred, TURNING_CIRCLE, dt=dt)
        radius = speed / rate
        assert np.allclose(x, radius * np.sin(rate * t), atol=2e-3)
        assert np.allclose(y, radius * (1.0 - np.cos(rate * t)), atol=2e-3)
        assert yaw[-1] == pytest.approx(rate * t[-1])

    def test_recovers_simulated_track(self):
        comps = discretize_spectrum(SpectrumParams(7.5, 15.0, wave_heading=2.3), 40, seed=6)
        traj = simulate(VesselParams(), PidGains(), comps, COURSE_KEEPING, 60.0, dt=0.5)
        pred = np.column_stack(
            [traj.surge_vel, traj.sway_vel, traj.heave, traj.roll, traj.pitch, traj.yaw]
        )
        x, y, _ = integrate_velocities(pred, COURSE_KEEPING, dt=0.5)
        assert np.max(np.abs(x - traj.x)) < 1.0
        assert np.max(np.abs(y - traj.y)) < 1.0

    def test_validation(self):
        with pytest.raises(ValueError):
            integrate_velocities(np.zeros((5, 6)), "adrift", dt=0.5)
        with pytest.raises(ValueError):
            integrate_velocities(np.zeros((5, 5)), COURSE_KEEPING, dt=0.5)
        with pytest.raises(ValueError):
            integrate_velocities(np.zeros((5, 6)), COURSE_KEEPING, dt=0.0)


class TestCheckpoint:
    def test_roundtrip_preserves_predictions(self, tmp_path):
        model = strong_model(11, dropout=0.15)
        model.meta["mode"] = COURSE_KEEPING
        seq = np.random.default_rng(4).standard_normal((8, 2))
        path = tmp_path / "model.npz"
        save_checkpoint(
            path, model, loss_history=[3.0, 2.0, 1.5],
            extras={"probe_offsets": np.array([[0.0, 0.0], [5.0, 0.0]])},
        )
        back, history, extras = load_checkpoint(path)
        assert np.array_equal(forward(back, seq), forward(model, seq))
        assert back.dropout_rate == model.dropout_rate
        assert back.meta["mode"] == COURSE_KEEPING
        assert history == [3.0, 2.0, 1.5]
        assert np.array_equal(extras["probe_offsets"], [[0.0, 0.0], [5.0, 0.0]])

    def test_shape_tampering_detected(self, tmp_path):
        model = strong_model(12)
        path = tmp_path / "model.npz"
        save_checkpoint(path, model)
        blob = dict(np.load(path, allow_pickle=False))
        blob["layer0_W_f"] = np.zeros((1, 1))
        np.savez(path, **blob)
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_version_checked(self, tmp_path):
        import json

        model = strong_model(13)
        path = tmp_path / "model.npz"
        save_checkpoint(path, model)
        blob = dict(np.load(path, allow_pickle=False))
        meta = json.loads(str(blob["meta"]))
        meta["checkpoint_version"] = 99
        blob["meta"] = json.dumps(meta)
        np.savez(path, **blob)
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_loss_history_file(self, tmp_path):
        path = tmp_path / "loss.csv"
        save_loss_history(path, [2.5, 1.25])
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,loss"
        assert lines[1].startswith("1,2.5")
        assert len(lines) == 3


class TestInitModel:
    def test_seeded_and_bounded(self):
        a = init_model(7, 3, units=5, n_layers=2)
        b = init_model(7, 3, units=5, n_layers=2)
        for pa, pb in zip(parameter_list(a), parameter_list(b)):
            assert np.array_equal(pa, pb)
        first = a.layers[0]
        bound = 1.0 / math.sqrt(5 + 3)
        assert np.max(np.abs(first.W_f)) <= bound
        assert np.array_equal(first.b_f, np.ones(5))
        assert np.array_equal(first.b_i, np.zeros(5))

    def test_forget_bias_override(self):
        model = init_model(0, 2, units=4, forget_bias=0.0)
        assert np.array_equal(model.layers[0].b_f, np.zeros(4))

    def test_validation(self):
        with pytest.raises(ValueError):
            init_model(0, 0)
        with pytest.raises(ValueError):
            init_model(0, 2, units=4, n_layers=0)
        model = init_model(0, 2, units=4)
        with pytest.raises(ValueError):
            LstmModel(
                layers=model.layers, W_out=np.zeros((6, 3)), b_out=np.zeros(6),
                dropout_rate=0.1, input_standardizer=model.input_standardizer,
                output_standardizer=model.output_standardizer,
            )
        with pytest.raises(ValueError):
            LstmModel(
                layers=model.layers, W_out=model.W_out, b_out=model.b_out,
                dropout_rate=1.0, input_standardizer=model.input_standardizer,
                output_standardizer=model.output_standardizer,
            )
