import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from conftest import perturbed_params
from bcg2ecg.preprocess import preprocess_recording
from bcg2ecg.recording_io import SegmentPair
from bcg2ecg.synth import generate_subject, preset
from bcg2ecg.training import (
    DivergenceError,
    OptimizerState,
    TrainConfig,
    adam_step,
    backward,
    fit,
    loss_and_grads,
    mse_loss,
    train,
)
from bcg2ecg.transformer import ModelConfig, ModelParams, forward, init_params


def batch(config, n=2, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(n, config.seq_len)), rng.uniform(size=(n, config.seq_len))


class TestMSE:
    def test_equal_inputs(self):
        loss, grad = mse_loss(np.ones(500), np.ones(500))
        assert loss == 0.0
        assert not grad.any()

    def test_offset_by_one(self):
        loss, _ = mse_loss(np.arange(500.0) + 1, np.arange(500.0))
        assert loss == 1.0

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(0)
        pred, target = rng.normal(size=500), rng.normal(size=500)
        _, grad = mse_loss(pred, target)
        # the loss is quadratic, so a wide step has no truncation error and little cancellation
        numeric = oracles.central_difference(lambda: mse_loss(pred, target)[0], pred, h=1e-2)
        assert oracles.max_relative_error(grad, numeric, floor=1e-6) <= 1e-8

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mse_loss(np.zeros(3), np.zeros(4))


class TestBackward:
    def test_zero_upstream_gradient(self, tiny_config):
        params = perturbed_params(tiny_config)
        x, _ = batch(tiny_config)
        _, acts = forward(x, params)
        grads = backward(acts, np.zeros_like(x), params)
        assert all(not g.any() for g in grads.values())

    @pytest.mark.parametrize("seed", [0, 1])
    def test_all_parameters_match_finite_differences(self, tiny_config, seed):
        params = perturbed_params(tiny_config, seed=seed)
        x, y = batch(tiny_config, seed=seed)
        _, grads = loss_and_grads(params, x, y)
        for name in params.names():
            numeric = oracles.central_difference(lambda: loss_and_grads(params, x, y)[0], params[name])
            err = oracles.max_relative_error(grads[name].reshape(-1), numeric)
            assert err <= 1e-4, f"{name}: {err:.3g}"

    def test_two_layers_with_single_window(self):
        cfg = ModelConfig(seq_len=6, d_model=4, n_layers=2, n_heads=2, d_ff=6)
        params = perturbed_params(cfg, seed=3)
        rng = np.random.default_rng(3)
        x, y = rng.uniform(size=6), rng.uniform(size=6)
        _, grads = loss_and_grads(params, x, y)
        for name in params.names():
            numeric = oracles.central_difference(lambda: loss_and_grads(params, x, y)[0], params[name])
            assert oracles.max_relative_error(grads[name].reshape(-1), numeric) <= 1e-4, name

    def test_tied_weights_gradient_is_branch_sum(self, tiny_config):
        # Tie W_K to W_Q: d loss / d shared = grad via the query branch + grad via the key branch.
        params = perturbed_params(tiny_config, seed=5)
        params["layers.0.attn.w_k"] = params["layers.0.attn.w_q"].copy()
        x, y = batch(tiny_config, seed=5)
        _, grads = loss_and_grads(params, x, y)
        summed = (grads["layers.0.attn.w_q"] + grads["layers.0.attn.w_k"]).reshape(-1)
        shared = params["layers.0.attn.w_q"]

        def tied_loss():
            params["layers.0.attn.w_k"] = shared
            return loss_and_grads(params, x, y)[0]

        numeric = oracles.central_difference(tied_loss, shared)
        assert oracles.max_relative_error(summed, numeric) <= 1e-4

    def test_mismatched_activations(self, tiny_config):
        params = init_params(tiny_config)
        other = init_params(ModelConfig(seq_len=16, d_model=8, n_layers=2, n_heads=2, d_ff=16))
        _, acts = forward(np.zeros(16), other)
        with pytest.raises(ValueError):
            backward(acts, np.zeros(16), params)


class TestAdam:
    def test_zero_gradient_keeps_params(self, tiny_config):
        params = perturbed_params(tiny_config)
        before = params.copy()
        zeros = {n: np.zeros_like(params[n]) for n in params.names()}
        adam_step(params, zeros, OptimizerState.zeros_like(params), TrainConfig())
        assert all(np.array_equal(params[n], before[n]) for n in params.names())

    def test_zero_gradient_decays_moments(self, tiny_config):
        params = init_params(tiny_config)
        state = OptimizerState.zeros_like(params)
        for n in params.names():
            state.m[n] += 1.0
            state.v[n] += 1.0
        zeros = {n: np.zeros_like(params[n]) for n in params.names()}
        adam_step(params, zeros, state, TrainConfig())
        assert np.allclose(state.m["output_proj.bias"], 0.9)
        assert np.allclose(state.v["output_proj.bias"], 0.999)
        assert state.t == 1

    @given(st.floats(1e-3, 1e3), st.booleans())
    def test_first_step_closed_form(self, magnitude, negative):
        # m_hat = g and v_hat = g^2 after one step, so the update is lr * g / (|g| + eps)
        cfg = ModelConfig(seq_len=2, d_model=2, n_layers=1, n_heads=1, d_ff=2)
        params = init_params(cfg)
        before = params.copy()
        g = -magnitude if negative else magnitude
        grads = {n: np.full_like(params[n], g) for n in params.names()}
        tc = TrainConfig(learning_rate=1e-3)
        adam_step(params, grads, OptimizerState.zeros_like(params), tc)
        expected = tc.learning_rate * g / (abs(g) + tc.epsilon)
        for n in params.names():
            np.testing.assert_allclose(before[n] - params[n], expected, rtol=1e-9)
            np.testing.assert_allclose(np.abs(before[n] - params[n]), 1e-3, rtol=1e-5)

    def test_quadratic_descent(self):
        cfg = ModelConfig(seq_len=2, d_model=2, n_layers=1, n_heads=1, d_ff=2)
        params = init_params(cfg, seed=1)
        rng = np.random.default_rng(1)
        for n in params.names():
            params[n] = rng.normal(size=params[n].shape)
        state = OptimizerState.zeros_like(params)
        norms = []
        for _ in range(100):
            grads = {n: 2 * params[n] for n in params.names()}
            adam_step(params, grads, state, TrainConfig(learning_rate=1e-2))
            norms.append(np.sqrt(sum(float((params[n] ** 2).sum()) for n in params.names())))
        assert all(b < a for a, b in zip(norms[5:], norms[6:]))

    def test_nan_gradient_aborts(self, tiny_config):
        params = init_params(tiny_config)
        grads = {n: np.zeros_like(params[n]) for n in params.names()}
        grads["output_proj.bias"][0] = np.nan
        with pytest.raises(DivergenceError):
            adam_step(params, grads, OptimizerState.zeros_like(params), TrainConfig())


def pair(x, y, idx=0):
    return SegmentPair("s", idx, 0.0, x, y)


class TestTrain:
    def test_memorizes_single_pair(self):
        rec, _ = generate_subject(preset("lab", duration_s=10, seed=3), 0)
        seg = preprocess_recording(rec)[0]
        cfg = ModelConfig(seq_len=500, d_model=16, n_layers=1, n_heads=2, d_ff=32)
        _, history = train([seg], cfg, TrainConfig(epochs=200, learning_rate=1e-2, dtype="float64"))
        assert history[-1] < 0.01 * history[0]

    def test_moving_average_never_rises(self):
        rec, _ = generate_subject(preset("lab", duration_s=10, seed=4), 0)
        segs = preprocess_recording(rec)
        cfg = ModelConfig(seq_len=500, d_model=8, n_layers=1, n_heads=2, d_ff=16)
        _, history = train(segs, cfg, TrainConfig(epochs=50, learning_rate=1e-3, seed=1))
        ma = np.convolve(history, np.ones(10) / 10, mode="valid")
        assert np.all(np.diff(ma) <= 0)

    def test_same_seed_same_history(self, tiny_config):
        x, y = batch(tiny_config, n=10)
        cfg = TrainConfig(epochs=3, batch_size=4, learning_rate=1e-3, seed=9)
        a = fit(x, y, tiny_config, cfg)
        b = fit(x, y, tiny_config, cfg)
        assert a[1] == b[1]
        assert all(np.array_equal(a[0][n], b[0][n]) for n in a[0].names())

    def test_partial_batch_kept(self, tiny_config):
        x, y = batch(tiny_config, n=5)
        params, history = fit(x, y, tiny_config, TrainConfig(epochs=1, batch_size=4, seed=0))
        assert len(history) == 1
        assert isinstance(params, ModelParams)

    def test_rejects_degenerate_segments(self):
        cfg = ModelConfig(seq_len=500, d_model=4, n_layers=1, n_heads=1, d_ff=4)
        flat = pair(np.full(500, 0.5), np.linspace(0, 1, 500))
        with pytest.raises(ValueError, match="degenerate"):
            train([flat], cfg, TrainConfig(epochs=1))

    def test_empty_dataset(self, tiny_config):
        with pytest.raises(ValueError):
            train([], tiny_config, TrainConfig(epochs=1))

    def test_divergence_reports_position(self, tiny_config):
        x, y = batch(tiny_config, n=4)
        y[2, 3] = np.inf
        with pytest.raises(DivergenceError) as err:
            fit(x, y, tiny_config, TrainConfig(epochs=1, batch_size=2, seed=0))
        assert err.value.epoch == 0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(beta1=1.0)
        with pytest.raises(ValueError):
            TrainConfig(qk_init="zeros")
