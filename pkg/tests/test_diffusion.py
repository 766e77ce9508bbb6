import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gazepriv.core import identity_removal, position_to_velocity
from gazepriv.diffusion import (Conditioning, NoisyState, ReferenceDenoiser, TrainingConfig, forward_noising,
                                init_params, linear_schedule, load_model, loss, predict_x0, reverse_step,
                                sample, save_model, schedule_from_betas, train)
from gazepriv.diffusion.denoiser import PARAM_SHAPES, time_embedding
from gazepriv.diffusion.serialize import dumps, loads
from gazepriv.diffusion.training import Batch, batch_loss, prepare
from gazepriv.embedding import encode
from gazepriv.errors import ConfigError, NumericError, SchemaError, StepError
from gazepriv.sim import SimConfig, simulate_window

# exact rational product of (1 - beta_t) over the 50-step linear schedule
ALPHA_BAR_50 = 0.2796725001928843


# ---------------------------------------------------------------- schedule

def test_linear_schedule_endpoints():
    s = linear_schedule(50, 0.0001, 0.05)
    assert s.beta[0] == 0.0001 and s.beta[-1] == 0.05
    assert s.T == 50


def test_single_step_schedule():
    s = linear_schedule(1, 0.02, 0.02)
    np.testing.assert_array_equal(s.beta, [0.02])
    assert s.alpha_bar[0] == pytest.approx(0.98, abs=1e-15)


def test_alpha_bar_final_matches_direct_product():
    s = linear_schedule(50, 0.0001, 0.05)
    prod = 1.0
    for i in range(50):
        prod *= 1.0 - (0.0001 + (0.05 - 0.0001) * i / 49)
    assert s.alpha_bar[-1] == pytest.approx(prod, abs=1e-14)
    assert s.alpha_bar[-1] == pytest.approx(ALPHA_BAR_50, abs=1e-14)


def test_schedule_algebra():
    s = linear_schedule()
    np.testing.assert_allclose(s.alpha, 1 - s.beta, atol=0)
    assert np.all(np.diff(s.beta) >= 0)
    assert np.all(np.diff(s.alpha_bar) < 0)
    np.testing.assert_allclose(s.alpha_bar[1:] / s.alpha_bar[:-1], s.alpha[1:], atol=1e-12)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.05), (10, 0.0, 0.05), (10, 0.1, 0.05), (10, 1e-4, 1.0)])
def test_schedule_rejects_bad_config(args):
    with pytest.raises(ConfigError):
        linear_schedule(*args)


def test_sigma_posterior_and_beta():
    s = linear_schedule()
    assert s.sigma(1) == 0.0 and s.sigma(1, "beta") == 0.0
    t = 20
    expected = s.beta[t - 1] * (1 - s.alpha_bar[t - 2]) / (1 - s.alpha_bar[t - 1])
    assert s.sigma(t) ** 2 == pytest.approx(expected, rel=1e-12)
    assert s.sigma(t, "beta") ** 2 == pytest.approx(s.beta[t - 1], rel=1e-12)
    with pytest.raises(ConfigError):
        s.sigma(t, "learned")


# ---------------------------------------------------------------- forward / inverse

def test_forward_with_zero_noise():
    s = linear_schedule()
    x0 = np.arange(6.0).reshape(2, 3)
    st_ = forward_noising(x0, 10, np.zeros_like(x0), s)
    np.testing.assert_array_equal(st_.xt, np.sqrt(s.alpha_bar[9]) * x0)


def test_forward_with_quarter_alpha_bar():
    s = schedule_from_betas([0.75])
    x0, eps = np.array([1.0, -2.0]), np.array([0.5, 0.25])
    np.testing.assert_allclose(forward_noising(x0, 1, eps, s).xt, 0.5 * x0 + math.sqrt(0.75) * eps, atol=1e-15)
    np.testing.assert_allclose(predict_x0(NoisyState(x0, 1), np.zeros(2), s), 2 * x0, atol=1e-15)


def test_forward_step_errors():
    s = linear_schedule()
    with pytest.raises(StepError):
        forward_noising(np.zeros(3), 0, np.zeros(3), s)
    with pytest.raises(StepError):
        forward_noising(np.zeros(3), 51, np.zeros(3), s)
    with pytest.raises(ConfigError):
        forward_noising(np.zeros(3), 1, np.zeros(4), s)


def test_forward_variance_preserved():
    s = linear_schedule()
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal(100_000)
    eps = rng.standard_normal(100_000)
    for t in range(1, s.T + 1):
        var = forward_noising(x0, t, eps, s).xt.var()
        assert 0.98 <= var <= 1.02


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 50), st.integers(0, 2 ** 32 - 1))
def test_predict_x0_inverts_forward(t, seed):
    s = linear_schedule()
    rng = np.random.default_rng(seed)
    x0 = rng.normal(0, 3, (2, 64))
    eps = rng.standard_normal((2, 64))
    rec = predict_x0(forward_noising(x0, t, eps, s), eps, s)
    assert np.abs(rec - x0).max() < 1e-8


def test_reverse_step_t1_is_posterior_mean():
    s = linear_schedule()
    rng = np.random.default_rng(2)
    xt, eps_hat, noise = rng.standard_normal((3, 2, 16))
    out = reverse_step(NoisyState(xt, 1), eps_hat, noise, s)
    mean = (xt - s.beta[0] / np.sqrt(1 - s.alpha_bar[0]) * eps_hat) / np.sqrt(s.alpha[0])
    np.testing.assert_array_equal(out.xt, mean)
    assert out.t == 0


def test_reverse_step_rejects_t0():
    with pytest.raises(StepError):
        reverse_step(NoisyState(np.zeros(2), 0), np.zeros(2), np.zeros(2), linear_schedule())


def test_single_step_schedule_reverse_recovers_x0():
    s = schedule_from_betas([0.3])
    x0, eps = np.array([1.5, -0.5]), np.array([0.2, 0.7])
    st_ = forward_noising(x0, 1, eps, s)
    np.testing.assert_allclose(reverse_step(st_, eps, np.zeros(2), s).xt, x0, atol=1e-9)


def test_noiseless_chain_with_true_eps_reaches_x0():
    s = linear_schedule()
    rng = np.random.default_rng(5)
    x0 = rng.normal(0, 1, (2, 32))
    eps = rng.standard_normal((2, 32))
    state = forward_noising(x0, s.T, eps, s)
    while state.t >= 1:
        # the noise consistent with x0 at this step
        ab = s.alpha_bar_at(state.t)
        true_eps = (state.xt - np.sqrt(ab) * x0) / np.sqrt(1 - ab)
        state = reverse_step(state, true_eps, np.zeros_like(x0), s, "beta")
    assert np.abs(state.xt - x0).max() < 1e-6


# ---------------------------------------------------------------- sampling

class ZeroDenoiser:
    def __call__(self, xt, t, cond):
        return np.zeros_like(xt)


def test_sample_deterministic():
    s = linear_schedule()
    cond = Conditioning(np.zeros((2, 40)), np.zeros(128))
    model = ReferenceDenoiser(init_params(1))
    a = sample(model, cond, s, 7).stacked
    b = sample(model, cond, s, 7).stacked
    assert a.tobytes() == b.tobytes()


def test_sample_zero_denoiser_matches_recursion():
    s = linear_schedule()
    cond = Conditioning(np.zeros((2, 10)), np.zeros(128))
    out = sample(ZeroDenoiser(), cond, s, 11).stacked
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 10))
    for t in range(s.T, 0, -1):
        alpha = 1 - (0.0001 + (0.05 - 0.0001) * (t - 1) / 49)
        x = x / math.sqrt(alpha)
        if t > 1:
            ab_t = np.prod([1 - (0.0001 + (0.05 - 0.0001) * i / 49) for i in range(t)])
            ab_prev = ab_t / alpha
            sigma = math.sqrt((1 - alpha) * (1 - ab_prev) / (1 - ab_t))
            x = x + sigma * rng.standard_normal((2, 10))
    np.testing.assert_allclose(out, x, rtol=1e-10, atol=1e-10)


def test_sample_scale_applied():
    s = linear_schedule(3, 0.01, 0.02)
    cond = Conditioning(np.zeros((2, 5)), np.zeros(128))
    a = sample(ZeroDenoiser(), cond, s, 3).stacked
    b = sample(ZeroDenoiser(), cond, s, 3, scale=100.0).stacked
    np.testing.assert_allclose(b, 100 * a, rtol=1e-12)


def test_sample_non_finite_names_step():
    class Bad:
        def __call__(self, xt, t, cond):
            return np.full_like(xt, np.nan) if t == 37 else np.zeros_like(xt)

    with pytest.raises(NumericError, match="step 37"):
        sample(Bad(), Conditioning(np.zeros((2, 4)), np.zeros(128)), linear_schedule(), 0)


# ---------------------------------------------------------------- loss

def test_loss_zero_cases():
    rng = np.random.default_rng(0)
    eps = rng.standard_normal((2, 300))
    v = rng.normal(0, 50, (2, 300))
    assert loss(eps, eps, v, v, 0.1, encode) == pytest.approx(0.0, abs=1e-12)
    assert loss(eps, eps, v, rng.normal(0, 50, (2, 300)), 0.0, encode) == 0.0


def test_loss_matches_scalar_loop():
    rng = np.random.default_rng(9)
    eps, eps_hat = rng.standard_normal((2, 2, 400))
    v, v_hat = rng.normal(0, 80, (2, 2, 400))
    mse = sum((a - b) ** 2 for a, b in zip(eps.ravel(), eps_hat.ravel())) / eps.size
    za, zb = encode(v_hat), encode(v)
    dot = sum(float(a) * float(b) for a, b in zip(za, zb))
    expected = mse + 0.1 * (1 - dot)
    assert loss(eps, eps_hat, v, v_hat, 0.1, encode) == pytest.approx(expected, abs=1e-10)


def test_loss_rejects_negative_lambda():
    with pytest.raises(ConfigError):
        loss(np.zeros(2), np.zeros(2), np.zeros((2, 2)), np.zeros((2, 2)), -1.0, encode)


# ---------------------------------------------------------------- denoiser

def test_denoiser_parameter_count_and_shapes():
    model = ReferenceDenoiser(init_params(0))
    assert model.n_parameters() == sum(int(np.prod(s)) for s in PARAM_SHAPES.values())
    assert model.params["conv1_w"].shape == (5, 5, 32)


@pytest.mark.parametrize("n", [8, 64, 501])
def test_denoiser_output_shape(n):
    model = ReferenceDenoiser(init_params(0))
    rng = np.random.default_rng(n)
    cond = Conditioning(rng.standard_normal((2, n)), rng.standard_normal(128))
    for t in (1, 25, 50):
        assert model(rng.standard_normal((2, n)), t, cond).shape == (2, n)


def test_time_embedding_distinguishes_steps():
    e = time_embedding(np.arange(1, 51))
    assert e.shape == (50, 16)
    assert len({row.tobytes() for row in e}) == 50


def test_backward_matches_finite_difference_on_output_sum():
    # dual route to the full-loss check: gradient of a linear functional of the output
    model = ReferenceDenoiser(init_params(3))
    rng = np.random.default_rng(3)
    x, v0 = rng.standard_normal((2, 2, 12, 2))
    z = rng.standard_normal((2, 128))
    t = np.array([4, 40])
    w = rng.standard_normal((2, 12, 2))
    _, cache = model.forward(x, t, v0, z)
    grads = model.backward(cache, w)
    h = 1e-6
    for name in sorted(PARAM_SHAPES):
        p = model.params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        orig = p[idx]
        p[idx] = orig + h
        plus = np.sum(model.forward(x, t, v0, z)[0] * w)
        p[idx] = orig - h
        minus = np.sum(model.forward(x, t, v0, z)[0] * w)
        p[idx] = orig
        num = (plus - minus) / (2 * h)
        assert abs(num - grads[name][idx]) <= 1e-6 * max(1.0, abs(num)), name


def test_batch_loss_matches_standalone_loss():
    sim = simulate_window(SimConfig(task="RAN"), seed=4)
    x0, v0, z = prepare([sim.window], 100.0)
    model = ReferenceDenoiser(init_params(5))
    s = linear_schedule()
    rng = np.random.default_rng(0)
    t = np.array([17])
    eps = rng.standard_normal(x0.shape)
    value, _ = batch_loss(model, Batch(x0, v0, z, t, eps), s, 0.1, with_grad=False)
    ab = s.alpha_bar[16]
    xt = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
    eps_hat, _ = model.forward(xt, t, v0, z)
    v_hat = 100.0 * (xt - np.sqrt(1 - ab) * eps_hat) / np.sqrt(ab)
    v = position_to_velocity(sim.window).stacked
    expected = loss(eps[0].T, eps_hat[0].T, v, v_hat[0].T, 0.1, encode)
    assert value == pytest.approx(expected, abs=1e-10)


def test_prepare_uses_identity_removal():
    sim = simulate_window(SimConfig(), seed=1)
    _, v0, _ = prepare([sim.window], 100.0)
    ir = identity_removal(position_to_velocity(sim.window))
    np.testing.assert_array_equal(v0[0], ir.stacked.T)


# ---------------------------------------------------------------- config and serialization

def test_training_config_defaults():
    cfg = TrainingConfig()
    assert (cfg.learning_rate, cfg.batch_size, cfg.lam) == (0.0002, 32, 0.1)


@pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"lam": -0.1}, {"variance": "learned"}])
def test_training_config_invariants(kw):
    with pytest.raises(ConfigError):
        TrainingConfig(**kw)


def test_training_config_json_roundtrip(tmp_path):
    cfg = TrainingConfig(epochs=3, lam=0.5, rng_seed=9)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert TrainingConfig.from_json(path) == cfg
    with pytest.raises(ConfigError):
        TrainingConfig.from_dict({"epochz": 1})


def test_zero_epochs_leaves_parameters(tmp_path):
    windows = [simulate_window(SimConfig(), seed=i).window for i in range(4)]
    params = init_params(2)
    res = train(windows, TrainingConfig(epochs=0, batch_size=4), params)
    assert res.epoch_loss == []
    for k in params:
        np.testing.assert_array_equal(res.model.params[k], params[k])


def test_train_needs_a_full_batch():
    with pytest.raises(ConfigError):
        train([simulate_window(SimConfig(), seed=0).window], TrainingConfig(epochs=1))


def test_serialization_roundtrip(tmp_path):
    model = ReferenceDenoiser(init_params(4), velocity_scale=80.0)
    save_model(tmp_path / "m.gzdn", model)
    back = load_model(tmp_path / "m.gzdn")
    assert back.velocity_scale == 80.0
    for k in PARAM_SHAPES:
        assert back.params[k].tobytes() == model.params[k].tobytes()
    raw = (tmp_path / "m.gzdn").read_bytes()
    assert raw[:4] == b"GZDN"
    assert dumps(loads(raw)) == raw


@pytest.mark.parametrize("mutate", [lambda b: b"XXXX" + b[4:], lambda b: b + b"\0",
                                    lambda b: b[:4] + (9).to_bytes(4, "little") + b[8:]])
def test_serialization_rejects_corruption(mutate):
    raw = dumps({"a": np.arange(3.0)})
    with pytest.raises(SchemaError):
        loads(mutate(raw))
