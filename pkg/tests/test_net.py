import numpy as np
import pytest

from wavestack.audio import AudioBuffer, MelSpectrogram
from wavestack.diffusion import linear_betas, make_schedule
from wavestack.errors import ConfigError, ShapeError, StateError
from wavestack.net import (
    NetConfig,
    backward,
    backward_batch,
    forward_batch,
    forward_cached,
    init_model,
    predict_noise,
)

TINY = NetConfig(
    n_layers=2,
    layers_per_block=2,
    residual_channels=4,
    mel_bands=4,
    step_embed_dim=8,
    step_hidden_dim=8,
    has_lowrate_cond=True,
    upsample_factor=8,
)


def make_mel(n_frames, n_mels, rng, hop=8, rate=24000):
    return MelSpectrogram(rng.standard_normal((n_frames, n_mels)), n_mels, hop, 64, rate)


def randomize_head(params, rng):
    # zero-initialized head blocks gradient flow; give it values for grad tests
    c = params.cfg.residual_channels
    params.tensors["head/w2"] = (rng.standard_normal((1, c)) * 0.3).astype(params.dtype)
    params.tensors["head/b2"] = (rng.standard_normal(1) * 0.1).astype(params.dtype)


def test_init_deterministic():
    a = init_model(TINY, 42)
    b = init_model(TINY, 42)
    assert a.tensors.keys() == b.tensors.keys()
    for key in a.tensors:
        np.testing.assert_array_equal(a.tensors[key], b.tensors[key])
    c = init_model(TINY, 43)
    assert any(not np.array_equal(a.tensors[k], c.tensors[k]) for k in a.tensors)


def test_init_zero_head_zero_output(rng):
    params = init_model(TINY, 0)
    assert np.all(params.tensors["head/w2"] == 0.0)
    assert np.all(params.tensors["head/b2"] == 0.0)
    x = rng.standard_normal((3, 64))
    mel = rng.standard_normal((3, 8, 4))
    low = rng.standard_normal((3, 64))
    out, _ = forward_batch(params, x, mel, low, np.array([1, 2, 3]))
    assert np.all(out == 0.0)


@pytest.mark.parametrize("n", [75, 300, 2400])
def test_output_length_matches_input(rng, n):
    cfg = NetConfig(
        n_layers=4,
        layers_per_block=2,
        residual_channels=8,
        mel_bands=6,
        step_embed_dim=8,
        step_hidden_dim=16,
        has_lowrate_cond=False,
        upsample_factor=75,
    )
    params = init_model(cfg, 1)
    randomize_head(params, rng)
    frames = -(-n // cfg.upsample_factor)
    out, _ = forward_batch(
        params, rng.standard_normal((1, n)), rng.standard_normal((1, frames, 6)), None, [2]
    )
    assert out.shape == (1, n)


def test_forward_deterministic(rng):
    params = init_model(TINY, 9)
    randomize_head(params, rng)
    x = rng.standard_normal((2, 64))
    mel = rng.standard_normal((2, 8, 4))
    low = rng.standard_normal((2, 64))
    a, _ = forward_batch(params, x, mel, low, [1, 2])
    b, _ = forward_batch(params, x, mel, low, [1, 2])
    np.testing.assert_array_equal(a, b)


def test_translation_covariance(rng):
    cfg = NetConfig(
        n_layers=4,
        layers_per_block=2,
        residual_channels=8,
        mel_bands=6,
        step_embed_dim=8,
        step_hidden_dim=16,
        has_lowrate_cond=True,
        upsample_factor=8,
    )
    params = init_model(cfg, 5)
    randomize_head(params, rng)
    n, shift = 256, 16  # shift = 2 mel frames
    frames = n // cfg.upsample_factor
    x = rng.standard_normal(n + shift)
    low = rng.standard_normal(n + shift)
    mel = rng.standard_normal((frames + shift // cfg.upsample_factor, 6))
    out1, _ = forward_batch(
        params, x[None, :n], mel[None, :frames], low[None, :n], [3]
    )
    out2, _ = forward_batch(
        params,
        x[None, shift : shift + n],
        mel[None, shift // cfg.upsample_factor :],
        low[None, shift : shift + n],
        [3],
    )
    rf = cfg.receptive_field
    np.testing.assert_allclose(
        out2[0, rf : n - rf - shift], out1[0, shift + rf : n - rf], atol=1e-6
    )


def test_receptive_field_formula():
    cfg = NetConfig(
        n_layers=24, layers_per_block=8, residual_channels=4, mel_bands=4,
        step_embed_dim=8, step_hidden_dim=8, upsample_factor=300,
    )
    # 3 blocks of dilations 1..128: 1 + 2 * 3 * 255
    assert cfg.receptive_field == 1 + 2 * 3 * (2**8 - 1)


def test_receptive_field_seconds_doubles_at_half_rate():
    cfg = NetConfig(
        n_layers=24, layers_per_block=8, residual_channels=4, mel_bands=4,
        step_embed_dim=8, step_hidden_dim=8, upsample_factor=300,
    )
    spans = {rate: cfg.receptive_field / rate for rate in (24000, 12000, 6000)}
    assert spans[12000] == pytest.approx(2 * spans[24000])
    assert spans[6000] == pytest.approx(2 * spans[12000])


def test_dilation_cycle():
    cfg = NetConfig(
        n_layers=6, layers_per_block=3, residual_channels=4, mel_bands=4,
        step_embed_dim=8, step_hidden_dim=8, upsample_factor=8,
    )
    assert cfg.dilations == (1, 2, 4, 1, 2, 4)


def test_config_validation():
    with pytest.raises(ConfigError):
        NetConfig(n_layers=5, layers_per_block=2)
    with pytest.raises(ConfigError):
        NetConfig(step_embed_dim=7)


def test_lowrate_cond_presence_enforced(rng):
    params = init_model(TINY, 0)
    sched = make_schedule(linear_betas(1e-4, 0.05, 10))
    x = AudioBuffer(rng.standard_normal(64), 24000)
    mel = make_mel(8, 4, rng)
    with pytest.raises(ConfigError):
        predict_noise(params, x, mel, None, 1, sched)  # missing low cond
    no_low = NetConfig(
        n_layers=2, layers_per_block=2, residual_channels=4, mel_bands=4,
        step_embed_dim=8, step_hidden_dim=8, has_lowrate_cond=False, upsample_factor=8,
    )
    params2 = init_model(no_low, 0)
    with pytest.raises(ConfigError):
        predict_noise(params2, x, mel, x, 1, sched)  # extra low cond


def test_predict_noise_shape_checks(rng):
    params = init_model(TINY, 0)
    sched = make_schedule(linear_betas(1e-4, 0.05, 10))
    x = AudioBuffer(rng.standard_normal(64), 24000)
    short = AudioBuffer(rng.standard_normal(32), 24000)
    mel = make_mel(8, 4, rng)
    with pytest.raises(ShapeError):
        predict_noise(params, x, mel, short, 1, sched)
    with pytest.raises(ShapeError):
        predict_noise(params, x, make_mel(2, 4, rng), x, 1, sched)  # too few frames


def central_difference_check(cfg, seed, n=64, batch=2, h=1e-5, tol=1e-4):
    rng = np.random.default_rng(seed)
    params = init_model(cfg, seed)
    randomize_head(params, rng)
    frames = -(-n // cfg.upsample_factor)
    x = rng.standard_normal((batch, n))
    mel = rng.standard_normal((batch, frames, cfg.mel_bands))
    low = rng.standard_normal((batch, n)) if cfg.has_lowrate_cond else None
    t = rng.integers(1, 10, size=batch)
    target = rng.standard_normal((batch, n))
    weights = rng.uniform(0.5, 2.0, size=(batch, n))

    def loss_value():
        out, _ = forward_batch(params, x, mel, low, t)
        return float(np.sum(weights * (out - target) ** 2))

    out, record = forward_batch(params, x, mel, low, t, want_cache=True)
    grads = backward_batch(params, record, 2.0 * weights * (out - target))
    worst = 0.0
    for name, tensor in params.tensors.items():
        flat = tensor.ravel()
        analytic = grads[name].ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_value()
            flat[i] = orig - h
            lm = loss_value()
            flat[i] = orig
            fd = (lp - lm) / (2.0 * h)
            scale = max(abs(fd), abs(analytic[i]), 1e-6)
            worst = max(worst, abs(fd - analytic[i]) / scale)
    assert worst < tol, f"max relative gradient error {worst}"
    return worst


def test_gradient_finite_difference_tiny():
    central_difference_check(TINY, seed=7)


@pytest.mark.parametrize("lpb", [1, 2, 4])
def test_gradient_check_block_boundaries(lpb):
    cfg = NetConfig(
        n_layers=4,
        layers_per_block=lpb,
        residual_channels=3,
        mel_bands=3,
        step_embed_dim=4,
        step_hidden_dim=6,
        has_lowrate_cond=(lpb != 2),
        upsample_factor=8,
    )
    central_difference_check(cfg, seed=11, n=32, batch=1)


def test_zero_loss_grad_zero_gradients(rng):
    params = init_model(TINY, 3)
    randomize_head(params, rng)
    x = rng.standard_normal((2, 64))
    mel = rng.standard_normal((2, 8, 4))
    low = rng.standard_normal((2, 64))
    _, record = forward_batch(params, x, mel, low, [1, 2], want_cache=True)
    grads = backward_batch(params, record, np.zeros((2, 64)))
    for key, g in grads.items():
        assert np.all(g == 0.0), key


def test_backward_single_example_surface(rng):
    params = init_model(TINY, 3)
    randomize_head(params, rng)
    sched = make_schedule(linear_betas(1e-4, 0.05, 10))
    x = AudioBuffer(rng.standard_normal(64), 24000)
    mel = make_mel(8, 4, rng)
    low = AudioBuffer(rng.standard_normal(64), 24000)
    out, record = forward_cached(params, x, mel, low, 2, sched)
    grads = backward(params, record, AudioBuffer(np.ones(64), 24000))
    assert set(grads) == set(params.tensors)
    batch_out, batch_record = forward_batch(
        params, x.samples[None], mel.frames[None], low.samples[None], [2], want_cache=True
    )
    np.testing.assert_array_equal(out.samples, batch_out[0])
    batch_grads = backward_batch(params, batch_record, np.ones((1, 64)))
    for key in grads:
        np.testing.assert_array_equal(grads[key], batch_grads[key])


def test_backward_stale_cache_rejected(rng):
    params = init_model(TINY, 3)
    other = init_model(TINY, 4)
    x = rng.standard_normal((1, 64))
    mel = rng.standard_normal((1, 8, 4))
    low = rng.standard_normal((1, 64))
    _, record = forward_batch(params, x, mel, low, [1], want_cache=True)
    with pytest.raises(StateError):
        backward_batch(other, record, np.zeros((1, 64)))


def test_no_nan_on_extreme_inputs(rng):
    params = init_model(TINY, 3)
    randomize_head(params, rng)
    x = rng.uniform(-10, 10, (2, 64))
    mel = rng.uniform(-10, 10, (2, 8, 4))
    low = rng.uniform(-10, 10, (2, 64))
    out, record = forward_batch(params, x, mel, low, [1, 10], want_cache=True)
    assert np.all(np.isfinite(out))
    grads = backward_batch(params, record, rng.uniform(-10, 10, (2, 64)))
    for key, g in grads.items():
        assert np.all(np.isfinite(g)), key
