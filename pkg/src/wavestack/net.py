"""Noise-prediction network: gated dilated-convolution residual stack with a
sinusoidal step embedding, per-layer mel conditioning, and an optional
lower-rate waveform fed as a second input channel.

Forward and reverse-mode passes are written out explicitly over numpy arrays;
`backward` returns exact gradients for every parameter tensor (checked against
central differences in the test suite). Parameters are immutable during a
forward/backward pair, so concurrent forward passes sharing one `ModelParams`
are safe; updates need exclusive access.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .audio import AudioBuffer, MelSpectrogram
from .diffusion import NoiseSchedule
from .errors import ConfigError, ShapeError, StateError

KERNEL_SIZE = 3
_INV_SQRT2 = 1.0 / math.sqrt(2.0)


@dataclass(frozen=True)
class NetConfig:
    n_layers: int = 24
    layers_per_block: int = 8
    residual_channels: int = 64
    mel_bands: int = 80
    step_embed_dim: int = 128
    step_hidden_dim: int = 512
    has_lowrate_cond: bool = True
    upsample_factor: int = 300  # samples per mel frame at this stage's rate

    def __post_init__(self):
        if self.n_layers % self.layers_per_block != 0:
            raise ConfigError(
                f"n_layers={self.n_layers} not divisible by layers_per_block={self.layers_per_block}"
            )
        if self.step_embed_dim % 2 != 0:
            raise ConfigError("step_embed_dim must be even")
        if min(self.residual_channels, self.mel_bands, self.upsample_factor) < 1:
            raise ConfigError("channel counts and upsample_factor must be positive")

    @property
    def dilations(self) -> tuple:
        return tuple(2 ** (k % self.layers_per_block) for k in range(self.n_layers))

    @property
    def in_channels(self) -> int:
        return 2 if self.has_lowrate_cond else 1

    @property
    def receptive_field(self) -> int:
        """Span in samples: 1 + sum over layers of (kernel-1)*dilation."""
        return 1 + sum((KERNEL_SIZE - 1) * d for d in self.dilations)


class ModelParams:
    """Named parameter tensors plus the config they were built for."""

    def __init__(self, cfg: NetConfig, tensors: dict):
        self.cfg = cfg
        self.tensors = tensors

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.astype(dtype) for k, v in self.tensors.items()})


@dataclass
class ActivationRecord:
    """Intermediate activations of one forward pass, consumed by `backward`."""

    params: ModelParams
    inp: np.ndarray
    h0: np.ndarray
    layer_hs: list
    layer_ta: list
    layer_sg: list
    skip_scaled: np.ndarray
    q: np.ndarray
    emb: np.ndarray
    p1: np.ndarray
    e1: np.ndarray
    p2: np.ndarray
    e2: np.ndarray
    mel_t: np.ndarray


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _swish(x):
    return x * _sigmoid(x)


def _swish_grad(x):
    s = _sigmoid(x)
    return s + x * s * (1.0 - s)


def step_embedding(t, dim: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal embedding of the (1-based) diffusion step index."""
    t = np.asarray(t, dtype=dtype).reshape(-1)
    half = dim // 2
    if half == 1:
        scales = np.ones(1, dtype=dtype)
    else:
        scales = 10.0 ** (4.0 * np.arange(half, dtype=dtype) / (half - 1))
    ang = t[:, None] * scales[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def init_model(cfg: NetConfig, seed: int, dtype=np.float64) -> ModelParams:
    """Fan-in-scaled uniform init; the output head is zeroed so an untrained
    model predicts exactly zero noise."""
    rng = np.random.default_rng(seed)
    c = cfg.residual_channels
    tensors: dict = {}

    def uniform(name, shape, fan_in):
        bound = math.sqrt(1.0 / fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)

    def zeros(name, shape):
        tensors[name] = np.zeros(shape, dtype=dtype)

    uniform("input/w", (c, cfg.in_channels), cfg.in_channels)
    zeros("input/b", (c,))
    uniform("step/fc1_w", (cfg.step_hidden_dim, cfg.step_embed_dim), cfg.step_embed_dim)
    zeros("step/fc1_b", (cfg.step_hidden_dim,))
    uniform("step/fc2_w", (cfg.step_hidden_dim, cfg.step_hidden_dim), cfg.step_hidden_dim)
    zeros("step/fc2_b", (cfg.step_hidden_dim,))
    for i in range(cfg.n_layers):
        uniform(f"layer{i:02d}/conv_w", (2 * c, c, KERNEL_SIZE), c * KERNEL_SIZE)
        zeros(f"layer{i:02d}/conv_b", (2 * c,))
        uniform(f"layer{i:02d}/mel_w", (2 * c, cfg.mel_bands), cfg.mel_bands)
        uniform(f"layer{i:02d}/step_w", (c, cfg.step_hidden_dim), cfg.step_hidden_dim)
        zeros(f"layer{i:02d}/step_b", (c,))
        uniform(f"layer{i:02d}/out_w", (2 * c, c), c)
        zeros(f"layer{i:02d}/out_b", (2 * c,))
    uniform("head/w1", (c, c), c)
    zeros("head/b1", (c,))
    zeros("head/w2", (1, c))
    zeros("head/b2", (1,))
    return ModelParams(cfg, tensors)


def _check_cond_shapes(cfg: NetConfig, n: int, n_frames: int, has_low: bool) -> None:
    if has_low != cfg.has_lowrate_cond:
        raise ConfigError(
            f"low-rate conditioning {'missing' if cfg.has_lowrate_cond else 'unexpected'} "
            f"for has_lowrate_cond={cfg.has_lowrate_cond}"
        )
    if n_frames * cfg.upsample_factor < n:
        raise ShapeError(
            f"{n_frames} mel frames x{cfg.upsample_factor} cover only "
            f"{n_frames * cfg.upsample_factor} < {n} samples"
        )


def forward_batch(
    params: ModelParams,
    x: np.ndarray,
    mel_frames: np.ndarray,
    low: np.ndarray | None,
    t: np.ndarray,
    want_cache: bool = False,
):
    """Batched forward pass.

    x: [B, N]; mel_frames: [B, F, n_mels]; low: [B, N] or None; t: [B] 1-based.
    Returns ([B, N] prediction, ActivationRecord or None).
    """
    cfg = params.cfg
    p = params.tensors
    dtype = params.dtype
    x = np.asarray(x, dtype=dtype)
    mel_frames = np.asarray(mel_frames, dtype=dtype)
    b, n = x.shape
    _check_cond_shapes(cfg, n, mel_frames.shape[1], low is not None)

    if low is None:
        inp = x[:, None, :]
    else:
        low = np.asarray(low, dtype=dtype)
        if low.shape != x.shape:
            raise ShapeError(f"low-rate cond shape {low.shape} != x shape {x.shape}")
        inp = np.stack([x, low], axis=1)

    h = np.maximum(0.0, np.matmul(p["input/w"], inp) + p["input/b"][:, None])
    h0 = h

    emb = step_embedding(t, cfg.step_embed_dim, dtype)
    p1 = emb @ p["step/fc1_w"].T + p["step/fc1_b"]
    e1 = _swish(p1)
    p2 = e1 @ p["step/fc2_w"].T + p["step/fc2_b"]
    e2 = _swish(p2)

    mel_t = np.ascontiguousarray(mel_frames.transpose(0, 2, 1))  # [B, n_mels, F]
    up = cfg.upsample_factor
    c = cfg.residual_channels
    f_cov = min(mel_t.shape[2], -(-n // up))  # frames that actually cover the segment
    mel_cov = mel_t[:, :, :f_cov]

    layer_hs, layer_ta, layer_sg = [], [], []
    skip_acc = np.zeros((b, c, n), dtype=dtype)
    for i, d in enumerate(cfg.dilations):
        key = f"layer{i:02d}"
        sbias = e2 @ p[f"{key}/step_w"].T + p[f"{key}/step_b"]
        hs = h + sbias[:, :, None]
        hp = np.pad(hs, ((0, 0), (0, 0), (d, d)))
        conv_w = p[f"{key}/conv_w"]
        pre = p[f"{key}/conv_b"][:, None] + np.matmul(conv_w[:, :, 0], hp[:, :, :n])
        pre += np.matmul(conv_w[:, :, 1], hp[:, :, d : d + n])
        pre += np.matmul(conv_w[:, :, 2], hp[:, :, 2 * d : 2 * d + n])
        pre += np.repeat(np.matmul(p[f"{key}/mel_w"], mel_cov), up, axis=2)[:, :, :n]
        ta = np.tanh(pre[:, :c])
        sg = _sigmoid(pre[:, c:])
        zt = ta * sg
        o = np.matmul(p[f"{key}/out_w"], zt) + p[f"{key}/out_b"][:, None]
        skip_acc += o[:, c:]
        h = (h + o[:, :c]) * _INV_SQRT2
        if want_cache:
            layer_hs.append(hs)
            layer_ta.append(ta)
            layer_sg.append(sg)

    skip_scaled = skip_acc * (1.0 / math.sqrt(cfg.n_layers))
    q = np.maximum(0.0, np.matmul(p["head/w1"], skip_scaled) + p["head/b1"][:, None])
    out = (np.matmul(p["head/w2"], q) + p["head/b2"][:, None])[:, 0, :]

    if not want_cache:
        return out, None
    record = ActivationRecord(
        params=params,
        inp=inp,
        h0=h0,
        layer_hs=layer_hs,
        layer_ta=layer_ta,
        layer_sg=layer_sg,
        skip_scaled=skip_scaled,
        q=q,
        emb=emb,
        p1=p1,
        e1=e1,
        p2=p2,
        e2=e2,
        mel_t=mel_t,
    )
    return out, record


def backward_batch(params: ModelParams, record: ActivationRecord, dout: np.ndarray) -> dict:
    """Exact gradients of a scalar loss given d loss / d output ([B, N])."""
    if record.params is not params:
        raise StateError("activation record was produced by a different parameter set")
    cfg = params.cfg
    p = params.tensors
    dtype = params.dtype
    dout = np.asarray(dout, dtype=dtype)
    b, n = dout.shape
    c = cfg.residual_channels
    up = cfg.upsample_factor
    grads: dict = {}

    do = dout[:, None, :]
    grads["head/w2"] = np.einsum("bon,bcn->oc", do, record.q, optimize=True)
    grads["head/b2"] = do.sum(axis=(0, 2))
    dq = np.matmul(p["head/w2"].T, do)
    dq *= record.q > 0
    grads["head/w1"] = np.einsum("bon,bcn->oc", dq, record.skip_scaled, optimize=True)
    grads["head/b1"] = dq.sum(axis=(0, 2))
    dskip = np.matmul(p["head/w1"].T, dq) * (1.0 / math.sqrt(cfg.n_layers))

    de2 = np.zeros_like(record.e2)
    dh = np.zeros((b, c, n), dtype=dtype)
    n_frames = record.mel_t.shape[2]
    f_cov = min(n_frames, -(-n // up))
    mel_cov = record.mel_t[:, :, :f_cov]

    for i in reversed(range(cfg.n_layers)):
        key = f"layer{i:02d}"
        d = cfg.dilations[i]
        ta = record.layer_ta[i]
        sg = record.layer_sg[i]
        hs = record.layer_hs[i]

        dres = dh * _INV_SQRT2
        dh_pass = dres  # same scale applies to the pass-through branch
        do_layer = np.concatenate([dres, dskip], axis=1)
        zt = ta * sg
        grads[f"{key}/out_w"] = np.einsum("bon,bcn->oc", do_layer, zt, optimize=True)
        grads[f"{key}/out_b"] = do_layer.sum(axis=(0, 2))
        dzt = np.matmul(p[f"{key}/out_w"].T, do_layer)
        da = dzt * sg * (1.0 - ta * ta)
        dg = dzt * ta * sg * (1.0 - sg)
        dpre = np.concatenate([da, dg], axis=1)
        grads[f"{key}/conv_b"] = dpre.sum(axis=(0, 2))

        pad_tail = f_cov * up - n
        if pad_tail:
            dpre_pad = np.pad(dpre, ((0, 0), (0, 0), (0, pad_tail)))
        else:
            dpre_pad = dpre
        dcond_frames = dpre_pad.reshape(b, 2 * c, f_cov, up).sum(axis=3)
        grads[f"{key}/mel_w"] = np.einsum(
            "bof,bmf->om", dcond_frames, mel_cov, optimize=True
        )

        conv_w = p[f"{key}/conv_w"]
        hp = np.pad(hs, ((0, 0), (0, 0), (d, d)))
        dconv_w = np.empty_like(conv_w)
        dhp = np.zeros_like(hp)
        for k in range(KERNEL_SIZE):
            seg = hp[:, :, k * d : k * d + n]
            dconv_w[:, :, k] = np.einsum("bon,bcn->oc", dpre, seg, optimize=True)
            dhp[:, :, k * d : k * d + n] += np.matmul(conv_w[:, :, k].T, dpre)
        grads[f"{key}/conv_w"] = dconv_w
        dhs = dhp[:, :, d : d + n]

        dsbias = dhs.sum(axis=2)
        grads[f"{key}/step_w"] = np.einsum("bc,bh->ch", dsbias, record.e2, optimize=True)
        grads[f"{key}/step_b"] = dsbias.sum(axis=0)
        de2 += dsbias @ p[f"{key}/step_w"]

        dh = dh_pass + dhs

    dh *= record.h0 > 0
    grads["input/w"] = np.einsum("bcn,bin->ci", dh, record.inp, optimize=True)
    grads["input/b"] = dh.sum(axis=(0, 2))

    dp2 = de2 * _swish_grad(record.p2)
    grads["step/fc2_w"] = np.einsum("bh,bk->hk", dp2, record.e1, optimize=True)
    grads["step/fc2_b"] = dp2.sum(axis=0)
    de1 = dp2 @ p["step/fc2_w"]
    dp1 = de1 * _swish_grad(record.p1)
    grads["step/fc1_w"] = np.einsum("bh,be->he", dp1, record.emb, optimize=True)
    grads["step/fc1_b"] = dp1.sum(axis=0)
    return grads


def _as_batch(params, x_t, mel, low_cond, t, sched):
    sched.check_step(t)
    if low_cond is not None:
        if low_cond.sample_rate != x_t.sample_rate:
            raise ConfigError(
                f"low-rate cond rate {low_cond.sample_rate} != x_t rate {x_t.sample_rate}"
            )
        if len(low_cond) != len(x_t):
            raise ShapeError(f"low-rate cond length {len(low_cond)} != x_t length {len(x_t)}")
    x = x_t.samples[None, :]
    mel_frames = mel.frames[None, :, :]
    low = None if low_cond is None else low_cond.samples[None, :]
    return x, mel_frames, low, np.array([t])


def predict_noise(
    params: ModelParams,
    x_t: AudioBuffer,
    mel: MelSpectrogram,
    low_cond: AudioBuffer | None,
    t: int,
    sched: NoiseSchedule,
) -> AudioBuffer:
    """Predict the noise component of x_t conditioned on mel features and,
    when configured, the aligned lower-rate waveform."""
    x, mel_frames, low, tv = _as_batch(params, x_t, mel, low_cond, t, sched)
    out, _ = forward_batch(params, x, mel_frames, low, tv)
    return AudioBuffer(out[0].astype(np.float64), x_t.sample_rate)


def forward_cached(
    params: ModelParams,
    x_t: AudioBuffer,
    mel: MelSpectrogram,
    low_cond: AudioBuffer | None,
    t: int,
    sched: NoiseSchedule,
):
    """Like predict_noise but also returns the activation record for backward."""
    x, mel_frames, low, tv = _as_batch(params, x_t, mel, low_cond, t, sched)
    out, record = forward_batch(params, x, mel_frames, low, tv, want_cache=True)
    return AudioBuffer(out[0].astype(np.float64), x_t.sample_rate), record


def backward(params: ModelParams, cached_forward: ActivationRecord, loss_grad: AudioBuffer) -> dict:
    """Gradients for a single-example forward; loss_grad is dL/d(output)."""
    return backward_batch(params, cached_forward, loss_grad.samples[None, :])
