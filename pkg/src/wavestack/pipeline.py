"""Stage training and progressive multi-rate inference.

Each stage is trained independently: pick a segment, draw a step index and
energy-shaped noise, form the noised waveform, predict the noise, and take an
Adam step on the (optionally sigma^-2-weighted) squared residual. Inference
runs stages from the lowest rate upward, conditioning each stage on the
previous stage's output after interpolation and an anti-aliasing filter.

Determinism contract: all randomness at training step k of stage i comes from
``np.random.default_rng([seed, i, k])``, consumed in this order: for every
batch slot, (example index, start frame); then per slot, (step index t, prior
noise). Resuming from a checkpoint therefore replays the interrupted run
bitwise. Stage training tasks share nothing and may run concurrently;
inference is sequential across stages by data dependency.
"""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import AudioBuffer, FeatureConfig, MelSpectrogram, log_mel
from .diffusion import (
    NoiseSchedule,
    compute_prior,
    make_schedule,
    reverse_step,
    sample_prior,
)
from .errors import ConfigError, DivergenceError, ShapeError, StateError
from .net import ModelParams, NetConfig, backward_batch, forward_batch, init_model, predict_noise
from .resample import StageRates, apply_filter, design_lowpass, downsample, taps_for_factor, upsample
from .tensorio import load_tensors, save_tensors


@dataclass
class StageModel:
    """One rate's noise predictor plus its schedules."""

    stage_index: int  # 1-based; stage 1 is the highest rate
    rate: int
    params: ModelParams
    cfg: NetConfig
    train_schedule: NoiseSchedule
    infer_schedule: NoiseSchedule
    filters: dict = field(default_factory=dict)  # conditioning filter taps, serialized


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 2e-4
    max_steps: int = 1000
    segment_length: int = 7200  # samples at the top rate
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    weighted_loss: bool = True
    dtype: str = "float64"
    checkpoint_every: int = 10000

    def validate(self, rates: StageRates, hop_length: int) -> None:
        if self.segment_length % hop_length != 0:
            raise ConfigError(
                f"segment_length {self.segment_length} not divisible by hop {hop_length}"
            )
        for r in rates.rates:
            factor = rates[0] // r
            if self.segment_length % factor != 0:
                raise ConfigError(
                    f"segment_length {self.segment_length} not divisible by decimation {factor}"
                )


@dataclass
class AdamState:
    step: int
    m: dict
    v: dict


def init_adam(params: ModelParams) -> AdamState:
    zeros = lambda: {k: np.zeros_like(v) for k, v in params.tensors.items()}
    return AdamState(0, zeros(), zeros())


def adam_update(params: ModelParams, grads: dict, state: AdamState, cfg: TrainConfig) -> None:
    """In-place Adam step, standard bias correction, eps outside the sqrt."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for key, p in params.tensors.items():
        g = grads[key]
        m = state.m[key]
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


@dataclass(frozen=True)
class PreparedExample:
    """One utterance readied for one stage: target waveform at the stage rate,
    the band-limited lower-rate conditioning aligned to that rate, and the
    shared mel features extracted at the top rate."""

    x0: AudioBuffer
    cond_low: AudioBuffer | None
    mel: MelSpectrogram


def prepare_example(
    audio: AudioBuffer, stage_index: int, rates: StageRates, feat_cfg: FeatureConfig
) -> PreparedExample:
    if audio.sample_rate != rates[0]:
        raise ConfigError(f"audio rate {audio.sample_rate} != top stage rate {rates[0]}")
    if not 1 <= stage_index <= len(rates):
        raise ConfigError(f"stage_index {stage_index} outside 1..{len(rates)}")
    x0 = downsample(audio, rates[stage_index - 1])
    cond_low = None
    if stage_index < len(rates):
        lower = downsample(audio, rates[stage_index])
        cond_low = upsample(lower, rates[stage_index - 1])
    mel = log_mel(audio, feat_cfg)
    return PreparedExample(x0, cond_low, mel)


def stage_hop(feat_cfg: FeatureConfig, rates: StageRates, stage_index: int) -> int:
    rate = rates[stage_index - 1]
    if feat_cfg.hop_length * rate % rates[0] != 0:
        raise ConfigError(
            f"hop {feat_cfg.hop_length} does not rescale to an integer at {rate} Hz"
        )
    return feat_cfg.hop_length * rate // rates[0]


@dataclass(frozen=True)
class Segment:
    """A fixed-length training slice of a PreparedExample."""

    x0: np.ndarray
    cond_low: np.ndarray | None
    mel: MelSpectrogram
    hop: int


def slice_segment(prep: PreparedExample, frame_start: int, n_frames: int, hop: int) -> Segment:
    lo, hi = frame_start * hop, (frame_start + n_frames) * hop
    cond = None if prep.cond_low is None else prep.cond_low.samples[lo:hi]
    mel = MelSpectrogram(
        prep.mel.frames[frame_start : frame_start + n_frames],
        prep.mel.n_mels,
        prep.mel.hop_length,
        prep.mel.fft_size,
        prep.mel.sample_rate,
    )
    return Segment(prep.x0.samples[lo:hi], cond, mel, hop)


def draw_segments(
    prepared: list, rng: np.random.Generator, batch_size: int, n_frames: int, hop: int
) -> list:
    """Random (example, start-frame) picks; rng order is part of the replay contract."""
    batch = []
    for _ in range(batch_size):
        ei = int(rng.integers(0, len(prepared)))
        usable = len(prepared[ei].x0) // hop
        if usable < n_frames:
            raise ConfigError(f"example {ei} too short for {n_frames}-frame segments")
        fj = int(rng.integers(0, usable - n_frames + 1))
        batch.append(slice_segment(prepared[ei], fj, n_frames, hop))
    return batch


def train_step(
    stage: StageModel,
    batch: list,
    cfg: TrainConfig,
    opt_state: AdamState,
    rng: np.random.Generator,
):
    """One optimizer step over a batch of prepared segments.

    Returns (stage, opt_state, loss). Parameters and optimizer moments are
    updated in place; the returned objects are the same instances.
    """
    sched = stage.train_schedule
    num_t = sched.num_steps
    n = len(batch[0].x0)
    hop = batch[0].hop

    xs, eps_list, ts, sigmas, mels, conds = [], [], [], [], [], []
    for seg in batch:
        t = int(rng.integers(1, num_t + 1))
        prior = compute_prior(seg.mel, n, hop)
        eps = sample_prior(prior, rng).samples
        abar = sched.alpha_bars[t - 1]
        xs.append(np.sqrt(abar) * seg.x0 + np.sqrt(1.0 - abar) * eps)
        eps_list.append(eps)
        ts.append(t)
        sigmas.append(prior.sigma)
        mels.append(seg.mel.frames)
        conds.append(seg.cond_low)

    x = np.stack(xs)
    eps_arr = np.stack(eps_list)
    mel_arr = np.stack(mels)
    low = None if conds[0] is None else np.stack(conds)
    t_arr = np.array(ts)

    eps_hat, record = forward_batch(stage.params, x, mel_arr, low, t_arr, want_cache=True)
    residual = eps_hat.astype(np.float64) - eps_arr
    if cfg.weighted_loss:
        weights = 1.0 / np.stack(sigmas) ** 2
    else:
        weights = np.ones_like(residual)
    loss = float(np.mean(residual**2 * weights))
    if not math.isfinite(loss):
        raise DivergenceError(
            f"stage {stage.stage_index}: non-finite loss at adam step {opt_state.step + 1}"
        )
    dout = 2.0 * residual * weights / residual.size
    grads = backward_batch(stage.params, record, dout)
    adam_update(stage.params, grads, opt_state, cfg)
    return stage, opt_state, loss


@dataclass
class Checkpoint:
    """In-memory training state: every stage's model, optimizer moments, the
    step counter and the config snapshot it was produced under."""

    stages: list
    opt_states: list
    step: int
    config_snapshot: dict | None = None
    loss_history: dict = field(default_factory=dict)


def _stage_dir(out_dir, stage_index: int) -> Path:
    return Path(out_dir) / f"stage_{stage_index}"


def save_stage_checkpoint(out_dir, stage: StageModel, opt: AdamState, step: int) -> Path:
    tensors = {f"param/{k}": v for k, v in stage.params.tensors.items()}
    tensors.update({f"adam_m/{k}": v for k, v in opt.m.items()})
    tensors.update({f"adam_v/{k}": v for k, v in opt.v.items()})
    tensors.update({f"filter/{k}": v for k, v in stage.filters.items()})
    meta = {
        "stage_index": stage.stage_index,
        "rate": stage.rate,
        "net": asdict(stage.cfg),
        "train_betas": stage.train_schedule.betas.tolist(),
        "infer_betas": stage.infer_schedule.betas.tolist(),
        "adam_step": opt.step,
        "train_step": step,
    }
    sdir = _stage_dir(out_dir, stage.stage_index)
    sdir.mkdir(parents=True, exist_ok=True)
    path = sdir / f"step_{step:06d}.ckpt"
    save_tensors(path, tensors, meta)
    return path


def load_stage_checkpoint(path):
    """Returns (StageModel, AdamState, train_step)."""
    tensors, meta = load_tensors(path)
    cfg = NetConfig(**meta["net"])
    params = ModelParams(
        cfg, {k[len("param/") :]: v for k, v in tensors.items() if k.startswith("param/")}
    )
    opt = AdamState(
        meta["adam_step"],
        {k[len("adam_m/") :]: v for k, v in tensors.items() if k.startswith("adam_m/")},
        {k[len("adam_v/") :]: v for k, v in tensors.items() if k.startswith("adam_v/")},
    )
    filters = {k[len("filter/") :]: v for k, v in tensors.items() if k.startswith("filter/")}
    stage = StageModel(
        meta["stage_index"],
        meta["rate"],
        params,
        cfg,
        make_schedule(meta["train_betas"]),
        make_schedule(meta["infer_betas"]),
        filters,
    )
    return stage, opt, meta["train_step"]


def latest_checkpoint_step(out_dir, stage_index: int):
    sdir = _stage_dir(out_dir, stage_index)
    if not sdir.is_dir():
        return None
    steps = []
    for name in os.listdir(sdir):
        m = re.fullmatch(r"step_(\d+)\.ckpt", name)
        if m:
            steps.append(int(m.group(1)))
    return max(steps) if steps else None


def load_checkpoint(out_dir) -> Checkpoint:
    """Load the latest step of every stage directory under out_dir."""
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        raise StateError(f"checkpoint directory {out_dir} does not exist")
    indices = sorted(
        int(m.group(1))
        for m in (re.fullmatch(r"stage_(\d+)", p.name) for p in out_dir.iterdir() if p.is_dir())
        if m
    )
    if not indices:
        raise StateError(f"no stage checkpoints under {out_dir}")
    stages, opts, steps = [], [], []
    for i in indices:
        step = latest_checkpoint_step(out_dir, i)
        if step is None:
            raise StateError(f"stage {i} has no checkpoint files")
        stage, opt, tstep = load_stage_checkpoint(_stage_dir(out_dir, i) / f"step_{step:06d}.ckpt")
        stages.append(stage)
        opts.append(opt)
        steps.append(tstep)
    snapshot_path = out_dir / "config.snapshot"
    snapshot = json.loads(snapshot_path.read_text()) if snapshot_path.exists() else None
    return Checkpoint(stages, opts, min(steps), snapshot)


def conditioning_filters(stage_rate: int, lower_rate: int) -> dict:
    """Taps used to turn a generated lower-rate signal into stage conditioning:
    full-band interpolation then the anti-aliasing filter of the lower band."""
    factor = stage_rate // lower_rate
    interp = design_lowpass(
        lower_rate / 2 * (1.0 - 1e-9), stage_rate, taps_for_factor(factor)
    )
    anti = design_lowpass(0.95 * lower_rate / 2, stage_rate, taps_for_factor(factor))
    return {"cond_interp": np.asarray(interp.taps), "cond_antialias": np.asarray(anti.taps)}


def build_stages(
    rates: StageRates,
    net_cfg: NetConfig,
    train_betas,
    infer_betas,
    feat_cfg: FeatureConfig,
    seed: int,
    dtype=np.float64,
) -> list:
    """Construct untrained StageModels; stage i's net drops the lower-rate
    input channel when i is the lowest stage."""
    stages = []
    for i, rate in enumerate(rates.rates, start=1):
        cfg = NetConfig(
            n_layers=net_cfg.n_layers,
            layers_per_block=net_cfg.layers_per_block,
            residual_channels=net_cfg.residual_channels,
            mel_bands=feat_cfg.n_mels,
            step_embed_dim=net_cfg.step_embed_dim,
            step_hidden_dim=net_cfg.step_hidden_dim,
            has_lowrate_cond=i < len(rates),
            upsample_factor=stage_hop(feat_cfg, rates, i),
        )
        params = init_model(cfg, seed + i, dtype=dtype)
        filters = conditioning_filters(rate, rates[i]) if i < len(rates) else {}
        stages.append(
            StageModel(i, rate, params, cfg, make_schedule(train_betas), make_schedule(infer_betas), filters)
        )
    return stages


def step_rng(seed: int, stage_index: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage_index, step])


def train_all(
    stages: list,
    dataset: list,
    cfg: TrainConfig,
    feat_cfg: FeatureConfig,
    rates: StageRates | None = None,
    out_dir=None,
    resume: bool = False,
    config_snapshot: dict | None = None,
    log_every: int = 50,
    log=None,
) -> Checkpoint:
    """Train the given stages independently, in the order given (the stages
    share no state, so order cannot matter and callers may parallelize).
    `rates` defaults to the stages' own rates; pass the full ladder when
    training a subset of a deeper hierarchy. Returns the final Checkpoint;
    when out_dir is given, periodic and final checkpoints are written there."""
    if not dataset:
        raise ConfigError("dataset is empty")
    if rates is None:
        rates = StageRates(tuple(s.rate for s in sorted(stages, key=lambda s: s.stage_index)))
    cfg.validate(rates, feat_cfg.hop_length)
    seg_frames = cfg.segment_length // feat_cfg.hop_length
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        if config_snapshot is not None:
            (Path(out_dir) / "config.snapshot").write_text(json.dumps(config_snapshot, indent=2))

    opt_states: dict = {}
    loss_history: dict = {}
    final_step = 0
    for stage in stages:
        i = stage.stage_index
        hop = stage_hop(feat_cfg, rates, i)
        prepared = [prepare_example(a, i, rates, feat_cfg) for a in dataset]
        start_step = 0
        opt = init_adam(stage.params)
        if resume and out_dir is not None:
            latest = latest_checkpoint_step(out_dir, i)
            if latest is not None:
                loaded, opt, start_step = load_stage_checkpoint(
                    _stage_dir(out_dir, i) / f"step_{latest:06d}.ckpt"
                )
                stage.params = loaded.params
        history = []
        for step in range(start_step + 1, cfg.max_steps + 1):
            rng = step_rng(cfg.seed, i, step)
            batch = draw_segments(prepared, rng, cfg.batch_size, seg_frames, hop)
            _, opt, loss = train_step(stage, batch, cfg, opt, rng)
            history.append((step, loss))
            if log is not None and (step % log_every == 0 or step == cfg.max_steps):
                log(f"stage {i} step {step}/{cfg.max_steps} loss {loss:.5f}")
            if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_stage_checkpoint(out_dir, stage, opt, step)
        if out_dir is not None and (cfg.max_steps % cfg.checkpoint_every or not cfg.checkpoint_every):
            save_stage_checkpoint(out_dir, stage, opt, cfg.max_steps)
        opt_states[i] = opt
        loss_history[i] = history
        final_step = cfg.max_steps
    ordered = sorted(stages, key=lambda s: s.stage_index)
    return Checkpoint(
        ordered,
        [opt_states[s.stage_index] for s in ordered],
        final_step,
        config_snapshot,
        loss_history,
    )


def _zero_mel_like(mel: MelSpectrogram) -> MelSpectrogram:
    return MelSpectrogram(
        np.zeros_like(mel.frames), mel.n_mels, mel.hop_length, mel.fft_size, mel.sample_rate
    )


def sample_stage(
    stage: StageModel,
    mel: MelSpectrogram,
    cond_low: AudioBuffer | None,
    rng: np.random.Generator,
    zero_mel: bool = False,
    zero_lowrate: bool = False,
) -> AudioBuffer:
    """Run one stage's full reverse process. `zero_mel` / `zero_lowrate`
    blank the respective conditioning tensor seen by the network (the adaptive
    prior stays derived from the real mel) for conditioning ablations."""
    if mel.hop_length * stage.rate % mel.sample_rate != 0:
        raise ConfigError(f"mel hop {mel.hop_length} does not rescale to {stage.rate} Hz")
    hop = mel.hop_length * stage.rate // mel.sample_rate
    target_len = mel.n_frames * hop
    if stage.cfg.has_lowrate_cond and cond_low is None:
        raise StateError(f"stage {stage.stage_index} needs lower-rate conditioning")
    if not stage.cfg.has_lowrate_cond and cond_low is not None:
        raise StateError(f"stage {stage.stage_index} takes no lower-rate conditioning")
    prior = compute_prior(mel, target_len, hop)
    x = sample_prior(prior, rng)
    mel_net = _zero_mel_like(mel) if zero_mel else mel
    cond_net = cond_low
    if zero_lowrate and cond_low is not None:
        cond_net = AudioBuffer(np.zeros(len(cond_low)), cond_low.sample_rate)
    sched = stage.infer_schedule
    zero = AudioBuffer(np.zeros(target_len), stage.rate)
    for t in range(sched.num_steps, 0, -1):
        eps_hat = predict_noise(stage.params, x, mel_net, cond_net, t, sched)
        z = sample_prior(prior, rng) if t > 1 else zero
        x = reverse_step(x, eps_hat, t, sched, z)
    return x


def lift_conditioning(
    lower_out: AudioBuffer, stage_rate: int, lower_rate: int, use_antialias: bool = True
) -> AudioBuffer:
    """Interpolate a generated lower-rate signal to the stage rate and, unless
    disabled, apply the anti-aliasing filter that suppresses the noise the
    generator leaves near the lower Nyquist frequency."""
    interp = upsample(lower_out, stage_rate, cutoff_scale=1.0)
    if not use_antialias:
        return interp
    factor = stage_rate // lower_rate
    anti = design_lowpass(0.95 * lower_rate / 2, stage_rate, taps_for_factor(factor))
    return apply_filter(interp, anti)


def synthesize(
    mel: MelSpectrogram,
    stages: list,
    rates: StageRates,
    rng: np.random.Generator,
    use_antialias: bool = True,
    zero_mel: bool = False,
    zero_lowrate: bool = False,
) -> AudioBuffer:
    """Progressive inference: lowest rate first, each higher stage conditioned
    on the previous stage's (filtered) output. Returns the top-rate waveform of
    length n_frames * hop."""
    ordered = sorted(stages, key=lambda s: s.stage_index)
    if [s.stage_index for s in ordered] != list(range(1, len(rates) + 1)):
        raise StateError(
            f"need stages 1..{len(rates)}, got {[s.stage_index for s in ordered]}"
        )
    for s, r in zip(ordered, rates.rates):
        if s.rate != r:
            raise StateError(f"stage {s.stage_index} rate {s.rate} != configured {r}")
    if mel.sample_rate != rates[0]:
        raise ConfigError(f"mel rate {mel.sample_rate} != top stage rate {rates[0]}")

    out = None
    for stage in reversed(ordered):
        cond = None
        if stage.cfg.has_lowrate_cond:
            cond = lift_conditioning(out, stage.rate, rates[stage.stage_index], use_antialias)
        out = sample_stage(
            stage, mel, cond, rng, zero_mel=zero_mel, zero_lowrate=zero_lowrate
        )
    return out


def rtf(audio_seconds: float, wall_seconds: float) -> float:
    """Real-time factor: synthesis wall time divided by audio duration."""
    if audio_seconds <= 0 or wall_seconds <= 0:
        raise ValueError("durations must be positive")
    return wall_seconds / audio_seconds
