"""wavestack: multi-rate cascaded diffusion vocoder and evaluation suite."""

from .audio import AudioBuffer, FeatureConfig, MelSpectrogram, load_wav, log_mel, save_wav
from .diffusion import (
    AdaptivePrior,
    NoiseSchedule,
    compute_prior,
    forward_diffuse,
    make_schedule,
    reverse_step,
    sample_prior,
    weighted_loss,
)
from .metrics import MetricReport, evaluate_pair_dir, mcd, mr_stft, pmae, track_pitch, vde
from .net import ModelParams, NetConfig, backward, init_model, predict_noise
from .pipeline import (
    Checkpoint,
    StageModel,
    TrainConfig,
    build_stages,
    prepare_example,
    rtf,
    synthesize,
    train_all,
    train_step,
)
from .resample import FirFilter, StageRates, apply_filter, design_lowpass, downsample, upsample

__version__ = "0.1.0"
