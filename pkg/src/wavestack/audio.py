"""Waveform containers, WAV persistence, STFT and log-mel feature extraction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

from .errors import ConfigError, FormatError, ShapeError, UnsupportedFormatError

PCM16_SCALE = 32768.0


@dataclass(frozen=True)
class AudioBuffer:
    """Mono waveform. Samples are float64; |s| <= 1 is guaranteed right after
    load and enforced by clipping on write, but intermediate processing (noise,
    filtering) may exceed the nominal range."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ShapeError(f"expected mono 1-D samples, got shape {samples.shape}")
        if samples.size and not np.all(np.isfinite(samples)):
            raise ValueError("samples contain NaN or Inf")
        if int(self.sample_rate) <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-scale mel energies, [n_frames x n_mels]."""

    frames: np.ndarray
    n_mels: int
    hop_length: int
    fft_size: int
    sample_rate: int

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.n_mels:
            raise ShapeError(f"frames shape {frames.shape} inconsistent with n_mels={self.n_mels}")
        if frames.size and not np.all(np.isfinite(frames)):
            raise ValueError("mel frames contain NaN or Inf")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class ComplexSpectrogram:
    """One-sided complex STFT, [n_frames x (fft_size/2 + 1)]."""

    bins: np.ndarray
    fft_size: int
    hop_length: int
    sample_rate: int

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.complex128)
        if bins.ndim != 2 or bins.shape[1] != self.fft_size // 2 + 1:
            raise ShapeError(f"bin count {bins.shape} != fft_size/2+1 for fft_size={self.fft_size}")
        object.__setattr__(self, "bins", bins)

    @property
    def n_frames(self) -> int:
        return self.bins.shape[0]


@dataclass(frozen=True)
class FeatureConfig:
    """Acoustic feature extraction settings (the conditioning features)."""

    sample_rate: int = 24000
    n_mels: int = 80
    fft_size: int = 2048
    hop_length: int = 300
    f_min: float = 20.0
    f_max: float | None = None  # None -> sample_rate / 2
    floor: float = 1e-5

    def resolved_f_max(self) -> float:
        return self.sample_rate / 2 if self.f_max is None else self.f_max


def load_wav(path) -> AudioBuffer:
    """Read a 16-bit PCM or 32-bit float WAV; stereo is averaged to mono."""
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / PCM16_SCALE
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = data.astype(np.float64)
    else:
        raise UnsupportedFormatError(
            f"{path}: unsupported sample encoding {data.dtype}; expected int16 or float32"
        )
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    elif samples.ndim != 1:
        raise UnsupportedFormatError(f"{path}: unsupported channel layout {data.shape}")
    return AudioBuffer(np.clip(samples, -1.0, 1.0), rate)


def save_wav(buf: AudioBuffer, path) -> None:
    """Write 16-bit PCM mono; samples are clipped to [-1, 1] before quantizing."""
    if len(buf) == 0:
        raise ValueError("refusing to write an empty buffer")
    quantized = np.round(buf.samples * PCM16_SCALE)
    pcm = np.clip(quantized, -PCM16_SCALE, PCM16_SCALE - 1).astype(np.int16)
    wavfile.write(path, buf.sample_rate, pcm)


def _pad_reflect(x: np.ndarray, left: int, right: int) -> np.ndarray:
    # np.pad 'reflect' tiles arbitrarily large pads but rejects length-1 input
    if len(x) == 1:
        return np.pad(x, (left, right), mode="edge")
    return np.pad(x, (left, right), mode="reflect")


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window (DFT-even), the analysis window for all STFTs here."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count(n_samples: int, hop_length: int) -> int:
    return -(-n_samples // hop_length)


def stft(buf: AudioBuffer, fft_size: int, hop_length: int) -> ComplexSpectrogram:
    """Centered, Hann-windowed STFT; frame i is centered on sample i*hop."""
    if len(buf) == 0:
        raise ValueError("cannot take the STFT of an empty buffer")
    if fft_size <= 0 or (fft_size & (fft_size - 1)) != 0:
        raise ConfigError(f"fft_size must be a power of two, got {fft_size}")
    if not 0 < hop_length <= fft_size:
        raise ConfigError(f"need 0 < hop_length <= fft_size, got hop={hop_length}")
    x = buf.samples
    n = len(x)
    n_frames = frame_count(n, hop_length)
    pad_left = fft_size // 2
    pad_right = max(0, (n_frames - 1) * hop_length + fft_size - pad_left - n)
    padded = _pad_reflect(x, pad_left, pad_right)
    frames = np.lib.stride_tricks.sliding_window_view(padded, fft_size)[::hop_length][:n_frames]
    spec = np.fft.rfft(frames * hann_window(fft_size), axis=1)
    return ComplexSpectrogram(spec, fft_size, hop_length, buf.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int, fft_size: int, sample_rate: int, f_min: float, f_max: float
) -> np.ndarray:
    """Triangular mel filters, [n_mels x (fft_size/2 + 1)], peak gain 1."""
    if not 0 <= f_min < f_max <= sample_rate / 2:
        raise ConfigError(f"need 0 <= f_min < f_max <= nyquist, got ({f_min}, {f_max})")
    if n_mels < 1:
        raise ConfigError("n_mels must be >= 1")
    points_hz = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    bin_hz = np.arange(fft_size // 2 + 1) * (sample_rate / fft_size)
    left, center, right = points_hz[:-2, None], points_hz[1:-1, None], points_hz[2:, None]
    rising = (bin_hz - left) / np.maximum(center - left, 1e-12)
    falling = (right - bin_hz) / np.maximum(right - center, 1e-12)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    if np.any(weights.sum(axis=1) == 0.0):
        raise ConfigError(
            f"n_mels={n_mels} too fine for fft_size={fft_size} at {sample_rate} Hz: empty filter"
        )
    return weights


def mel_center_frequencies(n_mels: int, f_min: float, f_max: float) -> np.ndarray:
    """Peak frequency of each triangular filter (Hz)."""
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))[1:-1]


def save_mel_file(mel: MelSpectrogram, path) -> None:
    """Feature file: five little-endian uint32 header fields
    {n_frames, n_mels, hop, fft, rate} followed by row-major float32 frames."""
    header = np.array(
        [mel.n_frames, mel.n_mels, mel.hop_length, mel.fft_size, mel.sample_rate],
        dtype="<u4",
    )
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(mel.frames.astype("<f4").tobytes())


def load_mel_file(path) -> MelSpectrogram:
    with open(path, "rb") as fh:
        raw = fh.read(20)
        if len(raw) != 20:
            raise FormatError(f"{path}: truncated feature header")
        n_frames, n_mels, hop, fft_size, rate = np.frombuffer(raw, dtype="<u4")
        data = fh.read(int(n_frames) * int(n_mels) * 4)
        if len(data) != n_frames * n_mels * 4:
            raise FormatError(f"{path}: truncated feature payload")
        frames = np.frombuffer(data, dtype="<f4").astype(np.float64)
    return MelSpectrogram(
        frames.reshape(int(n_frames), int(n_mels)), int(n_mels), int(hop), int(fft_size), int(rate)
    )


def log_mel(buf: AudioBuffer, config: FeatureConfig) -> MelSpectrogram:
    """80-band (by default) log-scale mel energies from the power spectrogram."""
    if buf.sample_rate != config.sample_rate:
        raise ConfigError(
            f"buffer rate {buf.sample_rate} != feature config rate {config.sample_rate}"
        )
    spec = stft(buf, config.fft_size, config.hop_length)
    power = np.abs(spec.bins) ** 2
    fbank = mel_filterbank(
        config.n_mels, config.fft_size, config.sample_rate, config.f_min, config.resolved_f_max()
    )
    mel_power = power @ fbank.T
    frames = np.log(np.maximum(mel_power, config.floor))
    return MelSpectrogram(
        frames, config.n_mels, config.hop_length, config.fft_size, config.sample_rate
    )
