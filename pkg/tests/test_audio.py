import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import wavfile

from wavestack.audio import (
    AudioBuffer,
    FeatureConfig,
    frame_count,
    hann_window,
    load_mel_file,
    load_wav,
    log_mel,
    mel_center_frequencies,
    mel_filterbank,
    save_mel_file,
    save_wav,
    stft,
)
from wavestack.errors import ConfigError, FormatError, UnsupportedFormatError

from conftest import sine


def test_load_silence(tmp_path):
    path = tmp_path / "silence.wav"
    wavfile.write(path, 24000, np.zeros(24000, dtype=np.int16))
    buf = load_wav(path)
    assert buf.sample_rate == 24000
    assert len(buf) == 24000
    assert np.all(buf.samples == 0.0)


def test_load_full_scale_pcm(tmp_path):
    path = tmp_path / "full.wav"
    wavfile.write(path, 8000, np.array([32767, -32768], dtype=np.int16))
    buf = load_wav(path)
    assert buf.samples[0] == pytest.approx(32767 / 32768)
    assert buf.samples[1] == -1.0


def test_roundtrip_quantization_bound(tmp_path, rng):
    original = rng.uniform(-1.0, 1.0, 5000)
    path = tmp_path / "rt.wav"
    save_wav(AudioBuffer(original, 24000), path)
    loaded = load_wav(path)
    assert np.max(np.abs(loaded.samples - original)) <= 2.0**-15


def test_save_clips_out_of_range(tmp_path):
    path = tmp_path / "clip.wav"
    save_wav(AudioBuffer(np.array([2.0, -2.0, 0.0]), 8000), path)
    _, data = wavfile.read(path)
    assert data.tolist() == [32767, -32768, 0]


def test_save_empty_rejected(tmp_path):
    with pytest.raises(ValueError):
        save_wav(AudioBuffer(np.zeros(0), 8000), tmp_path / "x.wav")


def test_stereo_downmix(tmp_path):
    path = tmp_path / "stereo.wav"
    left = np.full(100, 8000, dtype=np.int16)
    right = np.full(100, 16000, dtype=np.int16)
    wavfile.write(path, 24000, np.stack([left, right], axis=1))
    buf = load_wav(path)
    assert buf.samples[0] == pytest.approx(12000 / 32768)


def test_load_float32(tmp_path):
    path = tmp_path / "f32.wav"
    wavfile.write(path, 24000, np.array([0.25, -0.5, 1.5], dtype=np.float32))
    buf = load_wav(path)
    assert buf.samples[:2].tolist() == [0.25, -0.5]
    assert buf.samples[2] == 1.0  # clipped on load


def test_load_malformed(tmp_path):
    path = tmp_path / "junk.wav"
    path.write_bytes(b"this is not a RIFF file at all..........")
    with pytest.raises(FormatError):
        load_wav(path)


def test_load_unsupported_encoding(tmp_path):
    path = tmp_path / "u8.wav"
    wavfile.write(path, 8000, np.zeros(16, dtype=np.uint8))
    with pytest.raises(UnsupportedFormatError):
        load_wav(path)


def test_stft_zero_signal():
    spec = stft(AudioBuffer(np.zeros(2400), 24000), 512, 300)
    assert spec.n_frames == 8
    assert np.all(spec.bins == 0.0)


def test_stft_empty_rejected():
    with pytest.raises(ValueError):
        stft(AudioBuffer(np.zeros(0), 24000), 512, 300)


def test_stft_bin_center_sine_peaks():
    rate, fft_size, hop = 24000, 512, 128
    k = 20  # bin-center frequency k * rate / fft_size
    buf = sine(k * rate / fft_size, 0.2, rate)
    spec = stft(buf, fft_size, hop)
    mags = np.abs(spec.bins)
    for frame in mags[4:-4]:  # interior frames only
        assert int(np.argmax(frame)) == k


def test_stft_parseval():
    # energy of each windowed frame equals the rFFT-accumulated energy
    rate, fft_size, hop = 24000, 512, 160
    buf = sine(997.0, 0.3, rate, amp=0.7)
    spec = stft(buf, fft_size, hop)
    window = hann_window(fft_size)
    n = len(buf)
    pad = fft_size // 2
    padded = np.pad(buf.samples, (pad, pad + fft_size), mode="reflect")
    for i in range(spec.n_frames):
        frame = padded[i * hop : i * hop + fft_size] * window
        direct = np.sum(frame**2)
        mags2 = np.abs(spec.bins[i]) ** 2
        via_fft = (mags2[0] + 2.0 * np.sum(mags2[1:-1]) + mags2[-1]) / fft_size
        assert via_fft == pytest.approx(direct, rel=1e-6)


def test_stft_scaling_linearity(rng):
    x = rng.standard_normal(4000)
    a = 3.5
    s1 = stft(AudioBuffer(x, 24000), 512, 125)
    s2 = stft(AudioBuffer(a * x, 24000), 512, 125)
    np.testing.assert_allclose(np.abs(s2.bins), a * np.abs(s1.bins), rtol=1e-9, atol=1e-12)


def test_stft_frame_count_exhaustive():
    hop, fft_size = 16, 64
    for n in range(1, 10 * hop + 1):
        spec = stft(AudioBuffer(np.ones(n) * 0.1, 8000), fft_size, hop)
        assert spec.n_frames == -(-n // hop) == frame_count(n, hop)


def test_stft_validation():
    buf = sine(100, 0.1, 8000)
    with pytest.raises(ConfigError):
        stft(buf, 500, 100)  # not a power of two
    with pytest.raises(ConfigError):
        stft(buf, 256, 512)  # hop > fft


def test_filterbank_single_triangle():
    fb = mel_filterbank(1, 1024, 24000, 100.0, 4000.0)
    assert fb.shape == (1, 513)
    bin_hz = np.arange(513) * 24000 / 1024
    inside = (bin_hz > 100.0) & (bin_hz < 4000.0)
    assert np.all(fb[0][inside] > 0.0)
    assert np.all(fb[0][~inside] == 0.0)


def test_filterbank_covers_band():
    fb = mel_filterbank(40, 1024, 24000, 80.0, 11000.0)
    bin_hz = np.arange(513) * 24000 / 1024
    centers = mel_center_frequencies(40, 80.0, 11000.0)
    inside = (bin_hz > centers[0]) & (bin_hz < centers[-1])
    assert np.all(fb.sum(axis=0)[inside] > 0.0)


def test_filterbank_centers_increasing():
    centers = mel_center_frequencies(80, 20.0, 12000.0)
    assert np.all(np.diff(centers) > 0.0)


def test_filterbank_too_many_mels():
    with pytest.raises(ConfigError):
        mel_filterbank(200, 256, 8000, 20.0, 4000.0)


def test_filterbank_validation():
    with pytest.raises(ConfigError):
        mel_filterbank(10, 512, 8000, 5000.0, 2000.0)


def test_log_mel_zero_floor():
    cfg = FeatureConfig(sample_rate=24000, n_mels=20, fft_size=512, hop_length=300)
    mel = log_mel(AudioBuffer(np.zeros(2400), 24000), cfg)
    assert np.all(mel.frames == np.log(1e-5))


def test_log_mel_dominant_band_matches_tone():
    cfg = FeatureConfig(sample_rate=24000, n_mels=40, fft_size=2048, hop_length=300)
    mel = log_mel(sine(440.0, 0.5, 24000), cfg)
    centers = mel_center_frequencies(cfg.n_mels, cfg.f_min, cfg.resolved_f_max())
    expected_band = int(np.argmin(np.abs(centers - 440.0)))
    for frame in mel.frames[2:-2]:
        assert int(np.argmax(frame)) == expected_band


def test_log_mel_power_law():
    cfg = FeatureConfig(sample_rate=24000, n_mels=40, fft_size=1024, hop_length=300)
    m1 = log_mel(sine(440.0, 0.4, 24000, amp=0.3), cfg)
    m2 = log_mel(sine(440.0, 0.4, 24000, amp=0.6), cfg)
    band = int(np.argmax(m1.frames[5]))
    delta = m2.frames[5, band] - m1.frames[5, band]
    assert delta == pytest.approx(np.log(4.0), abs=1e-3)


def test_log_mel_rate_mismatch():
    cfg = FeatureConfig(sample_rate=24000)
    with pytest.raises(ConfigError):
        log_mel(sine(100.0, 0.1, 16000), cfg)


def test_log_mel_hop_shift_invariance():
    cfg = FeatureConfig(sample_rate=24000, n_mels=20, fft_size=512, hop_length=256)
    base = sine(500.0, 0.3, 24000)
    delayed = AudioBuffer(np.concatenate([np.zeros(cfg.hop_length), base.samples]), 24000)
    m1 = log_mel(base, cfg)
    m2 = log_mel(delayed, cfg)
    interior = slice(3, m1.n_frames - 3)
    np.testing.assert_allclose(
        m2.frames[1:][interior], m1.frames[interior], rtol=1e-7, atol=1e-9
    )


@settings(max_examples=25, deadline=None)
@given(
    st.lists(st.floats(min_value=-5.0, max_value=5.0, allow_nan=False), min_size=64, max_size=700)
)
def test_feature_path_never_produces_nan(samples):
    cfg = FeatureConfig(sample_rate=8000, n_mels=12, fft_size=128, hop_length=64, f_min=10.0)
    buf = AudioBuffer(np.asarray(samples), 8000)
    spec = stft(buf, cfg.fft_size, cfg.hop_length)
    mel = log_mel(AudioBuffer(np.clip(samples, -1, 1), 8000), cfg)
    assert np.all(np.isfinite(spec.bins))
    assert np.all(np.isfinite(mel.frames))
    assert np.all(mel.frames >= np.log(cfg.floor) - 1e-12)


def test_mel_file_roundtrip(tmp_path):
    cfg = FeatureConfig(sample_rate=24000, n_mels=20, fft_size=512, hop_length=300)
    mel = log_mel(sine(440.0, 0.5, 24000), cfg)
    path = tmp_path / "x.mel"
    save_mel_file(mel, path)
    loaded = load_mel_file(path)
    assert loaded.n_frames == mel.n_frames
    assert (loaded.n_mels, loaded.hop_length) == (mel.n_mels, mel.hop_length)
    assert (loaded.fft_size, loaded.sample_rate) == (mel.fft_size, mel.sample_rate)
    np.testing.assert_array_equal(loaded.frames, mel.frames.astype(np.float32).astype(np.float64))


def test_mel_file_truncated(tmp_path):
    path = tmp_path / "bad.mel"
    path.write_bytes(b"\x01\x00")
    with pytest.raises(FormatError):
        load_mel_file(path)
