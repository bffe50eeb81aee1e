import numpy as np
import pytest

from wavestack.audio import AudioBuffer


def sine(freq, seconds, rate, amp=0.5, phase=0.0):
    t = np.arange(int(round(seconds * rate))) / rate
    return AudioBuffer(amp * np.sin(2 * np.pi * freq * t + phase), rate)


def vibrato_tone(
    f0=200.0,
    seconds=2.0,
    rate=24000,
    vibrato_hz=5.0,
    vibrato_depth=6.0,
    n_partials=6,
    peak=0.8,
    fade=0.005,
):
    """Harmonic stack with sinusoidal vibrato: fundamental plus overtones at
    integer multiples, 1/k amplitudes, peak-normalized, short edge fades."""
    n = int(round(seconds * rate))
    t = np.arange(n) / rate
    inst_f0 = f0 + vibrato_depth * np.sin(2 * np.pi * vibrato_hz * t)
    phase = 2 * np.pi * np.cumsum(inst_f0) / rate
    x = np.zeros(n)
    for k in range(1, n_partials + 1):
        x += np.sin(k * phase) / k
    x *= peak / np.max(np.abs(x))
    n_fade = int(fade * rate)
    if n_fade:
        ramp = np.linspace(0.0, 1.0, n_fade)
        x[:n_fade] *= ramp
        x[-n_fade:] *= ramp[::-1]
    return AudioBuffer(x, rate)


def band_energy(samples, rate, f_lo, f_hi):
    """Spectral energy in [f_lo, f_hi) Hz; Hann-windowed so measurement-window
    leakage stays far below the attenuation levels under test."""
    x = np.asarray(samples)
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x)))) ** 2
    freqs = np.fft.rfftfreq(len(x), 1.0 / rate)
    return float(spec[(freqs >= f_lo) & (freqs < f_hi)].sum())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
