"""Objective evaluation: pitch error, voicing decision error, multi-resolution
spectral error and mel-cepstral distortion, plus directory-level reporting.

The pitch tracker is an in-repo YIN-style detector (cumulative mean normalized
difference function, first-dip selection, parabolic lag refinement), so pitch
metrics are self-contained; absolute values are not comparable to trackers
from other toolkits, only orderings are.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .audio import AudioBuffer, hann_window, load_wav, mel_filterbank
from .errors import MetricUndefined, ShapeError

# (fft, hop, window) triples for the multi-resolution spectral error
MR_STFT_RESOLUTIONS = ((512, 50, 240), (1024, 120, 600), (2048, 240, 1200))

PITCH_FMIN = 50.0
PITCH_FMAX = 1000.0
PITCH_HOP = 300
PITCH_WINDOW = 1024
VOICING_THRESHOLD = 0.5

MCD_COEFFS = 13  # cepstral coefficients 1..13, gain term excluded
MCD_MELS = 40
MCD_CONST = 10.0 / np.log(10.0) * np.sqrt(2.0)


@dataclass(frozen=True)
class PitchTrack:
    f0: np.ndarray  # Hz per frame, 0 where unvoiced
    voiced: np.ndarray  # bool per frame
    frame_hop: int
    sample_rate: int

    @property
    def n_frames(self) -> int:
        return len(self.f0)


def track_pitch(
    buf: AudioBuffer,
    f_min: float = PITCH_FMIN,
    f_max: float = PITCH_FMAX,
    frame_hop: int = PITCH_HOP,
    window: int = PITCH_WINDOW,
    voicing_threshold: float = VOICING_THRESHOLD,
) -> PitchTrack:
    """Frame-wise f0 via the cumulative mean normalized difference function.

    A frame is voiced when periodicity confidence (1 - min CMND) reaches the
    threshold; the winning lag is the first dip below threshold (falls back to
    the global minimum), refined by parabolic interpolation.
    """
    rate = buf.sample_rate
    if not 0 < f_min < f_max <= rate / 2:
        raise ValueError(f"need 0 < f_min < f_max <= nyquist, got ({f_min}, {f_max})")
    tau_min = max(2, int(rate / f_max))
    tau_max = int(np.ceil(rate / f_min))
    span = window + tau_max
    if span > len(buf):
        raise ValueError(f"buffer of {len(buf)} samples shorter than one {span}-sample frame")
    x = buf.samples
    n_frames = -(-len(x) // frame_hop)
    padded = np.concatenate([x, np.zeros(max(0, (n_frames - 1) * frame_hop + span - len(x)))])

    f0 = np.zeros(n_frames)
    voiced = np.zeros(n_frames, dtype=bool)
    lags = np.arange(tau_max + 1)
    for i in range(n_frames):
        frame = padded[i * frame_hop : i * frame_hop + span]
        if np.max(np.abs(frame)) < 1e-8:
            continue
        # difference function d(tau) over a fixed integration window
        head = frame[:window]
        energy0 = float(head @ head)
        corr = np.correlate(frame, head, mode="valid")  # corr[tau] = sum head * frame[tau:]
        shifted_energy = np.cumsum(frame**2)
        tail_energy = shifted_energy[window - 1 + lags] - np.concatenate(
            ([0.0], shifted_energy[: tau_max])
        )
        diff = energy0 + tail_energy - 2.0 * corr[: tau_max + 1]
        diff = np.maximum(diff, 0.0)
        # cumulative mean normalization
        cmnd = np.ones(tau_max + 1)
        running = np.cumsum(diff[1:])
        nz = running > 0
        cmnd[1:][nz] = diff[1:][nz] * lags[1:][nz] / running[nz]

        search = cmnd[tau_min : tau_max + 1]
        below = np.flatnonzero(search < voicing_threshold)
        if below.size:
            k = below[0] + tau_min
            while k + 1 <= tau_max and cmnd[k + 1] < cmnd[k]:
                k += 1
        else:
            k = int(np.argmin(search)) + tau_min
        confidence = 1.0 - cmnd[k]
        if confidence < voicing_threshold:
            continue
        tau = float(k)
        if tau_min < k < tau_max:
            a, b, c = cmnd[k - 1], cmnd[k], cmnd[k + 1]
            denom = a - 2.0 * b + c
            if abs(denom) > 1e-12:
                tau += 0.5 * (a - c) / denom
        voiced[i] = True
        f0[i] = float(np.clip(rate / tau, f_min, f_max))
    return PitchTrack(f0, voiced, frame_hop, rate)


def _check_pair(ref: AudioBuffer, gen: AudioBuffer) -> None:
    if ref.sample_rate != gen.sample_rate:
        raise ShapeError(f"rate mismatch: {ref.sample_rate} != {gen.sample_rate}")
    if len(ref) != len(gen):
        raise ShapeError(f"length mismatch: {len(ref)} != {len(gen)}")


def pmae(ref: AudioBuffer, gen: AudioBuffer) -> float:
    """Mean |f0_ref - f0_gen| in Hz over frames voiced in both tracks."""
    _check_pair(ref, gen)
    tr, tg = track_pitch(ref), track_pitch(gen)
    both = tr.voiced & tg.voiced
    if not np.any(both):
        raise MetricUndefined("pmae", "no commonly voiced frame")
    return float(np.mean(np.abs(tr.f0[both] - tg.f0[both])))


def vde(ref: AudioBuffer, gen: AudioBuffer) -> float:
    """Fraction of frames whose voicing decisions disagree."""
    _check_pair(ref, gen)
    tr, tg = track_pitch(ref), track_pitch(gen)
    return float(np.mean(tr.voiced != tg.voiced))


def _frame_magnitudes(x: np.ndarray, fft_size: int, hop: int, win: int) -> np.ndarray:
    n_frames = max(1, 1 + (len(x) - win) // hop)
    if len(x) < win:
        x = np.concatenate([x, np.zeros(win - len(x))])
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n_frames]
    return np.abs(np.fft.rfft(frames * hann_window(win), n=fft_size, axis=1))


def stft_error_components(
    ref: AudioBuffer, gen: AudioBuffer, resolution
) -> tuple[float, float]:
    """(spectral convergence, log-magnitude L1) at one (fft, hop, win) triple."""
    fft_size, hop, win = resolution
    mr = _frame_magnitudes(ref.samples, fft_size, hop, win)
    mg = _frame_magnitudes(gen.samples, fft_size, hop, win)
    ref_norm = np.linalg.norm(mr)
    if ref_norm == 0.0:
        raise MetricUndefined("mr_stft", "silent reference (zero spectral norm)")
    sc = float(np.linalg.norm(mr - mg) / ref_norm)
    log_l1 = float(np.mean(np.abs(np.log(mr + 1e-7) - np.log(mg + 1e-7))))
    return sc, log_l1


def mr_stft(ref: AudioBuffer, gen: AudioBuffer, resolutions=MR_STFT_RESOLUTIONS) -> float:
    """Mean over resolutions of spectral convergence + log-magnitude L1."""
    _check_pair(ref, gen)
    total = 0.0
    for resolution in resolutions:
        sc, log_l1 = stft_error_components(ref, gen, resolution)
        total += sc + log_l1
    return float(total / len(resolutions))


def _mel_cepstra(x: np.ndarray, rate: int) -> np.ndarray:
    fft_size, hop = 1024, PITCH_HOP
    mags = _frame_magnitudes(x, fft_size, hop, fft_size)
    fbank = mel_filterbank(MCD_MELS, fft_size, rate, 0.0, rate / 2)
    logmel = np.log(np.maximum(mags**2 @ fbank.T, 1e-10))
    return dct(logmel, type=2, norm="ortho", axis=1)


def mcd(ref: AudioBuffer, gen: AudioBuffer) -> float:
    """Mel cepstral distortion (dB) over coefficients 1..13; c0 excluded, so
    the metric is invariant to pure gain on non-silent material."""
    _check_pair(ref, gen)
    cr = _mel_cepstra(ref.samples, ref.sample_rate)[:, 1 : MCD_COEFFS + 1]
    cg = _mel_cepstra(gen.samples, gen.sample_rate)[:, 1 : MCD_COEFFS + 1]
    per_frame = np.sqrt(np.sum((cr - cg) ** 2, axis=1))
    return float(MCD_CONST * np.mean(per_frame))


@dataclass
class FileMetrics:
    name: str
    pmae: float | None = None
    vde: float | None = None
    mr_stft: float | None = None
    mcd: float | None = None


@dataclass
class Exclusion:
    name: str
    metric: str
    reason: str


@dataclass
class MetricReport:
    """Per-file metric values, their unweighted averages, and the list of
    (file, metric) pairs excluded because the metric was undefined there."""

    files: list
    averages: dict
    excluded: list
    rtf: float | None = None

    def to_json(self) -> str:
        doc = {
            "files": [asdict(f) for f in self.files],
            "averages": self.averages,
            "excluded": [asdict(e) for e in self.excluded],
        }
        if self.rtf is not None:
            doc["averages"] = {**self.averages, "rtf": self.rtf}
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        doc = json.loads(text)
        averages = dict(doc["averages"])
        rtf_value = averages.pop("rtf", None)
        return cls(
            [FileMetrics(**f) for f in doc["files"]],
            averages,
            [Exclusion(**e) for e in doc["excluded"]],
            rtf_value,
        )


_METRIC_FNS = {"pmae": pmae, "vde": vde, "mr_stft": mr_stft, "mcd": mcd}


def _evaluate_one(name: str, ref_path: Path, gen_path: Path):
    entry = FileMetrics(name=name)
    exclusions = []
    try:
        ref = load_wav(ref_path)
        gen = load_wav(gen_path)
        if len(ref) != len(gen):
            shorter = min(len(ref), len(gen))
            ref = AudioBuffer(ref.samples[:shorter], ref.sample_rate)
            gen = AudioBuffer(gen.samples[:shorter], gen.sample_rate)
    except Exception as exc:
        for metric in _METRIC_FNS:
            exclusions.append(Exclusion(name, metric, str(exc)))
        return entry, exclusions
    for metric, fn in _METRIC_FNS.items():
        try:
            setattr(entry, metric, fn(ref, gen))
        except MetricUndefined as exc:
            exclusions.append(Exclusion(name, metric, exc.reason))
        except Exception as exc:
            exclusions.append(Exclusion(name, metric, str(exc)))
    return entry, exclusions


def evaluate_pair_dir(ref_dir, gen_dir, workers: int = 2) -> MetricReport:
    """Evaluate matching filenames in two directories; per-file failures are
    excluded from that metric's average and listed, not fatal."""
    ref_dir, gen_dir = Path(ref_dir), Path(gen_dir)
    names = sorted(
        {p.name for p in ref_dir.glob("*.wav")} & {p.name for p in gen_dir.glob("*.wav")}
    )
    if not names:
        raise ValueError(f"no matching .wav filenames between {ref_dir} and {gen_dir}")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(
            pool.map(lambda n: _evaluate_one(n, ref_dir / n, gen_dir / n), names)
        )
    files = [entry for entry, _ in results]
    excluded = [e for _, exc in results for e in exc]
    averages = {}
    for metric in _METRIC_FNS:
        values = [getattr(f, metric) for f in files if getattr(f, metric) is not None]
        averages[metric] = float(np.mean(values)) if values else None
    return MetricReport(files, averages, excluded)
