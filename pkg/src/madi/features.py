"""Log-mel filterbank features and waveform-level augmentations.

Feature extraction is deliberately bare: Hann window, magnitude spectrum,
triangular HTK mel filters spanning 0 Hz to Nyquist, an energy floor and a
natural log.  No dithering, pre-emphasis or mean normalization.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

ENERGY_FLOOR = 1e-10


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-D array")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FeatureSequence:
    frames: np.ndarray  # (T, F)
    frame_shift: float = 0.010
    frame_length: float = 0.025

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class AugmentConfig:
    pitch_factor_range: tuple[float, float] = (0.9, 1.1)
    reverb_decay: float = 0.2
    reverb_wet: float = 0.3
    mask_count: int = 2
    mask_span: float = 0.05
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.pitch_factor_range
        if not 0 < lo <= hi:
            raise ValueError("pitch_factor_range must satisfy 0 < lo <= hi")
        if not 0.0 <= self.reverb_wet <= 1.0:
            raise ValueError("reverb_wet must lie in [0, 1]")
        if self.mask_count < 0 or self.mask_span < 0:
            raise ValueError("mask parameters must be non-negative")


# ------------------------------------------------------------------ fbank
def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def num_frames(num_samples: int, sample_rate: int, frame_length: float = 0.025, frame_shift: float = 0.010) -> int:
    win = int(round(frame_length * sample_rate))
    hop = int(round(frame_shift * sample_rate))
    if num_samples < win:
        raise ValueError(f"signal of {num_samples} samples is shorter than one {win}-sample window")
    return 1 + (num_samples - win) // hop


def fft_size(win: int) -> int:
    return 1 << int(np.ceil(np.log2(win)))


def mel_filterbank(num_bins: int, n_fft: int, sample_rate: int) -> tuple[np.ndarray, np.ndarray]:
    """Triangular filters on the HTK mel scale.

    Returns the ``(num_bins, n_fft // 2 + 1)`` weight matrix and the filter
    center frequencies in Hz.
    """
    nyquist = sample_rate / 2.0
    edges_hz = mel_to_hz(np.linspace(0.0, hz_to_mel(nyquist), num_bins + 2))
    freqs = np.linspace(0.0, nyquist, n_fft // 2 + 1)
    lower, center, upper = edges_hz[:-2, None], edges_hz[1:-1, None], edges_hz[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    return weights, edges_hz[1:-1]


def compute_fbank(
    w: Waveform,
    num_bins: int = 80,
    frame_length: float = 0.025,
    frame_shift: float = 0.010,
) -> FeatureSequence:
    rate = w.sample_rate
    win = int(round(frame_length * rate))
    hop = int(round(frame_shift * rate))
    n = num_frames(len(w), rate, frame_length, frame_shift)
    starts = np.arange(n)[:, None] * hop
    frames = w.samples[starts + np.arange(win)[None, :]]
    frames = frames * np.hanning(win + 2)[1:-1]
    n_fft = fft_size(win)
    mag = np.abs(np.fft.rfft(frames, n=n_fft, axis=1))
    weights, _ = mel_filterbank(num_bins, n_fft, rate)
    energies = mag @ weights.T
    return FeatureSequence(np.log(np.maximum(energies, ENERGY_FLOOR)), frame_shift, frame_length)


def fbank_bin_centers(num_bins: int = 80, sample_rate: int = 16000, frame_length: float = 0.025) -> np.ndarray:
    n_fft = fft_size(int(round(frame_length * sample_rate)))
    return mel_filterbank(num_bins, n_fft, sample_rate)[1]


# ---------------------------------------------------------- augmentations
def augment_pitch(w: Waveform, factor: float) -> Waveform:
    """Pitch-scale by resampling: output is ``1/factor`` as long and tones move to ``f * factor``."""
    if factor <= 0:
        raise ValueError("pitch factor must be positive")
    if factor == 1.0:
        return Waveform(w.samples.copy(), w.sample_rate)
    n_out = max(1, int(round(len(w) / factor)))
    positions = np.arange(n_out) * factor
    out = np.interp(positions, np.arange(len(w)), w.samples)
    return Waveform(out, w.sample_rate)


def synthetic_impulse_response(decay: float, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """Exponentially decaying Gaussian noise with a unit first tap.

    ``decay`` is the time for the envelope to fall by 60 dB.
    """
    if decay <= 0:
        raise ValueError("reverb decay must be positive")
    n = max(2, int(round(decay * sample_rate)))
    t = np.arange(n) / sample_rate
    ir = rng.standard_normal(n) * np.exp(-6.9077552789821 * t / decay) * 0.1
    ir[0] = 1.0
    return ir


def augment_reverb(
    w: Waveform,
    decay: float,
    wet: float,
    rng: np.random.Generator | None = None,
    impulse_response: np.ndarray | None = None,
) -> Waveform:
    if not 0.0 <= wet <= 1.0:
        raise ValueError("wet mix must lie in [0, 1]")
    if impulse_response is None:
        impulse_response = synthetic_impulse_response(decay, w.sample_rate, rng or np.random.default_rng(0))
    # a pure delta only rescales, and peak renormalization undoes that
    if wet == 0.0 or (impulse_response[0] > 0 and not np.any(impulse_response[1:])):
        return Waveform(w.samples.copy(), w.sample_rate)
    x = w.samples
    wet_sig = fftconvolve(x, impulse_response)[: len(x)]
    out = (1.0 - wet) * x + wet * wet_sig
    peak_in = np.max(np.abs(x))
    peak_out = np.max(np.abs(out))
    if peak_out > 0:
        out = out * (peak_in / peak_out)
    return Waveform(out, w.sample_rate)


def augment_temporal_mask(w: Waveform, spans) -> Waveform:
    """Zero out each ``[start, end)`` sample range."""
    out = w.samples.copy()
    ordered = sorted((int(s), int(e)) for s, e in spans)
    prev_end = 0
    for s, e in ordered:
        if s < 0 or e > len(out) or s > e:
            raise ValueError(f"mask span [{s}, {e}) outside [0, {len(out)})")
        if s < prev_end:
            raise ValueError("mask spans overlap")
        out[s:e] = 0.0
        prev_end = e
    return Waveform(out, w.sample_rate)


def draw_mask_spans(n: int, count: int, span: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Place ``count`` non-overlapping spans of ``span`` samples uniformly in ``[0, n)``."""
    if count == 0 or span == 0:
        return []
    free = n - count * span
    if free < 0:
        raise ValueError("masks do not fit in the utterance")
    # stars-and-bars: sorted offsets into the free length, then shift each by the spans before it
    offsets = np.sort(rng.integers(0, free + 1, size=count))
    return [(int(o) + i * span, int(o) + (i + 1) * span) for i, o in enumerate(offsets)]


def augment_chain(w: Waveform, cfg: AugmentConfig, rng: np.random.Generator) -> Waveform:
    """Pitch randomization, then reverberation, then temporal masking."""
    lo, hi = cfg.pitch_factor_range
    factor = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    out = augment_pitch(w, factor)
    if cfg.reverb_wet > 0:
        out = augment_reverb(out, cfg.reverb_decay, cfg.reverb_wet, rng)
    span = int(round(cfg.mask_span * w.sample_rate))
    spans = draw_mask_spans(len(out), cfg.mask_count, span, rng)
    if spans:
        out = augment_temporal_mask(out, spans)
    return out


# ----------------------------------------------------------------- I/O
def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        rate = fh.getframerate()
        pcm = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32767.0, rate)


def write_features_csv(path, feats: FeatureSequence) -> None:
    np.savetxt(Path(path), feats.frames, delimiter=",", fmt="%.10g")
