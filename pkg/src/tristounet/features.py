"""MFCC feature stack: 11 MFCC + deltas + double deltas + energy deltas."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.fft import dct

from .corpus import AudioSignal, CorpusError, FeatureSequence

ENERGY_FLOOR = 1e-10


@dataclass(frozen=True)
class FeatureConfig:
    frame_duration: float = 0.032
    frame_step: float = 0.020
    num_mfcc: int = 11
    num_mel_filters: int = 40
    fft_size: int = 512
    include_derivatives: bool = True
    include_energy_derivatives: bool = True
    # derivative-free mode keeps static log-energy as a 12th column
    include_static_energy: bool = True
    delta_window: int = 2

    def __post_init__(self):
        if not (self.frame_duration > self.frame_step > 0):
            raise ValueError("need frame_duration > frame_step > 0")
        if self.num_mfcc < 1:
            raise ValueError("num_mfcc must be >= 1")
        if self.num_mfcc >= self.num_mel_filters:
            raise ValueError("num_mfcc must be smaller than num_mel_filters")

    @classmethod
    def baseline(cls, **overrides) -> "FeatureConfig":
        """Derivative-free configuration used by the BIC and divergence scores."""
        return cls(include_derivatives=False, include_energy_derivatives=False, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def dimension(self) -> int:
        if self.include_derivatives:
            return 3 * self.num_mfcc + (2 if self.include_energy_derivatives else 0)
        return self.num_mfcc + (1 if self.include_static_energy else 0)


def _frame_lengths(sample_rate: int, cfg: FeatureConfig) -> tuple[int, int]:
    length = int(round(cfg.frame_duration * sample_rate))
    hop = int(round(cfg.frame_step * sample_rate))
    if cfg.fft_size < length:
        raise ValueError(f"fft_size={cfg.fft_size} smaller than frame length {length}")
    return length, hop


def frame_signal(signal: AudioSignal, cfg: FeatureConfig, window: bool = True) -> np.ndarray:
    """Slice the signal into ``T x frame_length`` frames, Hamming-windowed by default.

    ``T = floor((duration - frame_duration) / frame_step) + 1``.
    """
    length, hop = _frame_lengths(signal.sample_rate, cfg)
    if len(signal.samples) < length:
        raise CorpusError(
            f"signal of {signal.duration:.4f} s is shorter than one {cfg.frame_duration} s frame"
        )
    num_frames = (len(signal.samples) - length) // hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(signal.samples, length)[::hop][:num_frames]
    frames = np.array(frames, dtype=np.float64)
    if window:
        frames *= np.hamming(length)
    return frames


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def mel_filterbank(num_filters: int, fft_size: int, sample_rate: int,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters on the rfft bins, ``num_filters x (fft_size // 2 + 1)``.

    Filters are equally spaced on the mel scale between ``fmin`` and ``fmax``
    (Nyquist by default) and peak at 1.
    """
    fmax = sample_rate / 2.0 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), num_filters + 2))
    freqs = np.fft.rfftfreq(fft_size, d=1.0 / sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def log_energy(raw_frames: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(np.sum(raw_frames ** 2, axis=1), ENERGY_FLOOR))


def mfcc_static(frames: np.ndarray, cfg: FeatureConfig, sample_rate: int = 16000,
                raw_frames: np.ndarray | None = None) -> np.ndarray:
    """Static cepstra ``c1..c_num_mfcc`` with log-energy appended as the last column.

    ``frames`` are windowed frames; energy uses ``raw_frames`` (unwindowed)
    when given, ``frames`` otherwise.
    """
    power = np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=1)) ** 2
    bank = mel_filterbank(cfg.num_mel_filters, cfg.fft_size, sample_rate)
    log_mel = np.log(np.maximum(power @ bank.T, ENERGY_FLOOR))
    cepstra = dct(log_mel, type=2, norm="ortho", axis=1)[:, 1:cfg.num_mfcc + 1]
    energy = log_energy(frames if raw_frames is None else raw_frames)
    return np.column_stack([cepstra, energy])


def delta(x: np.ndarray, delta_window: int = 2) -> np.ndarray:
    """Regression deltas ``sum_k k (x[t+k] - x[t-k]) / (2 sum_k k^2)`` with edge repetition."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    num_frames = x.shape[0]
    padded = np.pad(x, ((delta_window, delta_window), (0, 0)), mode="edge")
    out = np.zeros_like(x)
    for k in range(1, delta_window + 1):
        ahead = padded[delta_window + k:delta_window + k + num_frames]
        behind = padded[delta_window - k:delta_window - k + num_frames]
        out += k * (ahead - behind)
    out /= 2.0 * sum(k * k for k in range(1, delta_window + 1))
    return out[:, 0] if squeeze else out


def stack_features(signal: AudioSignal, cfg: FeatureConfig | None = None) -> FeatureSequence:
    """Extract the feature stack of a whole signal.

    Default columns: 11 MFCC, 11 delta MFCC, 11 double-delta MFCC, delta energy,
    double-delta energy (35 in total).  In derivative-free mode: 11 MFCC and the
    static log-energy (12).
    """
    cfg = cfg or FeatureConfig()
    raw = frame_signal(signal, cfg, window=False)
    windowed = raw * np.hamming(raw.shape[1])
    static = mfcc_static(windowed, cfg, signal.sample_rate, raw_frames=raw)
    cepstra, energy = static[:, :-1], static[:, -1:]
    if not cfg.include_derivatives:
        columns = [cepstra, energy] if cfg.include_static_energy else [cepstra]
    else:
        d1 = delta(static, cfg.delta_window)
        d2 = delta(d1, cfg.delta_window)
        columns = [cepstra, d1[:, :-1], d2[:, :-1]]
        if cfg.include_energy_derivatives:
            columns += [d1[:, -1:], d2[:, -1:]]
    return FeatureSequence(np.hstack(columns), cfg.frame_step, cfg.frame_duration, 0.0)
