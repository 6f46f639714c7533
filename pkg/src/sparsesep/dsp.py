"""Core signal types, WAV I/O, log-mel features and VAD post-processing.

Everything here is pure and double precision; the only quantization point
is WAV I/O. Feature framing is kept aligned with the model's encoder:
for an encoder with kernel ``L`` and stride ``L/2``, a signal of length
``T`` produces ``(T - L) // (L // 2) + 1`` frames, and the log-mel
extractor emits exactly the same count with windows centered on the
encoder frames.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import scipy.io.wavfile as _wavfile

from .errors import DomainError, FormatError

LOG_ENERGY_FLOOR = 1e-10


@dataclass(frozen=True)
class Waveform:
    """Mono sampled signal. Samples are dimensionless, nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise DomainError(f"waveform must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise DomainError("waveform contains NaN/Inf")
        if self.sample_rate <= 0:
            raise DomainError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class VadMask:
    """Per-sample activity vector with values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise DomainError(f"mask must be 1-D, got shape {values.shape}")
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise DomainError("mask values must lie in [0, 1]")
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.values)

    @property
    def is_binary(self) -> bool:
        return bool(np.all((self.values == 0.0) | (self.values == 1.0)))

    @property
    def duty(self) -> float:
        """Fraction of active samples; the duration weight w for binary masks."""
        if len(self.values) == 0:
            return 0.0
        return float(np.count_nonzero(self.values)) / len(self.values)


def hz_to_mel(f):
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelBank:
    """Triangular mel filterbank over rfft bins, 0 Hz to Nyquist (HTK scale)."""

    n_filters: int = 80
    fft_size: int = 512
    sample_rate: int = 16000
    weights: np.ndarray = field(init=False, repr=False)
    centers_hz: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_filters < 1 or self.fft_size < 2:
            raise DomainError("invalid filterbank configuration")
        n_bins = self.fft_size // 2 + 1
        nyquist = self.sample_rate / 2.0
        mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), self.n_filters + 2)
        hz_pts = mel_to_hz(mel_pts)
        bin_hz = np.arange(n_bins) * self.sample_rate / self.fft_size
        weights = np.zeros((self.n_filters, n_bins))
        for m in range(self.n_filters):
            lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
            rising = (bin_hz - lo) / max(ctr - lo, 1e-12)
            falling = (hi - bin_hz) / max(hi - ctr, 1e-12)
            weights[m] = np.clip(np.minimum(rising, falling), 0.0, None)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "centers_hz", hz_pts[1:-1].copy())


def read_wav(path) -> Waveform:
    """Read a mono PCM16 or float32 RIFF file. No resampling is performed."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    rate, data = _wavfile.read(path)
    if data.ndim != 1:
        raise FormatError(f"{path}: expected mono audio, got {data.ndim} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, int(rate))


def write_wav(path, wav: Waveform, fmt: str = "float32"):
    """Write a mono RIFF file; fmt is 'float32' or 'pcm16'."""
    if fmt == "float32":
        _wavfile.write(path, wav.sample_rate, wav.samples.astype(np.float32))
    elif fmt == "pcm16":
        quantized = np.clip(np.round(wav.samples * 32768.0), -32768, 32767)
        _wavfile.write(path, wav.sample_rate, quantized.astype(np.int16))
    else:
        raise FormatError(f"unsupported output format {fmt!r}")


def mean_normalize(wav: Waveform) -> Waveform:
    if len(wav) == 0:
        raise DomainError("cannot mean-normalize an empty waveform")
    return Waveform(wav.samples - wav.samples.mean(), wav.sample_rate)


def encoder_frame_count(n_samples: int, kernel: int) -> int:
    """Frame count of a stride-kernel/2 encoder: (T - L) // (L/2) + 1."""
    stride = kernel // 2
    if n_samples < kernel:
        raise DomainError(f"signal of {n_samples} samples shorter than kernel {kernel}")
    return (n_samples - kernel) // stride + 1


def logfbank(wav: Waveform, bank: MelBank, frame_step: int) -> np.ndarray:
    """Log mel-filterbank energies, one row per encoder frame.

    Windows of ``bank.fft_size`` samples are centered on the encoder frames
    of a kernel ``2 * frame_step`` / stride ``frame_step`` encoder, with
    zero padding at the signal edges, so the frame count matches the
    encoder feature map exactly.
    """
    if frame_step <= 0:
        raise DomainError("frame_step must be positive")
    kernel = 2 * frame_step
    n_frames = encoder_frame_count(len(wav), kernel)
    win = bank.fft_size
    half = win // 2
    # encoder frame i covers [i*step, i*step + 2*step); its center is step*(i+1)
    centers = frame_step * (np.arange(n_frames) + 1)
    padded = np.pad(wav.samples, (half, win))
    starts = centers - half + half  # shift by the front padding
    idx = starts[:, None] + np.arange(win)[None, :]
    frames = padded[idx]
    spectrum = np.abs(np.fft.rfft(frames, n=bank.fft_size, axis=1)) ** 2
    energies = spectrum @ bank.weights.T
    return np.log(energies + LOG_ENERGY_FLOOR)


def mean_filter(mask: VadMask, window_ms: float, sample_rate: int) -> VadMask:
    """Centered moving average with edge truncation (divide by actual count)."""
    if window_ms <= 0:
        raise DomainError("window_ms must be positive")
    w = int(round(window_ms / 1000.0 * sample_rate))
    w = max(w, 1)
    t = len(mask)
    if t == 0:
        return mask
    half_left = (w - 1) // 2
    half_right = w // 2
    csum = np.concatenate(([0.0], np.cumsum(mask.values)))
    lo = np.clip(np.arange(t) - half_left, 0, t)
    hi = np.clip(np.arange(t) + half_right + 1, 0, t)
    out = (csum[hi] - csum[lo]) / (hi - lo)
    return VadMask(np.clip(out, 0.0, 1.0))


def binarize(mask: VadMask, gamma: float) -> VadMask:
    """Threshold a soft mask; values >= gamma map to 1."""
    if not 0.0 < gamma < 1.0:
        raise DomainError(f"gamma must lie in (0, 1), got {gamma}")
    return VadMask((mask.values >= gamma).astype(np.float64))


def apply_mask(wav: Waveform, mask: VadMask) -> Waveform:
    if len(wav) != len(mask):
        raise DomainError(f"length mismatch: waveform {len(wav)} vs mask {len(mask)}")
    return Waveform(wav.samples * mask.values, wav.sample_rate)


def mask_to_intervals(mask: VadMask, sample_rate: int) -> list[tuple[float, float]]:
    """Contiguous active runs of a binary mask as (start_sec, end_sec) pairs."""
    active = mask.values > 0
    if not active.any():
        return []
    edges = np.flatnonzero(np.diff(np.concatenate(([False], active, [False])).astype(np.int8)))
    starts, ends = edges[0::2], edges[1::2]
    return [(s / sample_rate, e / sample_rate) for s, e in zip(starts, ends)]


def save_intervals(path, intervals):
    """Persist (start_sec, end_sec) pairs as text lines with 6 decimals."""
    with open(path, "w") as fh:
        for start, end in intervals:
            fh.write(f"{start:.6f} {end:.6f}\n")


def load_intervals(path) -> list[tuple[float, float]]:
    intervals = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise FormatError(f"{path}: malformed interval line {line!r}")
            intervals.append((float(parts[0]), float(parts[1])))
    return intervals


def intervals_to_mask(intervals, n_samples: int, sample_rate: int) -> VadMask:
    values = np.zeros(n_samples)
    for start, end in intervals:
        lo = max(0, int(round(start * sample_rate)))
        hi = min(n_samples, int(round(end * sample_rate)))
        values[lo:hi] = 1.0
    return VadMask(values)
