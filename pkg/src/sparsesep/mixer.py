"""Speech-mixture simulation for desk-scale experiments.

Sources are synthetic pseudo-speech: per-speaker band-limited modulated
noise with exactly-known activity intervals (which replace forced
alignment for VAD labels). Mixing follows the min/max protocols: min mode
truncates the longer utterance to the shorter's length (always fully
overlapped); max mode zero-pads the shorter into the longer's span at a
random position. Interference is rescaled to a drawn SNR measured over
active (nonzero) samples; noise is injected with a configured
probability. Everything is deterministic under a fixed seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .dsp import (VadMask, Waveform, intervals_to_mask, save_intervals,
                  write_wav)
from .errors import DomainError


@dataclass(frozen=True)
class SpeakerProfile:
    """Synthesis recipe for one pseudo-speaker."""

    speaker_id: str
    band_hz: tuple
    mod_rate_hz: float

    def to_dict(self):
        return {"speaker_id": self.speaker_id, "band_hz": list(self.band_hz),
                "mod_rate_hz": self.mod_rate_hz}

    @classmethod
    def from_dict(cls, d):
        return cls(d["speaker_id"], tuple(d["band_hz"]), d["mod_rate_hz"])


def default_profiles(n_speakers: int, sample_rate: int = 16000) -> list[SpeakerProfile]:
    """Deterministic registry of speakers with distinct equal-width bands.

    Adjacent bands overlap by a fixed 300 Hz margin on purpose: spectral
    support alone cannot fully identify a speaker, so separation must use
    the conditioning signal. Equal widths keep the contested fraction of
    each speaker's energy the same, so no speaker is structurally harder.
    """
    if n_speakers < 1:
        raise DomainError("need at least one speaker")
    lo, hi = 250.0, min(6000.0, sample_rate / 2 * 0.85)
    edges = np.linspace(lo, hi, n_speakers + 1)
    margin = 150.0
    profiles = []
    for i in range(n_speakers):
        band = (float(max(lo, edges[i] - margin)), float(min(hi, edges[i + 1] + margin)))
        profiles.append(SpeakerProfile(f"spk{i:02d}", band, 2.0 + 1.3 * i))
    return profiles


@dataclass(frozen=True)
class SourceUtterance:
    waveform: Waveform
    speaker_id: str
    intervals: list  # (start_sec, end_sec) voiced spans, sorted, disjoint

    def __post_init__(self):
        dur = self.waveform.duration
        prev_end = 0.0
        for start, end in self.intervals:
            if start < prev_end - 1e-9 or end > dur + 1e-9 or end <= start:
                raise DomainError("activity intervals must be sorted, disjoint, in range")
            prev_end = end


def _bandpass(noise: np.ndarray, band, sample_rate: int) -> np.ndarray:
    """Brickwall bandpass with raised-cosine edges (10% of band width)."""
    spectrum = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(len(noise), 1.0 / sample_rate)
    lo, hi = band
    edge = 0.1 * (hi - lo)
    gain = np.zeros_like(freqs)
    core = (freqs >= lo) & (freqs <= hi)
    gain[core] = 1.0
    rise = (freqs >= lo - edge) & (freqs < lo)
    gain[rise] = 0.5 * (1 + np.cos(np.pi * (lo - freqs[rise]) / edge))
    fall = (freqs > hi) & (freqs <= hi + edge)
    gain[fall] = 0.5 * (1 + np.cos(np.pi * (freqs[fall] - hi) / edge))
    return np.fft.irfft(spectrum * gain, n=len(noise))


def synth_source(profile: SpeakerProfile, duration: float, seed: int,
                 sample_rate: int = 16000, voiced_only: bool = False) -> SourceUtterance:
    """Deterministic pseudo-speech with known activity intervals."""
    if duration <= 0:
        raise DomainError("duration must be positive")
    rng = np.random.default_rng([seed, 0x5EED])
    n = int(round(duration * sample_rate))
    carrier = _bandpass(rng.standard_normal(n), profile.band_hz, sample_rate)
    t = np.arange(n) / sample_rate
    phase = rng.uniform(0, 2 * np.pi)
    envelope = 0.55 + 0.45 * np.sin(2 * np.pi * profile.mod_rate_hz * t + phase)
    signal = carrier * envelope

    if voiced_only:
        interval_samples = [(0, n)]
    else:
        interval_samples = []
        pos = 0
        voiced = rng.random() < 0.8
        while pos < n:
            span = rng.uniform(0.3, 1.2) if voiced else rng.uniform(0.15, 0.6)
            span_n = min(n - pos, int(round(span * sample_rate)))
            if voiced and span_n > 0:
                interval_samples.append((pos, pos + span_n))
            pos += span_n
            voiced = not voiced
        if not interval_samples:  # force at least one voiced span
            interval_samples = [(0, n)]
    active = np.zeros(n)
    for lo, hi in interval_samples:
        active[lo:hi] = 1.0
    signal = signal * active
    peak = np.abs(signal).max()
    if peak > 0:
        signal = signal * (0.5 / peak)
    intervals = [(lo / sample_rate, hi / sample_rate) for lo, hi in interval_samples]
    return SourceUtterance(Waveform(signal, sample_rate), profile.speaker_id, intervals)


def _active_power(samples: np.ndarray) -> float:
    nz = samples[samples != 0.0]
    if nz.size == 0:
        raise DomainError("signal has zero power")
    return float(np.mean(nz**2))


def rescale_to_snr(clean: np.ndarray, interference: np.ndarray, target_db: float) -> np.ndarray:
    """Scale interference so active-region SNR(clean, interference) = target_db."""
    p_clean = _active_power(np.asarray(clean, dtype=np.float64))
    p_intf = _active_power(np.asarray(interference, dtype=np.float64))
    scale = np.sqrt(p_clean / (p_intf * 10.0 ** (target_db / 10.0)))
    return np.asarray(interference, dtype=np.float64) * scale


def colored_noise(n: int, rng, exponent: float = 1.0) -> np.ndarray:
    """Seeded 1/f^exponent noise, unit RMS."""
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n)
    freqs[0] = freqs[1] if n > 1 else 1.0
    spectrum *= freqs ** (-exponent / 2.0)
    noise = np.fft.irfft(spectrum, n=n)
    return noise / np.sqrt(np.mean(noise**2))


@dataclass(frozen=True)
class MixSpec:
    mode: str = "max"
    speaker_snr_db: tuple = (-5.0, 5.0)
    noise_prob: float = 0.5
    noise_snr_db: tuple = (10.0, 20.0)
    clip_seconds: float = 3.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.mode not in ("min", "max"):
            raise DomainError(f"mode must be 'min' or 'max', got {self.mode!r}")
        if not (self.speaker_snr_db[0] <= self.speaker_snr_db[1]
                and self.noise_snr_db[0] <= self.noise_snr_db[1]):
            raise DomainError("SNR ranges must be well ordered")
        if not 0.0 <= self.noise_prob <= 1.0:
            raise DomainError("noise_prob must lie in [0, 1]")


@dataclass
class MixtureExample:
    mixture: Waveform
    target: Waveform
    z: VadMask
    overlap_ratio: float
    metadata: dict = field(default_factory=dict)


def _sample_intervals(intervals, sample_rate):
    return [(int(round(a * sample_rate)), int(round(b * sample_rate))) for a, b in intervals]


def _shift_clip_intervals(intervals_n, shift, out_len):
    """Shift sample intervals by `shift` and clip to [0, out_len)."""
    out = []
    for lo, hi in intervals_n:
        lo, hi = lo + shift, hi + shift
        lo, hi = max(0, lo), min(out_len, hi)
        if hi > lo:
            out.append((lo, hi))
    return out


def _intersection_len(a_intervals, b_intervals):
    total = 0
    for alo, ahi in a_intervals:
        for blo, bhi in b_intervals:
            total += max(0, min(ahi, bhi) - max(alo, blo))
    return total


def _union_len(intervals):
    if not intervals:
        return 0
    merged = []
    for lo, hi in sorted(intervals):
        if merged and lo <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
        else:
            merged.append((lo, hi))
    return sum(hi - lo for lo, hi in merged)


def overlap_ratio(target_intervals, interference_intervals, total_len: int,
                  denominator: str = "total") -> float:
    """Both-active duration over total length (or over the active union)."""
    if total_len <= 0:
        raise DomainError("total length must be positive")
    inter = _intersection_len(target_intervals, interference_intervals)
    if denominator == "total":
        return inter / total_len
    if denominator == "union":
        union = _union_len(list(target_intervals) + list(interference_intervals))
        return inter / union if union else 0.0
    raise DomainError(f"unknown denominator policy {denominator!r}")


def _place(utt: SourceUtterance, shift: int, out_len: int):
    """Place a source into a length-out_len canvas at sample offset shift.

    Negative shift truncates the front. Returns (samples, sample intervals).
    """
    sr = utt.waveform.sample_rate
    samples = np.zeros(out_len)
    src = utt.waveform.samples
    src_lo = max(0, -shift)
    dst_lo = max(0, shift)
    n_copy = min(len(src) - src_lo, out_len - dst_lo)
    if n_copy > 0:
        samples[dst_lo:dst_lo + n_copy] = src[src_lo:src_lo + n_copy]
    intervals = _shift_clip_intervals(_sample_intervals(utt.intervals, sr), shift, out_len)
    return samples, intervals


def mix(target: SourceUtterance, interference: SourceUtterance, spec: MixSpec,
        seed: int, noise_source=None) -> MixtureExample:
    """Combine two sources per the min/max protocol of the MixSpec.

    Draw order (fixed for determinism): speaker SNR, placement offset,
    noise coin, noise SNR, noise samples. ``noise_source`` optionally maps
    (n_samples, rng) -> noise array; defaults to seeded colored noise.
    """
    sr = target.waveform.sample_rate
    if interference.waveform.sample_rate != sr:
        raise DomainError("sample rates differ between sources")
    rng = np.random.default_rng([spec.rng_seed, seed])
    snr_db = float(rng.uniform(*spec.speaker_snr_db))

    len_t, len_i = len(target.waveform), len(interference.waveform)
    if spec.mode == "min":
        out_len = min(len_t, len_i)
        if len_t > out_len:
            shift_t = -int(rng.integers(0, len_t - out_len + 1))
            shift_i = 0
        elif len_i > out_len:
            shift_t = 0
            shift_i = -int(rng.integers(0, len_i - out_len + 1))
        else:
            shift_t = shift_i = 0
            rng.integers(0, 1)  # keep the draw count stable
    else:
        out_len = max(len_t, len_i)
        if len_t < out_len:
            shift_t = int(rng.integers(0, out_len - len_t + 1))
            shift_i = 0
        elif len_i < out_len:
            shift_t = 0
            shift_i = int(rng.integers(0, out_len - len_i + 1))
        else:
            shift_t = shift_i = 0
            rng.integers(0, 1)

    s, t_intervals = _place(target, shift_t, out_len)
    v, i_intervals = _place(interference, shift_i, out_len)
    v = rescale_to_snr(s, v, snr_db)
    mixture = s + v

    noise_snr_db = None
    if rng.random() < spec.noise_prob:
        noise_snr_db = float(rng.uniform(*spec.noise_snr_db))
        noise = noise_source(out_len, rng) if noise_source else colored_noise(out_len, rng)
        noise = rescale_to_snr(mixture, noise, noise_snr_db)
        mixture = mixture + noise

    z = intervals_to_mask([(lo / sr, hi / sr) for lo, hi in t_intervals], out_len, sr)
    # min mode is fully overlapped by definition of the protocol
    ratio = 1.0 if spec.mode == "min" else overlap_ratio(t_intervals, i_intervals, out_len)
    meta = {"mode": spec.mode, "snr_db": snr_db, "noise_snr_db": noise_snr_db,
            "seed": seed, "target_speaker": target.speaker_id,
            "interference_speaker": interference.speaker_id}
    return MixtureExample(Waveform(mixture, sr), Waveform(s, sr), z, ratio, meta)


def clip_example(x: np.ndarray, s: np.ndarray, z: np.ndarray, clip_samples: int, rng):
    """Seeded joint random crop; shorter examples are end-padded with zeros."""
    n = len(x)
    if n >= clip_samples:
        off = int(rng.integers(0, n - clip_samples + 1))
        return (x[off:off + clip_samples].copy(), s[off:off + clip_samples].copy(),
                z[off:off + clip_samples].copy())
    pad = clip_samples - n
    return (np.pad(x, (0, pad)), np.pad(s, (0, pad)), np.pad(z, (0, pad)))


def clip_batch(examples, clip_seconds: float, seed: int, sample_rate: int = 16000):
    """Fixed-length training crops of (mixture, target, z) triples."""
    if clip_seconds <= 0:
        raise DomainError("clip_seconds must be positive")
    clip_samples = int(round(clip_seconds * sample_rate))
    out = []
    for idx, ex in enumerate(examples):
        rng = np.random.default_rng([seed, idx])
        out.append(clip_example(ex.mixture.samples, ex.target.samples,
                                ex.z.values, clip_samples, rng))
    return out


# -- dataset generation and manifests ---------------------------------------


def write_manifest(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path):
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def load_dataset(manifest_path) -> list[dict]:
    """Materialize a mixture manifest: WAVs and VAD sidecars into memory.

    Skipped records (infeasible overlap placements) are dropped.
    """
    from .dsp import load_intervals, read_wav
    root = os.path.dirname(os.path.abspath(manifest_path))
    items = []
    for rec in read_manifest(manifest_path):
        if rec.get("skipped"):
            continue
        mixture = read_wav(os.path.join(root, rec["mixture_path"]))
        target = read_wav(os.path.join(root, rec["target_path"]))
        intervals = load_intervals(os.path.join(root, rec["vad_path"]))
        z = intervals_to_mask(intervals, len(mixture), mixture.sample_rate)
        items.append({"mixture": mixture, "target": target, "z": z,
                      "speaker_id": rec.get("speaker_id"),
                      "enroll_path": (os.path.join(root, rec["enroll_path"])
                                      if rec.get("enroll_path") else None),
                      "overlap_ratio": rec.get("overlap_ratio"),
                      "bucket": rec.get("bucket")})
    return items


def _write_example(ex: MixtureExample, out_dir, stem, enroll_paths) -> dict:
    sr = ex.mixture.sample_rate
    mix_path = f"{stem}_mix.wav"
    tgt_path = f"{stem}_target.wav"
    vad_path = f"{stem}_vad.txt"
    write_wav(os.path.join(out_dir, mix_path), ex.mixture)
    write_wav(os.path.join(out_dir, tgt_path), ex.target)
    from .dsp import mask_to_intervals
    save_intervals(os.path.join(out_dir, vad_path), mask_to_intervals(ex.z, sr))
    rec = {"mixture_path": mix_path, "target_path": tgt_path, "vad_path": vad_path,
           "speaker_id": ex.metadata["target_speaker"],
           "overlap_ratio": round(ex.overlap_ratio, 6),
           "mode": ex.metadata["mode"], "snr_db": round(ex.metadata["snr_db"], 6),
           "noise_snr_db": (None if ex.metadata["noise_snr_db"] is None
                            else round(ex.metadata["noise_snr_db"], 6)),
           "seed": ex.metadata["seed"]}
    if enroll_paths and ex.metadata["target_speaker"] in enroll_paths:
        rec["enroll_path"] = enroll_paths[ex.metadata["target_speaker"]]
    return rec


def gen_mixture_set(sources, n: int, spec: MixSpec, seed: int, out_dir,
                    enroll_paths=None, noise_source=None) -> list[dict]:
    """Mix n random cross-speaker pairs; write WAVs + manifest records.

    Pairing and the per-item mix draws derive from (seed, item index), so
    the emitted manifest is byte-identical across runs.
    """
    by_speaker = {}
    for src in sources:
        by_speaker.setdefault(src.speaker_id, []).append(src)
    speakers = sorted(by_speaker)
    if len(speakers) < 2:
        raise DomainError("need sources from at least two speakers")
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for idx in range(n):
        rng = np.random.default_rng([seed, idx, 0xA11])
        tgt_spk, intf_spk = rng.choice(len(speakers), size=2, replace=False)
        tgt = by_speaker[speakers[tgt_spk]][int(rng.integers(len(by_speaker[speakers[tgt_spk]])))]
        intf = by_speaker[speakers[intf_spk]][int(rng.integers(len(by_speaker[speakers[intf_spk]])))]
        ex = mix(tgt, intf, spec, seed=idx, noise_source=noise_source)
        records.append(_write_example(ex, out_dir, f"ex{idx:05d}", enroll_paths))
    write_manifest(os.path.join(out_dir, "manifest.jsonl"), records)
    return records


def gen_sparse_set(profiles, n: int, overlap_targets, noisy: bool, seed: int,
                   out_dir, utt_seconds: float = 2.0, sample_rate: int = 16000,
                   enroll_paths=None) -> list[dict]:
    """Evaluation set with controlled overlap ratios.

    Per bucket, fully-voiced equal-duration utterances are placed on a
    timeline of length 2d/(1+ratio), which yields the requested overlap
    exactly up to sample rounding. Each speaker takes the target role in
    turn, doubling the cases per placement. Buckets that cannot reach
    their target within +/-2 points are skipped with a warning record.
    """
    if any(not 0.0 <= r <= 1.0 for r in overlap_targets):
        raise DomainError("overlap targets must lie in [0, 1]")
    if len(profiles) < 2:
        raise DomainError("need at least two speaker profiles")
    os.makedirs(out_dir, exist_ok=True)
    per_bucket = max(1, n // len(overlap_targets))
    placements = (per_bucket + 1) // 2
    spec = MixSpec(mode="max", noise_prob=1.0 if noisy else 0.0, rng_seed=seed)
    records = []
    idx = 0
    for b, rho in enumerate(overlap_targets):
        for p in range(placements):
            rng = np.random.default_rng([seed, b, p])
            pair = rng.choice(len(profiles), size=2, replace=False)
            prof_a, prof_b = profiles[pair[0]], profiles[pair[1]]
            d = int(round(utt_seconds * sample_rate))
            total = int(round(2 * d / (1.0 + rho)))
            utt_a = synth_source(prof_a, utt_seconds, seed=int(rng.integers(1 << 30)),
                                 sample_rate=sample_rate, voiced_only=True)
            utt_b = synth_source(prof_b, utt_seconds, seed=int(rng.integers(1 << 30)),
                                 sample_rate=sample_rate, voiced_only=True)
            for tgt, intf, tgt_first in ((utt_a, utt_b, True), (utt_b, utt_a, False)):
                ex = _mix_placed(tgt, intf, tgt_first, total, spec, seed=idx)
                achieved = ex.overlap_ratio
                if abs(achieved - rho) > 0.02:
                    records.append({"skipped": True, "bucket": rho,
                                    "reason": f"achieved overlap {achieved:.4f}"})
                    idx += 1
                    continue
                rec = _write_example(ex, out_dir, f"ex{idx:05d}", enroll_paths)
                rec["bucket"] = rho
                records.append(rec)
                idx += 1
    write_manifest(os.path.join(out_dir, "manifest.jsonl"), records)
    return records


def _mix_placed(target: SourceUtterance, interference: SourceUtterance,
                target_first: bool, total_len: int, spec: MixSpec, seed: int) -> MixtureExample:
    """Deterministic placement: first utterance at 0, second right-aligned."""
    sr = target.waveform.sample_rate
    rng = np.random.default_rng([spec.rng_seed, seed, 0xB])
    snr_db = float(rng.uniform(*spec.speaker_snr_db))
    shift_t = 0 if target_first else total_len - len(target.waveform)
    shift_i = total_len - len(interference.waveform) if target_first else 0
    s, t_intervals = _place(target, shift_t, total_len)
    v, i_intervals = _place(interference, shift_i, total_len)
    v = rescale_to_snr(s, v, snr_db)
    mixture = s + v
    noise_snr_db = None
    if rng.random() < spec.noise_prob:
        noise_snr_db = float(rng.uniform(*spec.noise_snr_db))
        noise = rescale_to_snr(mixture, colored_noise(total_len, rng), noise_snr_db)
        mixture = mixture + noise
    z = intervals_to_mask([(lo / sr, hi / sr) for lo, hi in t_intervals], total_len, sr)
    ratio = overlap_ratio(t_intervals, i_intervals, total_len)
    meta = {"mode": "max", "snr_db": snr_db, "noise_snr_db": noise_snr_db,
            "seed": seed, "target_speaker": target.speaker_id,
            "interference_speaker": interference.speaker_id}
    return MixtureExample(Waveform(mixture, sr), Waveform(s, sr), z, ratio, meta)
