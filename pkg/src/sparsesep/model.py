"""Joint separation / personal-VAD architecture and inference pipelines.

Three parts: a time-domain encoder/decoder pair, a shared TCN backbone
with speaker-embedding injection in its first layer, and two heads — a
multiplicative separation mask and a per-sample VAD probability. The VAD
branch attaches after a configurable TCN stack, which also enables the
early-exit inference mode where later stacks are skipped for frames the
VAD judges non-target.

TCN layer definition (ours): 1x1 conv -> PReLU -> gLN -> depthwise
dilated conv (dilation 2^b, symmetric zero padding) -> PReLU -> gLN ->
1x1 conv, with a residual add. In the first layer of the first stack the
speaker embedding is tiled over time and concatenated on the feature
axis; the residual there adds the pre-concatenation input.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, load_arrays, no_grad, save_arrays
from .dsp import MelBank, VadMask, Waveform, binarize, logfbank, mean_filter
from .errors import DomainError, StateError


@dataclass(frozen=True)
class ModelConfig:
    kernel: int = 40          # encoder kernel L (stride is L/2)
    n_filters: int = 256      # encoder filters N
    n_stacks: int = 4
    layers_per_stack: int = 8
    tcn_kernel: int = 3
    bottleneck: int = 64
    hidden: int = 128
    embed_dim: int = 16
    n_mels: int = 80
    fft_size: int = 512
    sample_rate: int = 16000
    vad_tap: int = 4          # VAD branch attaches after this stack
    vad_branch: bool = True   # False for the plain separation baseline

    def __post_init__(self):
        if self.kernel % 2 != 0:
            raise DomainError("encoder kernel must be even (stride L/2)")
        if not 1 <= self.vad_tap <= self.n_stacks:
            raise DomainError(f"vad_tap must lie in [1, {self.n_stacks}]")
        if min(self.n_filters, self.bottleneck, self.hidden, self.embed_dim,
               self.layers_per_stack, self.n_stacks) < 1:
            raise DomainError("all widths/counts must be >= 1")

    @property
    def stride(self) -> int:
        return self.kernel // 2

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ModelConfig":
        with open(path) as fh:
            return cls(**json.load(fh))


def receptive_half_width(cfg: ModelConfig, first_stack: int, last_stack: int) -> int:
    """Half receptive field (frames) of TCN stacks [first_stack, last_stack]."""
    per_stack = sum((2**b) * (cfg.tcn_kernel - 1) // 2
                    for b in range(cfg.layers_per_stack))
    return per_stack * max(0, last_stack - first_stack + 1)


class SeparatorModel:
    """Parameter container plus forward passes. Single-writer on params."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.melbank = MelBank(config.n_mels, config.fft_size, config.sample_rate)
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    # -- parameters --------------------------------------------------------

    def _param(self, name, array):
        self.params[name] = Tensor(array, requires_grad=True)

    def _conv_init(self, rng, c_out, c_in, kernel):
        std = np.sqrt(2.0 / (c_in * kernel))
        return rng.normal(0.0, std, size=(c_out, c_in, kernel))

    def _init_params(self, rng):
        cfg = self.config
        self._param("encoder.w", self._conv_init(rng, cfg.n_filters, 1, cfg.kernel))
        feat_dim = cfg.n_filters + cfg.n_mels
        self._param("front.norm.gain", np.ones(feat_dim))
        self._param("front.norm.bias", np.zeros(feat_dim))
        self._param("front.proj.w", self._conv_init(rng, cfg.bottleneck, feat_dim, 1))
        self._param("front.proj.b", np.zeros(cfg.bottleneck))
        for s in range(cfg.n_stacks):
            for layer in range(cfg.layers_per_stack):
                pre = f"stack{s}.layer{layer}"
                c_in = cfg.bottleneck + (cfg.embed_dim if s == 0 and layer == 0 else 0)
                self._param(f"{pre}.conv_in.w", self._conv_init(rng, cfg.hidden, c_in, 1))
                self._param(f"{pre}.conv_in.b", np.zeros(cfg.hidden))
                self._param(f"{pre}.prelu1.alpha", np.full((), 0.25))
                self._param(f"{pre}.norm1.gain", np.ones(cfg.hidden))
                self._param(f"{pre}.norm1.bias", np.zeros(cfg.hidden))
                self._param(f"{pre}.dconv.w", self._conv_init(rng, cfg.hidden, 1, cfg.tcn_kernel))
                self._param(f"{pre}.dconv.b", np.zeros(cfg.hidden))
                self._param(f"{pre}.prelu2.alpha", np.full((), 0.25))
                self._param(f"{pre}.norm2.gain", np.ones(cfg.hidden))
                self._param(f"{pre}.norm2.bias", np.zeros(cfg.hidden))
                self._param(f"{pre}.conv_out.w", self._conv_init(rng, cfg.bottleneck, cfg.hidden, 1))
                self._param(f"{pre}.conv_out.b", np.zeros(cfg.bottleneck))
        self._param("sep.mask.w", self._conv_init(rng, cfg.n_filters, cfg.bottleneck, 1))
        self._param("sep.mask.b", np.zeros(cfg.n_filters))
        # Start the decoder small: the scale-invariant training objective
        # exerts no restoring force on output gain, and a large initial
        # gain tends to inflate further during training.
        self._param("sep.decoder.w", self._conv_init(rng, cfg.n_filters, 1, cfg.kernel) / 64.0)
        if cfg.vad_branch:
            self._param("vad.proj.w", self._conv_init(rng, cfg.n_filters, cfg.bottleneck, 1))
            self._param("vad.proj.b", np.zeros(cfg.n_filters))
            self._param("vad.decoder.w", self._conv_init(rng, cfg.n_filters, 1, cfg.kernel))

    # -- forward passes ----------------------------------------------------

    def encode(self, wav: Waveform) -> Tensor:
        """Bias-free encoder conv + ReLU; output [N, T']."""
        cfg = self.config
        if len(wav) < cfg.kernel:
            raise DomainError(f"input of {len(wav)} samples shorter than kernel {cfg.kernel}")
        x = Tensor(wav.samples[None, :])
        return ad.relu(ad.conv1d(x, self.params["encoder.w"], stride=cfg.stride))

    def features(self, wav: Waveform) -> np.ndarray:
        """Log-mel features aligned with encoder frames; [n_mels, T']."""
        return logfbank(wav, self.melbank, self.config.stride).T

    def _tcn_layer(self, stack, layer, inp, embedding=None):
        cfg = self.config
        pre = f"stack{stack}.layer{layer}"
        p = self.params
        residual = inp
        if embedding is not None:
            inp = ad.concat([inp, ad.tile_time(embedding, inp.shape[1])], axis=0)
        h = ad.conv1d(inp, p[f"{pre}.conv_in.w"], p[f"{pre}.conv_in.b"])
        h = ad.prelu(h, p[f"{pre}.prelu1.alpha"])
        h = ad.global_layer_norm(h, p[f"{pre}.norm1.gain"], p[f"{pre}.norm1.bias"])
        dilation = 2**layer
        pad = dilation * (cfg.tcn_kernel - 1) // 2
        h = ad.conv1d(h, p[f"{pre}.dconv.w"], p[f"{pre}.dconv.b"],
                      dilation=dilation, groups=cfg.hidden, pad=pad)
        h = ad.prelu(h, p[f"{pre}.prelu2.alpha"])
        h = ad.global_layer_norm(h, p[f"{pre}.norm2.gain"], p[f"{pre}.norm2.bias"])
        h = ad.conv1d(h, p[f"{pre}.conv_out.w"], p[f"{pre}.conv_out.b"])
        return ad.add(residual, h)

    def run_stacks(self, hidden: Tensor, first_stack: int, last_stack: int,
                   embedding=None) -> Tensor:
        """Run TCN stacks with 1-based indices [first_stack, last_stack]."""
        for s in range(first_stack - 1, last_stack):
            for layer in range(self.config.layers_per_stack):
                emb = embedding if (s == 0 and layer == 0) else None
                hidden = self._tcn_layer(s, layer, hidden, emb)
        return hidden

    def backbone(self, x_enc: Tensor, feats: np.ndarray, embedding: Tensor,
                 k_stop=None) -> Tensor:
        """Concat features, normalize, project, run stacks 1..k_stop."""
        cfg = self.config
        if x_enc.shape[1] != feats.shape[1]:
            raise DomainError(f"frame count mismatch: encoder {x_enc.shape[1]} "
                              f"vs features {feats.shape[1]}")
        if embedding.shape != (cfg.embed_dim,):
            raise DomainError(f"embedding must have dim {cfg.embed_dim}")
        k_stop = cfg.n_stacks if k_stop is None else k_stop
        h = ad.concat([x_enc, Tensor(feats)], axis=0)
        h = ad.global_layer_norm(h, self.params["front.norm.gain"],
                                 self.params["front.norm.bias"])
        h = ad.conv1d(h, self.params["front.proj.w"], self.params["front.proj.b"])
        return self.run_stacks(h, 1, k_stop, embedding=embedding)

    def _decode_to_length(self, y: Tensor, weight_name: str, t: int) -> Tensor:
        """Transposed-conv decode and reconcile to t samples.

        Output length is (T'-1)*L/2 + L <= t; the deficit (at most L/2 - 1
        samples) is zero padded at the end. A longer output would be
        trimmed symmetrically.
        """
        dec = ad.conv_transpose1d(y, self.params[weight_name], stride=self.config.stride)
        t_dec = dec.shape[1]
        if t_dec > t:
            lo = (t_dec - t) // 2
            dec = ad.slice_time(dec, lo, lo + t)
        elif t_dec < t:
            dec = ad.concat([dec, Tensor(np.zeros((1, t - t_dec)))], axis=1)
        return ad.reshape(dec, (t,))

    def separation_branch(self, hidden: Tensor, x_enc: Tensor, t: int) -> Tensor:
        """Mask, multiply, decode: s_hat with |s_hat| = t."""
        mask = ad.relu(ad.conv1d(hidden, self.params["sep.mask.w"], self.params["sep.mask.b"]))
        y = ad.mul(x_enc, mask)
        return self._decode_to_length(y, "sep.decoder.w", t)

    def vad_branch(self, hidden_at_k: Tensor, t: int) -> Tensor:
        """Per-sample target-presence probabilities, strictly in (0, 1)."""
        if not self.config.vad_branch:
            raise StateError("model was built without a VAD branch")
        h = ad.relu(ad.conv1d(hidden_at_k, self.params["vad.proj.w"], self.params["vad.proj.b"]))
        logits = self._decode_to_length(h, "vad.decoder.w", t)
        return ad.sigmoid(logits)

    def forward_joint(self, wav: Waveform, embedding: Tensor):
        """Full training pass: returns (s_hat [T], z_hat [T]) tensors."""
        cfg = self.config
        t = len(wav)
        x_enc = self.encode(wav)
        feats = self.features(wav)
        hidden_k = self.backbone(x_enc, feats, embedding, k_stop=cfg.vad_tap)
        zhat = self.vad_branch(hidden_k, t) if cfg.vad_branch else None
        hidden = self.run_stacks(hidden_k, cfg.vad_tap + 1, cfg.n_stacks)
        est = self.separation_branch(hidden, x_enc, t)
        return est, zhat

    def forward_separation(self, wav: Waveform, embedding: Tensor) -> Tensor:
        """Baseline pass without the VAD head."""
        x_enc = self.encode(wav)
        hidden = self.backbone(x_enc, self.features(wav), embedding)
        return self.separation_branch(hidden, x_enc, len(wav))

    # -- inference ---------------------------------------------------------

    def infer(self, wav: Waveform, embedding: Tensor, gamma: float = 0.4,
              early_exit: bool = False, smooth_ms: float = 100.0,
              force_gate: VadMask | None = None, k: int | None = None) -> Waveform:
        """Separate with VAD post-masking (standard) or early exit.

        Standard mode: z_hat -> mean filter -> binarize(gamma) -> mask the
        decoded estimate. Early-exit mode additionally skips TCN stacks
        after the VAD tap for frames whose whole sample span is inactive;
        active segments are extended by the remaining stacks' receptive
        field so dilated convolutions see real context. ``force_gate``
        overrides the smoothed/binarized VAD decision (benchmarking and
        verification hook).
        """
        cfg = self.config
        if not cfg.vad_branch:
            raise StateError("inference masking requires the VAD branch")
        tap = cfg.vad_tap if k is None else k
        if not 1 <= tap <= cfg.n_stacks:
            raise DomainError(f"k must lie in [1, {cfg.n_stacks}]")
        t = len(wav)
        with no_grad():
            x_enc = self.encode(wav)
            feats = self.features(wav)
            hidden_k = self.backbone(x_enc, feats, embedding, k_stop=tap)
            if force_gate is not None:
                if not isinstance(force_gate, VadMask):
                    force_gate = VadMask(np.clip(np.asarray(force_gate, dtype=np.float64),
                                                 0.0, 1.0))
                if len(force_gate) != t:
                    raise DomainError("forced gate length must match the input")
                zbin = force_gate if force_gate.is_binary else binarize(force_gate, 0.5)
            else:
                zhat = self.vad_branch(hidden_k, t)
                smoothed = mean_filter(VadMask(zhat.data), smooth_ms, wav.sample_rate)
                zbin = binarize(smoothed, gamma)
            if not early_exit:
                hidden = self.run_stacks(hidden_k, tap + 1, cfg.n_stacks)
                est = self.separation_branch(hidden, x_enc, t)
                return Waveform(est.data * zbin.values, wav.sample_rate)
            return self._infer_early_exit(wav, x_enc, hidden_k, zbin, tap)

    def _infer_early_exit(self, wav, x_enc, hidden_k, zbin: VadMask, tap: int) -> Waveform:
        cfg = self.config
        t = len(wav)
        n_frames = x_enc.shape[1]
        # frame is active iff any sample of its span is gated on
        active = np.zeros(n_frames, dtype=bool)
        gate = zbin.values.astype(bool)
        for f in range(n_frames):
            lo = f * cfg.stride
            active[f] = gate[lo:min(lo + cfg.kernel, t)].any()
        if not active.any():
            return Waveform(np.zeros(t), wav.sample_rate)

        pad = receptive_half_width(cfg, tap + 1, cfg.n_stacks)
        y_data = np.zeros((cfg.n_filters, n_frames))
        for seg_lo, seg_hi in _segments(active):
            ext_lo, ext_hi = max(0, seg_lo - pad), min(n_frames, seg_hi + pad)
            hidden_seg = Tensor(hidden_k.data[:, ext_lo:ext_hi])
            hidden_seg = self.run_stacks(hidden_seg, tap + 1, cfg.n_stacks)
            mask_seg = ad.relu(ad.conv1d(hidden_seg, self.params["sep.mask.w"],
                                         self.params["sep.mask.b"]))
            sel = active[ext_lo:ext_hi].copy()
            sel[:seg_lo - ext_lo] = False
            sel[seg_hi - ext_lo:] = False
            frames = np.flatnonzero(sel) + ext_lo
            y_data[:, frames] = x_enc.data[:, frames] * mask_seg.data[:, frames - ext_lo]
        est = self._decode_to_length(Tensor(y_data), "sep.decoder.w", t)
        return Waveform(est.data * zbin.values, wav.sample_rate)

    # -- persistence -------------------------------------------------------

    def save(self, ckpt_path, config_path=None):
        save_arrays(ckpt_path, self.params)
        if config_path is not None:
            self.config.save(config_path)

    def load_params(self, ckpt_path):
        arrays = load_arrays(ckpt_path)
        missing = set(self.params) - set(arrays)
        if missing:
            raise StateError(f"checkpoint missing parameters: {sorted(missing)[:5]} ...")
        for name in self.params:
            if arrays[name].shape != self.params[name].data.shape:
                raise StateError(f"shape mismatch for {name!r}")
            self.params[name].data = arrays[name].astype(np.float64)

    @classmethod
    def from_checkpoint(cls, ckpt_path, config_path) -> "SeparatorModel":
        model = cls(ModelConfig.load(config_path))
        model.load_params(ckpt_path)
        return model


def _segments(active: np.ndarray):
    """Contiguous True runs of a boolean vector as (lo, hi) pairs."""
    edges = np.flatnonzero(np.diff(np.concatenate(([False], active, [False])).astype(np.int8)))
    return list(zip(edges[0::2], edges[1::2]))


# -- speaker embedding providers -------------------------------------------


class LookupEmbeddingProvider:
    """Trainable per-speaker embedding table (desk-scale training)."""

    def __init__(self, embed_dim: int, speaker_ids, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.embed_dim = embed_dim
        self.table = {sid: Tensor(rng.normal(0.0, 0.1, size=embed_dim), requires_grad=True)
                      for sid in sorted(speaker_ids)}

    def get(self, speaker_id) -> Tensor:
        if speaker_id not in self.table:
            raise StateError(f"unknown speaker id {speaker_id!r}")
        return self.table[speaker_id]

    def params(self) -> dict:
        return {f"embed.{sid}": t for sid, t in self.table.items()}

    def load(self, arrays: dict):
        for sid, t in self.table.items():
            key = f"embed.{sid}"
            if key in arrays:
                t.data = arrays[key].astype(np.float64)


class EnrollmentEmbeddingProvider:
    """Embedding = time-averaged log-mels of enrollment audio through a
    fixed seeded random projection. Stands in for a pre-trained speaker
    verifier; not trainable."""

    def __init__(self, embed_dim: int, melbank: MelBank, frame_step: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.projection = rng.normal(0.0, 1.0 / np.sqrt(melbank.n_filters),
                                     size=(embed_dim, melbank.n_filters))
        self.melbank = melbank
        self.frame_step = frame_step

    def embed(self, enroll: Waveform) -> Tensor:
        feats = logfbank(enroll, self.melbank, self.frame_step)
        return Tensor(self.projection @ feats.mean(axis=0))
