"""Training loop: Adam, plateau LR halving, fixed-length clip batches.

Two configurations mirror the experimental setup: ``baseline`` trains the
separation branch alone with the eps-extended SI-SNR loss (intended for
min-mode, fully overlapped data), ``joint`` trains separation + VAD with
the batch-weighted objective (max-mode, sparsely overlapped data).
Runs are deterministic under a fixed seed: shuffling, cropping and
batching all derive from (seed, epoch, index).
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .dsp import Waveform
from .errors import DomainError, TrainingError
from .losses import JointLossConfig, joint_loss, joint_loss_value, si_snr_eps, si_snr_eps_head
from .mixer import clip_example
from .model import EnrollmentEmbeddingProvider, LookupEmbeddingProvider, SeparatorModel


@dataclass
class TrainConfig:
    lr0: float = 0.001
    plateau_patience: int = 3
    lr_factor: float = 0.5
    max_epochs: int = 50
    batch_size: int = 4
    clip_seconds: float = 3.0
    lam: float = 5.0
    mode: str = "joint"  # "joint" or "baseline"
    seed: int = 0
    grad_clip_norm: float = 5.0
    embedding_provider: str = "lookup"  # "lookup" or "enrollment"

    def __post_init__(self):
        if self.lr0 <= 0 or self.plateau_patience < 1 or self.max_epochs < 1:
            raise DomainError("invalid training configuration")
        if self.mode not in ("joint", "baseline"):
            raise DomainError(f"mode must be 'joint' or 'baseline', got {self.mode!r}")

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls(**json.load(fh))


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


def _failed_epochs(history):
    """Per-epoch flags: did epoch i fail to improve on the best before it?"""
    flags = []
    best = np.inf
    for i, loss in enumerate(history):
        flags.append(i > 0 and loss >= best)
        best = min(best, loss)
    return flags


def replay_lr_schedule(history, lr0, patience=3, factor=0.5):
    """LR in effect for each epoch, replayed from the validation history.

    Halving triggers when `patience` consecutive epochs each fail to beat
    the best validation loss seen before them; the failure counter resets
    after a halve.
    """
    flags = _failed_epochs(history)
    lrs, lr, streak = [], lr0, 0
    for failed in flags:
        lrs.append(lr)
        streak = streak + 1 if failed else 0
        if streak >= patience:
            lr *= factor
            streak = 0
    return lrs, lr


def lr_schedule_step(history, current_lr, patience=3, factor=0.5):
    """New LR after the latest validation epoch in ``history``."""
    if not history:
        raise DomainError("validation history is empty")
    flags = _failed_epochs(history)
    streak = 0
    halve_now = False
    for i, failed in enumerate(flags):
        streak = streak + 1 if failed else 0
        if streak >= patience:
            halve_now = i == len(flags) - 1
            streak = 0
    return current_lr * factor if halve_now else current_lr


def _global_grad_clip(params, max_norm):
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad**2))
    norm = np.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def make_provider(cfg: TrainConfig, model: SeparatorModel, dataset):
    if cfg.embedding_provider == "lookup":
        ids = sorted({item["speaker_id"] for item in dataset})
        return LookupEmbeddingProvider(model.config.embed_dim, ids, seed=cfg.seed)
    return EnrollmentEmbeddingProvider(model.config.embed_dim, model.melbank,
                                       model.config.stride, seed=cfg.seed)


def resolve_embedding(provider, item, cache):
    """Embedding tensor for one dataset item, caching enrollment features."""
    if isinstance(provider, LookupEmbeddingProvider):
        return provider.get(item["speaker_id"])
    key = item["enroll_path"] or item["speaker_id"]
    if key not in cache:
        if item["enroll_path"] is None:
            raise DomainError("enrollment provider requires enroll_path in the manifest")
        from .dsp import read_wav
        cache[key] = provider.embed(read_wav(item["enroll_path"]))
    return cache[key]


def _batch_loss(model, cfg: TrainConfig, batch, embeddings, loss_cfg: JointLossConfig):
    """Build the graph loss for one batch; returns (Tensor, skipped flag)."""
    if cfg.mode == "baseline":
        heads = []
        for (x, s, z), emb in zip(batch, embeddings):
            if not np.any(z):
                raise TrainingError("baseline batch contains a target-silent clip; "
                                    "baseline training expects min-mode (fully "
                                    "overlapped) data")
            est = model.forward_separation(Waveform(x, model.config.sample_rate), emb)
            heads.append(si_snr_eps_head(est, s, loss_cfg.eps))
        total = heads[0]
        for h in heads[1:]:
            total = ad.add(total, h)
        return ad.scale(total, 1.0 / len(heads)), False
    est_b, ref_b, zhat_b, z_b = [], [], [], []
    for (x, s, z), emb in zip(batch, embeddings):
        est, zhat = model.forward_joint(Waveform(x, model.config.sample_rate), emb)
        est_b.append(est)
        ref_b.append(s)
        zhat_b.append(zhat)
        z_b.append(z)
    return joint_loss(est_b, ref_b, zhat_b, z_b, loss_cfg), False


def validate(model: SeparatorModel, dataset, cfg: TrainConfig, provider,
             emb_cache=None) -> float:
    """Mean loss over the validation set, deterministic order, no updates."""
    if not dataset:
        raise DomainError("empty validation manifest")
    emb_cache = {} if emb_cache is None else emb_cache
    loss_cfg = JointLossConfig(lam=cfg.lam)
    losses = []
    with ad.no_grad():
        for item in dataset:
            emb = resolve_embedding(provider, item, emb_cache)
            wav, s = item["mixture"], item["target"].samples
            z = item["z"].values
            if cfg.mode == "baseline":
                est = model.forward_separation(wav, emb)
                losses.append(si_snr_eps(est.data, s, loss_cfg.eps))
            else:
                est, zhat = model.forward_joint(wav, emb)
                losses.append(joint_loss_value([est.data], [s], [zhat.data], [z], loss_cfg))
    return float(np.mean(losses))


def calibrate_output_scale(model: SeparatorModel, dataset, cfg: TrainConfig,
                           provider, emb_cache=None, max_items: int = 64) -> float:
    """Rescale the decoder so estimates carry the reference scale and sign.

    The separation objective is invariant to any scalar applied to the
    estimate, so training leaves the output gain — including its sign —
    arbitrary. This computes, per training item, the least-squares scalar
    mapping the estimate onto its reference, and multiplies the decoder
    weights by the median of those scalars. Deterministic (items taken in
    manifest order) and neutral for every scale-invariant quantity.
    Returns the factor applied.
    """
    emb_cache = {} if emb_cache is None else emb_cache
    factors = []
    for item in dataset[:max_items]:
        emb = resolve_embedding(provider, item, emb_cache)
        with ad.no_grad():
            if cfg.mode == "joint":
                out, _ = model.forward_joint(item["mixture"], emb)
            else:
                out = model.forward_separation(item["mixture"], emb)
        est = out.data.ravel()
        ref = item["target"].samples
        denom = float(est @ est)
        if denom > 0.0 and np.any(ref):
            factors.append(float(ref @ est) / denom)
    if not factors:
        return 1.0
    factor = float(np.median(factors))
    if factor != 0.0:
        model.params["sep.decoder.w"].data *= factor
    return factor


def fit(model: SeparatorModel, train_set, val_set, cfg: TrainConfig, out_dir,
        provider=None, log=None):
    """Train, tracking the best-validation checkpoint and per-epoch stats.

    ``train_set`` / ``val_set`` are materialized datasets (mixer.load_dataset).
    Writes ``model.ckpt``, ``config.json``, ``train_config.json`` and
    ``stats.csv`` into ``out_dir``; returns the list of EpochStats. After
    the best-validation parameters are restored, the decoder is rescaled
    once (``calibrate_output_scale``) so the saved model emits estimates
    at the reference scale and sign.
    """
    if not train_set or not val_set:
        raise DomainError("empty training or validation manifest")
    os.makedirs(out_dir, exist_ok=True)
    provider = provider or make_provider(cfg, model, train_set)
    params = dict(model.params)
    if isinstance(provider, LookupEmbeddingProvider):
        params.update(provider.params())
    adam = ad.AdamState(lr=cfg.lr0)
    loss_cfg = JointLossConfig(lam=cfg.lam)
    clip_samples = int(round(cfg.clip_seconds * model.config.sample_rate))
    emb_cache = {}
    stats: list[EpochStats] = []
    val_history: list[float] = []
    best_val = np.inf
    best_snapshot = None
    zero_weight_batches = 0

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch, 0x0D]).permutation(len(train_set))
        epoch_losses = []
        for b0 in range(0, len(order), cfg.batch_size):
            idxs = order[b0:b0 + cfg.batch_size]
            batch, embeddings = [], []
            for j, idx in enumerate(idxs):
                item = train_set[idx]
                rng = np.random.default_rng([cfg.seed, epoch, int(idx), 0xC])
                batch.append(clip_example(item["mixture"].samples, item["target"].samples,
                                          item["z"].values, clip_samples, rng))
                embeddings.append(resolve_embedding(provider, item, emb_cache))
            if cfg.mode == "joint" and not any(np.any(z) for _, _, z in batch):
                zero_weight_batches += 1  # Eq-8 term drops out; BCE still trains
                if cfg.lam == 0:
                    continue
            ad.zero_grads(params)
            loss, _ = _batch_loss(model, cfg, batch, embeddings, loss_cfg)
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            ad.backward(loss)
            _global_grad_clip(params, cfg.grad_clip_norm)
            ad.adam_step(params, adam)
            epoch_losses.append(float(loss.data))
        val_loss = validate(model, val_set, cfg, provider, emb_cache)
        val_history.append(val_loss)
        lr_in_effect = adam.lr
        adam.lr = lr_schedule_step(val_history, adam.lr, cfg.plateau_patience, cfg.lr_factor)
        elapsed = time.perf_counter() - t0
        stats.append(EpochStats(epoch, float(np.mean(epoch_losses)) if epoch_losses else np.nan,
                                val_loss, lr_in_effect, elapsed))
        if log:
            log(f"epoch {epoch:3d}  train {stats[-1].train_loss:10.4f}  "
                f"val {val_loss:10.4f}  lr {adam.lr:.6f}  {elapsed:.1f}s")
        if val_loss < best_val:
            best_val = val_loss
            best_snapshot = {name: p.data.copy() for name, p in params.items()}

    if best_snapshot is not None:
        for name, data in best_snapshot.items():
            params[name].data = data
    calibrate_output_scale(model, train_set, cfg, provider, emb_cache)
    # one checkpoint holds model params plus any trainable embedding table
    ad.save_arrays(os.path.join(out_dir, "model.ckpt"), params)
    model.config.save(os.path.join(out_dir, "config.json"))
    cfg.save(os.path.join(out_dir, "train_config.json"))
    write_stats_csv(stats, os.path.join(out_dir, "stats.csv"))
    return stats


def write_stats_csv(stats, path):
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_loss,lr,seconds\n")
        for row in stats:
            fh.write(f"{row.epoch},{row.train_loss:.6f},{row.val_loss:.6f},"
                     f"{row.lr:.8f},{row.seconds:.3f}\n")
