"""Separation and VAD losses.

Each loss exists in two forms: a pure-value function on numpy arrays (used
for evaluation and as test oracles) and a graph head on autodiff tensors
(used for training). The projection form and the geometric form of the
scale-invariant loss are implemented independently and serve as mutual
oracles.

Sentinel convention: evaluation paths return +/-inf for the degenerate
perfect/orthogonal cases; training paths only ever use the eps-extended
form, which is finite by construction. ``saturate_db`` caps values at
+/-300 dB where a finite number is required.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .dsp import VadMask, Waveform
from .errors import DegenerateBatchError, DomainError, UndefinedTargetError

SENTINEL_DB = 300.0
_NEG10_OVER_LN10 = -10.0 / math.log(10.0)


def saturate_db(value: float) -> float:
    return float(np.clip(value, -SENTINEL_DB, SENTINEL_DB))


def _samples(x) -> np.ndarray:
    if isinstance(x, Waveform):
        return x.samples
    if isinstance(x, VadMask):
        return x.values
    return np.asarray(x, dtype=np.float64)


def _check_pair(est, ref):
    est, ref = _samples(est), _samples(ref)
    if est.shape != ref.shape:
        raise DomainError(f"length mismatch: {est.shape} vs {ref.shape}")
    if est.size == 0:
        raise DomainError("empty signals")
    return est, ref


def si_snr_loss(est, ref) -> float:
    """Negative SI-SNR in dB via the projection/residual energy ratio.

    Both signals are mean normalized internally. Raises
    UndefinedTargetError for an all-zero reference.
    """
    est, ref = _check_pair(est, ref)
    est = est - est.mean()
    ref = ref - ref.mean()
    ref_energy = float(ref @ ref)
    if ref_energy == 0.0:
        raise UndefinedTargetError("SI-SNR undefined for an all-zero reference")
    proj = (float(est @ ref) / ref_energy) * ref
    proj_energy = float(proj @ proj)
    residual = est - proj
    res_energy = float(residual @ residual)
    if res_energy == 0.0:
        return -math.inf
    if proj_energy == 0.0:
        return math.inf
    return -10.0 * math.log10(proj_energy / res_energy)


def si_snr_geometric(est, ref) -> float:
    """Same quantity via the right-triangle form: 20 log10 of the leg ratio.

    The scaling that makes the residual orthogonal to the reference is
    solved explicitly, then the loss is the log tangent of the opening
    angle. Independent arithmetic path from si_snr_loss.
    """
    est, ref = _check_pair(est, ref)
    est = est - est.mean()
    ref = ref - ref.mean()
    ref_norm_sq = float(ref @ ref)
    if ref_norm_sq == 0.0:
        raise UndefinedTargetError("SI-SNR undefined for an all-zero reference")
    alpha = float(est @ ref) / ref_norm_sq
    base = np.linalg.norm(alpha * ref)
    height = np.linalg.norm(est - alpha * ref)
    if height == 0.0:
        return -math.inf
    if base == 0.0:
        return math.inf
    return 20.0 * math.log10(height / base)


def si_snr_eps(est, ref, eps: float = 1e-8) -> float:
    """Eps-extended SI-SNR loss, finite for every input including ref = 0.

    For an all-zero reference the value is exactly -10 log10(eps).
    """
    est, ref = _check_pair(est, ref)
    est = est - est.mean()
    ref = ref - ref.mean()
    ref_energy = float(ref @ ref)
    proj = (float(est @ ref) / (ref_energy + eps)) * ref
    proj_energy = float(proj @ proj)
    residual = est - proj
    res_energy = float(residual @ residual)
    return -10.0 * math.log10(proj_energy / (res_energy + eps) + eps)


@dataclass(frozen=True)
class WeightedLossTerm:
    """One batch item's masked loss value and its duration weight."""

    value: float
    weight: float

    def __post_init__(self):
        if not 0.0 <= self.weight <= 1.0:
            raise DomainError(f"weight must lie in [0, 1], got {self.weight}")


def weighted_si_snr(est, ref, z: VadMask, eps: float = 1e-8) -> WeightedLossTerm:
    """Masked eps-SI-SNR with weight = active fraction of z.

    The weight follows the duration reading: (count of ones) / T on a
    binary mask. Weight 0 short-circuits to a 0-valued term.
    """
    est, ref = _check_pair(est, ref)
    zv = z.values
    if zv.shape != est.shape:
        raise DomainError("mask length must match the signals")
    if not z.is_binary:
        raise DomainError("weighted SI-SNR requires a binary mask")
    active = int(np.count_nonzero(zv))
    if active == 0:
        return WeightedLossTerm(0.0, 0.0)
    w = active / len(zv)
    return WeightedLossTerm(si_snr_eps(est * zv, ref * zv, eps), w)


def batch_weighted_si_snr(terms) -> float:
    """Weight-normalized batch aggregate: sum(v_b * w_b) / sum(w_b)."""
    terms = list(terms)
    if not terms:
        raise DomainError("empty batch")
    total_w = sum(t.weight for t in terms)
    if total_w == 0.0:
        raise DegenerateBatchError("all batch weights are zero")
    return sum(t.value * t.weight for t in terms) / total_w


def bce_loss(pred: VadMask, target: VadMask, clamp: float = 1e-7) -> float:
    """Mean binary cross entropy; predictions clamped away from {0, 1}."""
    p, z = _check_pair(pred, target)
    if not 0.0 < clamp < 0.5:
        raise DomainError("clamp must lie in (0, 0.5)")
    p = np.clip(p, clamp, 1.0 - clamp)
    return float(-np.mean(z * np.log(p) + (1.0 - z) * np.log(1.0 - p)))


@dataclass(frozen=True)
class JointLossConfig:
    lam: float = 5.0
    eps: float = 1e-8
    bce_clamp: float = 1e-7

    def __post_init__(self):
        if self.lam < 0 or self.eps <= 0 or not 0.0 < self.bce_clamp < 0.5:
            raise DomainError("invalid joint loss configuration")


# ---------------------------------------------------------------------------
# differentiable graph heads (labels enter as constants)


def si_snr_eps_head(est: ad.Tensor, ref: np.ndarray, eps: float = 1e-8) -> ad.Tensor:
    """Eps-extended SI-SNR loss as an autodiff graph over the estimate."""
    ref = np.asarray(ref, dtype=np.float64)
    ref = ref - ref.mean()
    ref_energy = float(ref @ ref)
    ref_t = ad.Tensor(ref)
    est0 = ad.sub(est, ad.tmean(est))
    alpha = ad.scale(ad.dot(est0, ref_t), 1.0 / (ref_energy + eps))
    proj = ad.mul(alpha, ref_t)
    residual = ad.sub(est0, proj)
    ratio = ad.add(ad.div(ad.dot(proj, proj), ad.add(ad.dot(residual, residual), eps)), eps)
    return ad.scale(ad.log(ratio), _NEG10_OVER_LN10)


def bce_head(pred: ad.Tensor, target: np.ndarray, clamp: float = 1e-7) -> ad.Tensor:
    z = np.asarray(target, dtype=np.float64)
    p = ad.clip(pred, clamp, 1.0 - clamp)
    pos = ad.mul(ad.log(p), ad.Tensor(z))
    neg = ad.mul(ad.log(ad.sub(1.0, p)), ad.Tensor(1.0 - z))
    return ad.scale(ad.tmean(ad.add(pos, neg)), -1.0)


def weighted_si_snr_head(est: ad.Tensor, ref: np.ndarray, z: np.ndarray, eps: float = 1e-8):
    """Masked loss head plus its scalar weight. Returns (Tensor|None, w)."""
    z = np.asarray(z, dtype=np.float64)
    active = int(np.count_nonzero(z))
    if active == 0:
        return None, 0.0
    w = active / z.size
    masked_est = ad.mul(est, ad.Tensor(z))
    return si_snr_eps_head(masked_est, np.asarray(ref) * z, eps), w


def joint_loss(est_batch, ref_batch, zhat_batch, z_batch, cfg: JointLossConfig) -> ad.Tensor:
    """Overall training objective: batch-weighted separation loss + lam * BCE.

    Estimates and VAD predictions are autodiff tensors; references and
    labels are constant arrays. When every item has weight 0 the
    separation term is dropped and only the BCE path trains.
    """
    if not len(est_batch) == len(ref_batch) == len(zhat_batch) == len(z_batch):
        raise DomainError("batch size mismatch across joint loss inputs")
    sep_terms, weights = [], []
    for est, ref, z in zip(est_batch, ref_batch, z_batch):
        head, w = weighted_si_snr_head(est, ref, z, cfg.eps)
        if w > 0.0:
            sep_terms.append(ad.scale(head, w))
            weights.append(w)
    bce_terms = [bce_head(zhat, z, cfg.bce_clamp) for zhat, z in zip(zhat_batch, z_batch)]
    bce_mean = ad.scale(_tensor_sum(bce_terms), 1.0 / len(bce_terms))
    total = ad.scale(bce_mean, cfg.lam)
    if sep_terms:
        sep = ad.scale(_tensor_sum(sep_terms), 1.0 / sum(weights))
        total = ad.add(sep, total)
    return total


def _tensor_sum(tensors):
    acc = tensors[0]
    for t in tensors[1:]:
        acc = ad.add(acc, t)
    return acc


def joint_loss_value(est_batch, ref_batch, zhat_batch, z_batch, cfg: JointLossConfig) -> float:
    """Pure-value counterpart of joint_loss (evaluation/validation paths)."""
    terms = [weighted_si_snr(e, r, VadMask(np.asarray(z)), cfg.eps)
             for e, r, z in zip(est_batch, ref_batch, z_batch)]
    bce = float(np.mean([bce_loss(VadMask(np.clip(_samples(zh), 0.0, 1.0)),
                                  VadMask(np.asarray(z)), cfg.bce_clamp)
                         for zh, z in zip(zhat_batch, z_batch)]))
    total_w = sum(t.weight for t in terms)
    sep = 0.0 if total_w == 0.0 else sum(t.value * t.weight for t in terms) / total_w
    return sep + cfg.lam * bce
