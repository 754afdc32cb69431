"""Dual-task mask decoding and the combined cross-entropy + soft-Dice loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .taxonomy import Taxonomy

FEATURE_EPS = 1e-8
DICE_SMOOTH = 1.0


@dataclass
class DualMasks:
    """Per-voxel class distributions, shaped (batch, classes, D, H, W).

    Channel index equals class id in the head's label space.
    """
    det: torch.Tensor
    diag: torch.Tensor
    det_logp: Optional[torch.Tensor] = None
    diag_logp: Optional[torch.Tensor] = None

    def log_det(self) -> torch.Tensor:
        return self.det_logp if self.det_logp is not None else torch.log(self.det.clamp_min(1e-30))

    def log_diag(self) -> torch.Tensor:
        return self.diag_logp if self.diag_logp is not None else torch.log(self.diag.clamp_min(1e-30))


def mask_logits(queries: torch.Tensor, feature: torch.Tensor, eps: float = FEATURE_EPS) -> torch.Tensor:
    """Scalar products of queries (batch, Q, d) with unit-length voxel features (batch, d, D, H, W)."""
    if queries.shape[-1] != feature.shape[1]:
        raise ValueError(f"query dim {queries.shape[-1]} != feature channels {feature.shape[1]}")
    f = F.normalize(feature, p=2, dim=1, eps=eps)
    return torch.einsum("bqc,bcdhw->bqdhw", queries, f)


def merge_log_probs(diag_logp: torch.Tensor, taxonomy: Taxonomy) -> torch.Tensor:
    """Detection-space log-probabilities obtained by summing subtype probabilities."""
    lut = taxonomy.merge_lut
    chans = []
    for c in range(taxonomy.n_detection):
        idx = [i for i in range(len(lut)) if lut[i] == c]
        chans.append(torch.logsumexp(diag_logp[:, idx], dim=1))
    return torch.stack(chans, dim=1)


def decode_masks(A: Optional[torch.Tensor], B: torch.Tensor, S: torch.Tensor,
                 feature: torch.Tensor, taxonomy: Optional[Taxonomy] = None) -> DualMasks:
    """Decode both heads from final queries.

    ``S`` includes the background query in row 0, so channel order is
    ``[S, A]`` for detection and ``[S, B]`` for diagnosis. With ``A=None``
    (plain mode) the detection head is the merged diagnosis head and
    ``taxonomy`` is required.
    """
    diag_logp = torch.log_softmax(mask_logits(torch.cat([S, B], dim=1), feature), dim=1)
    if A is None:
        if taxonomy is None:
            raise ValueError("plain-mode decoding needs the taxonomy to merge subtypes")
        det_logp = merge_log_probs(diag_logp, taxonomy)
    else:
        det_logp = torch.log_softmax(mask_logits(torch.cat([S, A], dim=1), feature), dim=1)
    return DualMasks(det=det_logp.exp(), diag=diag_logp.exp(), det_logp=det_logp, diag_logp=diag_logp)


@dataclass
class LossTerms:
    total: torch.Tensor
    ce_det: torch.Tensor
    dice_det: torch.Tensor
    ce_diag: torch.Tensor
    dice_diag: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("total", "ce_det", "dice_det", "ce_diag", "dice_diag")}


def cross_entropy(logp: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return -logp.gather(1, target.unsqueeze(1)).mean()


def soft_dice_loss(probs: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """1 - mean soft Dice over foreground classes present in each sample's target.

    Samples without any foreground class contribute 0.
    """
    n_cls = probs.shape[1]
    onehot = F.one_hot(target, n_cls).movedim(-1, 1).to(probs.dtype)
    dims = tuple(range(2, probs.dim()))
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    dice = (2 * inter + smooth) / (denom + smooth)
    present = onehot.sum(dims) > 0
    present[:, 0] = False
    n_present = present.sum(1)
    per_sample = torch.where(
        n_present > 0,
        1 - (dice * present).sum(1) / n_present.clamp_min(1),
        torch.zeros_like(n_present, dtype=probs.dtype),
    )
    return per_sample.mean()


def dual_loss(masks: DualMasks, gt_diag: torch.Tensor, taxonomy: Taxonomy) -> LossTerms:
    """CE + soft Dice on both heads, weighted 1:1. ``gt_diag`` is (batch, D, H, W)."""
    gt_diag = gt_diag.long()
    if gt_diag.shape != masks.diag.shape[:1] + masks.diag.shape[2:]:
        raise ValueError(f"target shape {tuple(gt_diag.shape)} does not match masks {tuple(masks.diag.shape)}")
    lut = torch.tensor(taxonomy.merge_lut, device=gt_diag.device)
    gt_det = lut[gt_diag]
    ce_det = cross_entropy(masks.log_det(), gt_det)
    dice_det = soft_dice_loss(masks.det, gt_det)
    ce_diag = cross_entropy(masks.log_diag(), gt_diag)
    dice_diag = soft_dice_loss(masks.diag, gt_diag)
    total = ce_det + dice_det + ce_diag + dice_diag
    if not torch.isfinite(total):
        raise FloatingPointError(f"non-finite loss {float(total)}")
    return LossTerms(total, ce_det, dice_det, ce_diag, dice_diag)
