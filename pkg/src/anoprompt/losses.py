"""Training objective: dice+focal pixel terms, two-branch image CE, alignment.

The total is the plain sum of the three groups; :class:`LossBreakdown`
stores the addends and the exact sum so logs and invariants agree.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import InputError

_EPS = 1e-7


def _check_same_shape(pred: torch.Tensor, mask: torch.Tensor) -> None:
    if pred.shape != mask.shape:
        raise InputError(f"prediction shape {tuple(pred.shape)} != mask shape {tuple(mask.shape)}")


def dice_loss(pred: torch.Tensor, mask: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """1 - (2*sum(pred*mask) + s) / (sum(pred) + sum(mask) + s), batch-meaned.

    ``pred`` is a probability map in [0, 1], ``mask`` the binary target.
    """
    _check_same_shape(pred, mask)
    flat_p = pred.reshape(pred.shape[0], -1) if pred.ndim == 3 else pred.reshape(1, -1)
    flat_m = mask.reshape(flat_p.shape).to(flat_p.dtype)
    inter = (flat_p * flat_m).sum(dim=1)
    denom = flat_p.sum(dim=1) + flat_m.sum(dim=1)
    return (1.0 - (2.0 * inter + smooth) / (denom + smooth)).mean()


def focal_loss(
    pred: torch.Tensor, mask: torch.Tensor, gamma: float = 2.0, alpha: float = 0.25
) -> torch.Tensor:
    """Mean over pixels of -alpha_t (1 - p_t)^gamma log p_t.

    alpha_t is ``alpha`` on positive pixels and 1 on negative ones, so
    gamma=0, alpha=1 is exactly mean binary cross-entropy.
    """
    _check_same_shape(pred, mask)
    p = pred.clamp(_EPS, 1.0 - _EPS)
    m = mask.to(p.dtype)
    p_t = torch.where(m > 0.5, p, 1.0 - p)
    alpha_t = torch.where(m > 0.5, torch.full_like(p, alpha), torch.ones_like(p))
    return (-alpha_t * (1.0 - p_t) ** gamma * torch.log(p_t)).mean()


def pixel_loss(pred: torch.Tensor, mask: torch.Tensor, smooth: float = 1.0,
               gamma: float = 2.0, alpha: float = 0.25) -> torch.Tensor:
    return dice_loss(pred, mask, smooth) + focal_loss(pred, mask, gamma, alpha)


def _state_logits(z: torch.Tensor, w_pos: torch.Tensor, w_neg: torch.Tensor, tau: float):
    if z.ndim == 1:
        z = z.unsqueeze(0)
    return torch.stack([z @ w_pos, z @ w_neg], dim=-1) / tau


def image_probability(
    z: torch.Tensor, w_pos: torch.Tensor, w_neg: torch.Tensor, tau: float
) -> torch.Tensor:
    """Two-way softmax probability that the image is abnormal."""
    logits = _state_logits(z, w_pos, w_neg, tau)
    return torch.softmax(logits, dim=-1)[..., 1].squeeze(0)


def smoothed_two_class_target(label: int, smoothing: float) -> torch.Tensor:
    """Standard label smoothing for two classes: true class gets 1 - s/2."""
    target = torch.full((2,), smoothing / 2.0)
    target[label] = 1.0 - smoothing / 2.0
    return target


def _smoothed_ce(logits: torch.Tensor, label: int, smoothing: float) -> torch.Tensor:
    target = smoothed_two_class_target(label, smoothing).to(logits.dtype)
    return -(target * F.log_softmax(logits, dim=-1)).sum(dim=-1).mean()


def image_loss(
    z_pos: torch.Tensor,
    z_neg: torch.Tensor | None,
    z_neg_latent: torch.Tensor | None,
    w_pos: torch.Tensor,
    w_neg: torch.Tensor,
    tau: float,
    latent_smoothing: float = 0.003,
) -> torch.Tensor:
    """Image-level CE over the pixel-space pair plus the latent-space pair.

    The latent anomaly's abnormal label is smoothed; everything else uses
    hard labels. Each pair contributes the mean CE of its two samples.
    Either anomaly branch may be None (simulation-channel ablations), in
    which case its pair is dropped.
    """
    if z_neg is None and z_neg_latent is None:
        return torch.zeros((), dtype=z_pos.dtype, device=z_pos.device)
    ce_pos = _smoothed_ce(_state_logits(z_pos, w_pos, w_neg, tau), 0, 0.0)
    total = torch.zeros((), dtype=z_pos.dtype, device=z_pos.device)
    if z_neg is not None:
        lg_neg = _state_logits(z_neg, w_pos, w_neg, tau)
        total = total + 0.5 * (ce_pos + _smoothed_ce(lg_neg, 1, 0.0))
    if z_neg_latent is not None:
        lg_lat = _state_logits(z_neg_latent, w_pos, w_neg, tau)
        total = total + 0.5 * (ce_pos + _smoothed_ce(lg_lat, 1, latent_smoothing))
    return total


def alignment_loss(
    abnormal_logits: torch.Tensor,
    field: torch.Tensor,
    z_global: torch.Tensor,
    temperature: float = 2.0,
) -> torch.Tensor:
    """1 - cos(z_global, s) with s the softmax-weighted sum of the field.

    ``abnormal_logits`` (h, w) are normalized by a temperature-scaled
    softmax over all spatial locations; the weights pool the (h, w, d)
    field into a single anomaly-aware prototype s. A zero prototype is
    treated as orthogonal (loss 1) with a warning.
    """
    if abnormal_logits.shape != field.shape[:-1]:
        raise InputError(
            f"logit map {tuple(abnormal_logits.shape)} does not match field grid "
            f"{tuple(field.shape[:-1])}"
        )
    weights = torch.softmax(abnormal_logits.reshape(-1) / temperature, dim=0)
    s = weights @ field.reshape(-1, field.shape[-1])
    norm = s.norm()
    if norm == 0:
        warnings.warn("alignment prototype is the zero vector; treating as orthogonal")
        return torch.ones((), dtype=field.dtype, device=field.device)
    cos = (z_global @ s) / (norm * z_global.norm().clamp_min(_EPS))
    return 1.0 - cos


def mean_alignment_loss(field: torch.Tensor, z_global: torch.Tensor) -> torch.Tensor:
    """Ablation variant: align with the plain spatial mean of the field."""
    s = field.reshape(-1, field.shape[-1]).mean(dim=0)
    norm = s.norm()
    if norm == 0:
        warnings.warn("alignment prototype is the zero vector; treating as orthogonal")
        return torch.ones((), dtype=field.dtype, device=field.device)
    return 1.0 - (z_global @ s) / (norm * z_global.norm().clamp_min(_EPS))


@dataclass
class LossBreakdown:
    """Per-group losses; total is exactly their sum."""

    l_pixel: torch.Tensor
    l_img: torch.Tensor
    l_align: torch.Tensor

    @property
    def l_total(self) -> torch.Tensor:
        return self.l_pixel + self.l_img + self.l_align

    def as_floats(self) -> dict:
        return {
            "l_pixel": float(self.l_pixel.detach()),
            "l_img": float(self.l_img.detach()),
            "l_align": float(self.l_align.detach()),
            "l_total": float(self.l_total.detach()),
        }
