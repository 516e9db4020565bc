"""Lightweight convolutional head mapping patch tokens to a dense field.

Patch tokens are laid out on the patch grid, bilinearly upsampled to the
target map size, refined by three convolutions (3x3 spatial mixer, 1x1
channel mixer, 1x1 projection into the shared text space) and normalized
per location, so similarities against text features are cosines.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InputError


class AnomalyDecoder(nn.Module):
    def __init__(self, vision_dim: int, text_dim: int, grid, output_size):
        super().__init__()
        self.vision_dim = vision_dim
        self.text_dim = text_dim
        self.grid = tuple(grid)
        self.output_size = tuple(output_size)
        self.conv_spatial = nn.Conv2d(vision_dim, vision_dim, 3, padding=1)
        self.conv_channel = nn.Conv2d(vision_dim, vision_dim, 1)
        self.conv_project = nn.Conv2d(vision_dim, text_dim, 1)
        self.act = nn.GELU()

    def config_header(self) -> dict:
        return {
            "vision_dim": self.vision_dim,
            "text_dim": self.text_dim,
            "grid": list(self.grid),
            "output_size": list(self.output_size),
        }

    @classmethod
    def from_config_header(cls, header: dict) -> "AnomalyDecoder":
        return cls(
            header["vision_dim"], header["text_dim"], header["grid"], header["output_size"]
        )

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        """(B, n, vision_dim) tokens -> (B, h, w, text_dim) unit field."""
        hp, wp = self.grid
        if patches.ndim != 3 or patches.shape[1] != hp * wp:
            raise InputError(
                f"expected patch tokens of shape (B, {hp * wp}, {self.vision_dim}), "
                f"got {tuple(patches.shape)}"
            )
        x = patches.transpose(1, 2).reshape(patches.shape[0], self.vision_dim, hp, wp)
        x = F.interpolate(x, size=self.output_size, mode="bilinear", align_corners=False)
        x = self.act(self.conv_spatial(x))
        x = self.act(self.conv_channel(x))
        x = self.conv_project(x)
        x = F.normalize(x, dim=1)
        return x.permute(0, 2, 3, 1)


def pixel_logits(field: torch.Tensor, w_pos: torch.Tensor, w_neg: torch.Tensor):
    """Cosine logits of the dense field against the two text states.

    Returns ``(abnormal_map, two_channel)`` where ``two_channel[..., 0]``
    is the normal and ``[..., 1]`` the abnormal similarity; the abnormal
    map is the slice the localization and alignment paths consume.
    """
    two_channel = torch.stack([field @ w_pos, field @ w_neg], dim=-1)
    return two_channel[..., 1], two_channel


def pixel_probabilities(two_channel: torch.Tensor, logit_scale: float) -> torch.Tensor:
    """Two-way softmax abnormal probability map in (0, 1)."""
    return torch.softmax(two_channel * logit_scale, dim=-1)[..., 1]
