"""Multi-scale view construction.

Training uses N=4 non-overlapping crops that tile the resized square frame
plus the whole image resized to the crop size; testing uses the whole-image
view only. Masks follow the identical geometry with nearest-neighbor
resampling so they stay binary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError

# Channel statistics of the pretrained dual encoder's training data.
CHANNEL_MEAN = (0.48145466, 0.4578275, 0.40821073)
CHANNEL_STD = (0.26862954, 0.26130258, 0.27577711)

N_SUB_VIEWS = 4


def normalize_image(image: torch.Tensor) -> torch.Tensor:
    mean = torch.tensor(CHANNEL_MEAN, dtype=image.dtype, device=image.device).view(3, 1, 1)
    std = torch.tensor(CHANNEL_STD, dtype=image.dtype, device=image.device).view(3, 1, 1)
    return (image - mean) / std


def denormalize_image(image: torch.Tensor) -> torch.Tensor:
    mean = torch.tensor(CHANNEL_MEAN, dtype=image.dtype, device=image.device).view(3, 1, 1)
    std = torch.tensor(CHANNEL_STD, dtype=image.dtype, device=image.device).view(3, 1, 1)
    return image * std + mean


def resize_image(image: torch.Tensor, size: int) -> torch.Tensor:
    return F.interpolate(
        image.unsqueeze(0), size=(size, size), mode="bilinear", align_corners=False
    ).squeeze(0)


def resize_mask(mask: torch.Tensor, size: int) -> torch.Tensor:
    return (
        F.interpolate(mask[None, None].float(), size=(size, size), mode="nearest-exact")
        .squeeze(0)
        .squeeze(0)
    )


@dataclass
class View:
    image: torch.Tensor  # (3, view_size, view_size)
    view_index: int  # 1..N for sub-crops, N+1 for the whole image
    mask: torch.Tensor | None = None  # (view_size, view_size) binary


@dataclass
class ViewBatch:
    views: list = field(default_factory=list)
    origin: str = ""

    def __post_init__(self):
        indices = [v.view_index for v in self.views]
        if len(set(indices)) != len(indices):
            raise InputError(f"duplicate view indices: {indices}")

    def whole(self) -> View:
        return self.views[-1]


def crop_offsets(base_size: int, view_size: int):
    """Row/col offsets of the four quadrant crops, top-left first."""
    return ((0, 0), (0, view_size), (view_size, 0), (view_size, view_size))


def make_views(
    image: torch.Tensor,
    mode: str,
    mask: torch.Tensor | None = None,
    base_size: int = 480,
    view_size: int = 240,
    origin: str = "",
) -> ViewBatch:
    """Build the train-time 5-view set or the test-time single view.

    ``image`` is a raw (3, H, W) tensor in [0, 1]; geometry only, channel
    normalization is applied at encode time. Train mode resizes to
    ``base_size`` and slices the four quadrants (indices 1..4: top-left,
    top-right, bottom-left, bottom-right) and appends the original resized
    to ``view_size`` as index 5; test mode yields only the whole view.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise InputError(f"expected a (3, H, W) image, got {tuple(image.shape)}")
    if base_size != 2 * view_size:
        raise ConfigError(
            f"base_size must be twice view_size for the quadrant tiling, "
            f"got {base_size} vs {view_size}"
        )
    if mode not in ("train", "test"):
        raise InputError(f"mode must be 'train' or 'test', got {mode!r}")

    whole_img = resize_image(image, view_size)
    whole_mask = resize_mask(mask, view_size) if mask is not None else None
    whole = View(whole_img, N_SUB_VIEWS + 1, whole_mask)
    if mode == "test":
        return ViewBatch(views=[whole], origin=origin)

    big = resize_image(image, base_size)
    big_mask = resize_mask(mask, base_size) if mask is not None else None
    views = []
    for idx, (r, c) in enumerate(crop_offsets(base_size, view_size), start=1):
        crop = big[:, r : r + view_size, c : c + view_size]
        crop_mask = big_mask[r : r + view_size, c : c + view_size] if big_mask is not None else None
        views.append(View(crop, idx, crop_mask))
    views.append(whole)
    return ViewBatch(views=views, origin=origin)
