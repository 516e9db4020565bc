"""Pseudo-anomaly generation.

Pixel space: a Perlin noise field is thresholded into a defect mask and
the masked region is blended with an external (or self-derived) texture.
Latent space: elementwise Gaussian noise added to a global feature. All
randomness flows through an injected numpy Generator so a run is
reproducible from (seed, config).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import InputError, StateError


def perlin_noise(shape, res, rng: np.random.Generator) -> np.ndarray:
    """2D Perlin noise of ``shape`` with ``res`` lattice cells per axis.

    The field is generated on the smallest lattice-aligned canvas covering
    ``shape`` and cropped, so shape does not need to divide by res.
    """
    ry, rx = int(res[0]), int(res[1])
    if ry < 1 or rx < 1:
        raise InputError(f"perlin lattice resolution must be >= 1, got {(ry, rx)}")
    h = -(-shape[0] // ry) * ry
    w = -(-shape[1] // rx) * rx
    dy, dx = h // ry, w // rx
    grid = np.stack(
        np.meshgrid(np.arange(h) / dy % 1, np.arange(w) / dx % 1, indexing="ij"), axis=-1
    )
    angles = 2.0 * np.pi * rng.random((ry + 1, rx + 1))
    gradients = np.stack((np.cos(angles), np.sin(angles)), axis=-1)

    def corner(sy, sx, off_y, off_x):
        g = gradients[sy : sy + ry, sx : sx + rx].repeat(dy, 0).repeat(dx, 1)
        return ((grid - np.array([off_y, off_x])) * g).sum(-1)

    n00 = corner(0, 0, 0, 0)
    n10 = corner(1, 0, 1, 0)
    n01 = corner(0, 1, 0, 1)
    n11 = corner(1, 1, 1, 1)
    t = grid**3 * (grid * (grid * 6 - 15) + 10)
    n0 = n00 * (1 - t[..., 0]) + t[..., 0] * n10
    n1 = n01 * (1 - t[..., 0]) + t[..., 0] * n11
    out = np.sqrt(2.0) * ((1 - t[..., 1]) * n0 + t[..., 1] * n1)
    return out[: shape[0], : shape[1]]


@dataclass
class SyntheticAnomaly:
    """A corrupted image with its ground-truth defect mask."""

    image_minus: torch.Tensor  # (3, H, W), equals the source outside the mask
    mask: torch.Tensor  # (H, W) float {0, 1}
    seed: int
    source_id: str


@dataclass
class LatentPerturbation:
    epsilon: torch.Tensor
    mu: float
    sigma: float


class TextureBank:
    """Texture provider for pixel-space corruption.

    With a directory, samples a random texture image resized to the target
    shape; without one, derives a contrasting texture from the input image
    itself (rotation + channel permutation + intensity jitter), which keeps
    the few-shot setting self-contained.
    """

    def __init__(self, directory=None):
        self.paths = None
        if directory is not None:
            directory = Path(directory)
            if not directory.is_dir():
                raise InputError(f"texture directory does not exist: {directory}")
            self.paths = sorted(
                p for p in directory.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
            )
            if not self.paths:
                raise InputError(f"texture directory has no images: {directory}")

    def sample(self, image: torch.Tensor, rng: np.random.Generator):
        if self.paths is not None:
            path = self.paths[int(rng.integers(len(self.paths)))]
            with Image.open(path) as im:
                im = im.convert("RGB").resize(
                    (image.shape[2], image.shape[1]), Image.BILINEAR
                )
            tex = torch.from_numpy(np.asarray(im, dtype=np.float32) / 255.0).permute(2, 0, 1)
            return tex.to(image.dtype), path.name
        k = int(rng.integers(1, 4))
        tex = torch.rot90(image, k, dims=(1, 2))
        perm = torch.as_tensor(rng.permutation(3))
        tex = tex[perm]
        gain = float(rng.uniform(0.6, 1.4))
        bias = float(rng.uniform(-0.2, 0.2))
        tex = (tex * gain + bias).clamp(0.0, 1.0)
        return tex, "self"

    def describe(self) -> str:
        return "directory" if self.paths is not None else "self"


def simulate_pixel_anomaly(
    image: torch.Tensor,
    textures: TextureBank,
    rng: np.random.Generator,
    threshold: float = 0.5,
    beta_range=(0.2, 1.0),
    max_area: float = 0.5,
    max_retries: int = 10,
) -> SyntheticAnomaly:
    """Corrupt ``image`` (3, H, W in [0, 1]) inside a Perlin-threshold mask.

    Inside the mask the pixel becomes beta*texture + (1-beta)*image with
    beta ~ U(beta_range); outside the mask the output equals the input
    exactly. Degenerate masks (empty, or covering more than ``max_area``)
    are resampled with fresh Perlin scales, a bounded number of times.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise InputError(f"expected a (3, H, W) image, got {tuple(image.shape)}")
    h, w = int(image.shape[1]), int(image.shape[2])
    seed = int(rng.integers(2**31 - 1))
    local = np.random.default_rng(seed)
    mask_np = None
    for _ in range(max_retries):
        res = (2 ** int(local.integers(0, 6)), 2 ** int(local.integers(0, 6)))
        noise = perlin_noise((h, w), res, local)
        candidate = noise > threshold
        area = candidate.mean()
        if 0.0 < area <= max_area:
            mask_np = candidate
            break
    if mask_np is None:
        raise StateError(
            f"could not draw a defect mask with area in (0, {max_area}] "
            f"after {max_retries} attempts"
        )
    texture, source_id = textures.sample(image, local)
    beta = float(local.uniform(*beta_range))
    mask = torch.from_numpy(mask_np)
    blended = beta * texture + (1.0 - beta) * image
    image_minus = torch.where(mask.unsqueeze(0), blended, image)
    return SyntheticAnomaly(
        image_minus=image_minus,
        mask=mask.to(image.dtype),
        seed=seed,
        source_id=source_id,
    )


def draw_latent_perturbation(
    dim: int, rng: np.random.Generator, mu: float = 0.0, sigma: float = 0.015
) -> LatentPerturbation:
    eps = torch.from_numpy(rng.normal(mu, sigma, size=dim).astype(np.float64))
    return LatentPerturbation(epsilon=eps, mu=mu, sigma=sigma)


def simulate_latent_anomaly(
    z: torch.Tensor, rng: np.random.Generator, mu: float = 0.0, sigma: float = 0.015
) -> torch.Tensor:
    """Global feature plus elementwise N(mu, sigma^2) noise."""
    pert = draw_latent_perturbation(z.shape[-1], rng, mu, sigma)
    return z + pert.epsilon.to(dtype=z.dtype, device=z.device)


def save_mask_png(mask: torch.Tensor, path) -> None:
    """Debug export of a binary mask as an 8-bit PNG."""
    arr = (mask.detach().cpu().numpy() > 0.5).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path)
