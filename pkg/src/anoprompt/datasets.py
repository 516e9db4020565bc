"""Dataset ingestion and the synthetic desk-scale generator.

Real datasets follow the per-category industrial layout

    root/<category>/train/good/*.png
    root/<category>/test/good/*.png
    root/<category>/test/<defect>/*.png
    root/<category>/ground_truth/<defect>/<stem>_mask.png (or <stem>.png)

which covers MVTec-AD and the common single-class VisA preprocessing.
The synthetic generator writes the same layout so every downstream code
path is shared.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import IngestionError
from .synthesis import perlin_noise

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tiff")


def load_image(path) -> torch.Tensor:
    """Decode to a (3, H, W) float tensor in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as exc:
        raise IngestionError(f"cannot decode image {path}: {exc}") from exc
    return torch.from_numpy(arr).permute(2, 0, 1)


def load_mask(path) -> torch.Tensor:
    """Decode a ground-truth mask to a (H, W) float {0, 1} tensor."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32)
    except Exception as exc:
        raise IngestionError(f"cannot decode mask {path}: {exc}") from exc
    return torch.from_numpy((arr > 127.5).astype(np.float32))


@dataclass
class TestSample:
    path: Path
    label: int  # 0 normal, 1 anomalous
    defect_type: str
    mask_path: Path | None = None


@dataclass
class CategoryData:
    name: str
    train_good: list
    test: list


def _list_images(directory: Path):
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _find_mask(gt_dir: Path, defect: str, stem: str) -> Path | None:
    for candidate in (f"{stem}_mask.png", f"{stem}.png"):
        path = gt_dir / defect / candidate
        if path.exists():
            return path
    return None


def discover_categories(root, categories=None) -> list:
    """Scan the dataset root; raises IngestionError naming any missing path."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root does not exist: {root}")
    if categories is None:
        categories = sorted(
            d.name for d in root.iterdir() if d.is_dir() and (d / "train" / "good").is_dir()
        )
        if not categories:
            raise IngestionError(f"no category directories with train/good under: {root}")
    result = []
    for name in categories:
        cat_dir = root / name
        train_dir = cat_dir / "train" / "good"
        test_dir = cat_dir / "test"
        if not train_dir.is_dir():
            raise IngestionError(f"missing train/good directory: {train_dir}")
        if not test_dir.is_dir():
            raise IngestionError(f"missing test directory: {test_dir}")
        train_good = _list_images(train_dir)
        if not train_good:
            raise IngestionError(f"no training images under: {train_dir}")
        gt_dir = cat_dir / "ground_truth"
        test_samples = []
        for defect_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
            defect = defect_dir.name
            for img in _list_images(defect_dir):
                if defect == "good":
                    test_samples.append(TestSample(img, 0, defect))
                else:
                    test_samples.append(
                        TestSample(img, 1, defect, _find_mask(gt_dir, defect, img.stem))
                    )
        result.append(CategoryData(name, train_good, test_samples))
    return result


# -- synthetic desk-scale dataset ---------------------------------------------


def _texture_image(size: int, freq, phase, palette, noise, rng) -> np.ndarray:
    """Quasi-periodic RGB texture with per-image jitter, values in [0, 1]."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    wave = 0.5 * (
        np.sin(2 * np.pi * freq[0] * yy / size + phase[0])
        + np.sin(2 * np.pi * freq[1] * xx / size + phase[1])
    )
    img = np.empty((size, size, 3), dtype=np.float32)
    for ch in range(3):
        img[..., ch] = palette[ch] + 0.18 * wave * (1.0 + 0.15 * ch)
    img += rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _save_png(arr: np.ndarray, path: Path) -> None:
    Image.fromarray((np.clip(arr, 0.0, 1.0) * 255).round().astype(np.uint8)).save(path)


def generate_synthetic_dataset(
    root,
    category: str = "synthtex",
    n_train: int = 64,
    n_test_normal: int = 100,
    n_test_defect: int = 100,
    size: int = 64,
    seed: int = 0,
    phase_jitter: float = np.pi / 2,
) -> Path:
    """Write a synthetic textured category in the standard layout.

    Normal images share one quasi-periodic texture family (category-fixed
    base phase, per-image jitter bounded by ``phase_jitter``); defective
    test images carry either a contrasting square patch or a Perlin-masked
    blend, each with a pixel-exact ground-truth mask.
    """
    rng = np.random.default_rng(seed)
    root = Path(root)
    cat = root / category
    (cat / "train" / "good").mkdir(parents=True, exist_ok=True)
    (cat / "test" / "good").mkdir(parents=True, exist_ok=True)
    (cat / "test" / "defect").mkdir(parents=True, exist_ok=True)
    (cat / "ground_truth" / "defect").mkdir(parents=True, exist_ok=True)

    freq = rng.uniform(2.0, 4.0, size=2)
    palette = rng.uniform(0.35, 0.65, size=3)
    defect_palette = 1.0 - palette  # complementary colors for contrast
    base_phase = rng.uniform(0.0, 2 * np.pi, size=2)

    def normal_image():
        phase = base_phase + rng.uniform(-phase_jitter, phase_jitter, size=2)
        return _texture_image(size, freq, phase, palette, 0.03, rng)

    for i in range(n_train):
        _save_png(normal_image(), cat / "train" / "good" / f"{i:03d}.png")
    for i in range(n_test_normal):
        _save_png(normal_image(), cat / "test" / "good" / f"{i:03d}.png")

    for i in range(n_test_defect):
        img = normal_image()
        mask = np.zeros((size, size), dtype=bool)
        if rng.random() < 0.5:
            side = int(rng.integers(size // 6, size // 3 + 1))
            r = int(rng.integers(0, size - side))
            c = int(rng.integers(0, size - side))
            mask[r : r + side, c : c + side] = True
        else:
            while not mask.any():
                res = (2 ** int(rng.integers(1, 4)), 2 ** int(rng.integers(1, 4)))
                mask = perlin_noise((size, size), res, rng) > 0.6
        fill = _texture_image(
            size, freq * 3.0, rng.uniform(0, 2 * np.pi, 2), defect_palette, 0.05, rng
        )
        beta = rng.uniform(0.7, 1.0)
        img[mask] = beta * fill[mask] + (1.0 - beta) * img[mask]
        _save_png(img, cat / "test" / "defect" / f"{i:03d}.png")
        _save_png(
            mask.astype(np.float32), cat / "ground_truth" / "defect" / f"{i:03d}_mask.png"
        )
    return cat
