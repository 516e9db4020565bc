import numpy as np
import pytest
import torch

from anoprompt.errors import InputError
from anoprompt.losses import smoothed_two_class_target
from anoprompt.synthesis import (
    TextureBank,
    perlin_noise,
    save_mask_png,
    simulate_latent_anomaly,
    simulate_pixel_anomaly,
)


def rand_image(seed=0, size=32):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(3, size, size, generator=g)


def test_perlin_shape_and_range():
    rng = np.random.default_rng(0)
    noise = perlin_noise((33, 47), (4, 2), rng)
    assert noise.shape == (33, 47)
    assert np.isfinite(noise).all()
    assert noise.max() <= np.sqrt(2.0) + 1e-9 and noise.min() >= -np.sqrt(2.0) - 1e-9


def test_perlin_deterministic():
    a = perlin_noise((16, 16), (2, 2), np.random.default_rng(3))
    b = perlin_noise((16, 16), (2, 2), np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_pixel_anomaly_exact_outside_mask():
    image = rand_image(1)
    out = simulate_pixel_anomaly(image, TextureBank(), np.random.default_rng(2))
    outside = out.mask < 0.5
    assert outside.any() and (~outside).any()
    assert torch.equal(image[:, outside], out.image_minus[:, outside])
    assert not torch.equal(image, out.image_minus)


def test_pixel_anomaly_deterministic():
    image = rand_image(4)
    a = simulate_pixel_anomaly(image, TextureBank(), np.random.default_rng(9))
    b = simulate_pixel_anomaly(image, TextureBank(), np.random.default_rng(9))
    assert torch.equal(a.image_minus, b.image_minus)
    assert torch.equal(a.mask, b.mask)
    assert a.seed == b.seed and a.source_id == b.source_id


def test_full_opacity_pastes_texture():
    """beta = 1 makes the corrupted region equal the texture exactly."""
    image = rand_image(5)
    out = simulate_pixel_anomaly(
        image, TextureBank(), np.random.default_rng(0), beta_range=(1.0, 1.0)
    )
    # same rng seed with beta = 0 keeps the image untouched inside the mask
    probe = simulate_pixel_anomaly(
        image, TextureBank(), np.random.default_rng(0), beta_range=(0.0, 0.0)
    )
    inside = out.mask > 0.5
    assert torch.equal(probe.image_minus[:, inside], image[:, inside])
    assert not torch.equal(out.image_minus[:, inside], image[:, inside])


def test_mask_area_statistics():
    """Monte-Carlo: every mask is non-empty and covers at most half the image."""
    rng = np.random.default_rng(123)
    image = rand_image(6)
    areas = []
    for _ in range(1000):
        out = simulate_pixel_anomaly(image, TextureBank(), rng)
        areas.append(out.mask.mean().item())
    areas = np.array(areas)
    assert (areas > 0).all()
    assert (areas <= 0.5).all()
    assert areas.mean() > 0.01


def test_texture_directory_source(tmp_path):
    from PIL import Image

    arr = (np.ones((16, 16, 3)) * [255, 0, 0]).astype(np.uint8)
    Image.fromarray(arr).save(tmp_path / "tex.png")
    bank = TextureBank(tmp_path)
    image = rand_image(7, size=24)
    out = simulate_pixel_anomaly(image, bank, np.random.default_rng(1), beta_range=(1.0, 1.0))
    assert out.source_id == "tex.png"
    inside = out.mask > 0.5
    assert torch.allclose(
        out.image_minus[0][inside], torch.ones(int(inside.sum())), atol=1e-6
    )
    assert torch.allclose(
        out.image_minus[1][inside], torch.zeros(int(inside.sum())), atol=1e-6
    )


def test_texture_directory_validation(tmp_path):
    with pytest.raises(InputError):
        TextureBank(tmp_path / "missing")
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(InputError):
        TextureBank(empty)


def test_latent_sigma_zero_is_identity():
    z = torch.randn(32, dtype=torch.float64)
    out = simulate_latent_anomaly(z, np.random.default_rng(0), mu=0.0, sigma=0.0)
    assert torch.equal(out, z)


def test_latent_noise_variance():
    """E[||z- - z+||^2] = d * sigma^2 within 5% over many draws."""
    d, sigma = 64, 0.015
    z = torch.zeros(d, dtype=torch.float64)
    rng = np.random.default_rng(42)
    sq = [float((simulate_latent_anomaly(z, rng, 0.0, sigma) ** 2).sum()) for _ in range(10_000)]
    expected = d * sigma**2
    assert abs(np.mean(sq) - expected) < 0.05 * expected


def test_latent_smoothed_target():
    """Two-class smoothing: abnormal target is (s/2, 1 - s/2)."""
    target = smoothed_two_class_target(1, 0.003)
    assert torch.allclose(target, torch.tensor([0.003 / 2, 1 - 0.003 / 2]))
    assert abs(target.sum().item() - 1.0) < 1e-9


def test_mask_png_export(tmp_path):
    from PIL import Image

    mask = torch.zeros(8, 8)
    mask[2:5, 3:6] = 1.0
    save_mask_png(mask, tmp_path / "m.png")
    with Image.open(tmp_path / "m.png") as im:
        arr = np.asarray(im)
    assert arr.shape == (8, 8)
    assert set(np.unique(arr)) == {0, 255}
