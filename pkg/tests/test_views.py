import numpy as np
import pytest
import torch

from anoprompt.errors import ConfigError, InputError
from anoprompt.views import (
    crop_offsets,
    denormalize_image,
    make_views,
    normalize_image,
    resize_mask,
)


def rand_image(seed=0, size=500):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(3, size, size, generator=g)


def test_train_mode_yields_five_indexed_views():
    batch = make_views(rand_image(), "train")
    assert len(batch.views) == 5
    assert [v.view_index for v in batch.views] == [1, 2, 3, 4, 5]
    for v in batch.views:
        assert v.image.shape == (3, 240, 240)


def test_test_mode_yields_whole_view_only():
    batch = make_views(rand_image(), "test")
    assert len(batch.views) == 1
    assert batch.views[0].view_index == 5
    assert batch.whole().view_index == 5


def test_crops_tile_frame_exactly():
    """The four crops partition the resized frame: disjoint and covering."""
    offsets = crop_offsets(480, 240)
    covered = np.zeros((480, 480), dtype=int)
    for r, c in offsets:
        covered[r : r + 240, c : c + 240] += 1
    assert (covered == 1).all()


def test_crop_content_matches_frame_slices():
    image = rand_image(3)
    batch = make_views(image, "train")
    from anoprompt.views import resize_image

    big = resize_image(image, 480)
    for view, (r, c) in zip(batch.views[:4], crop_offsets(480, 240)):
        assert torch.equal(view.image, big[:, r : r + 240, c : c + 240])


def test_quadrant_mask_routing():
    """A top-left-confined mask lands in crop 1 and the whole view only."""
    image = rand_image(4)
    mask = torch.zeros(500, 500)
    mask[40:160, 50:170] = 1.0  # strictly inside the top-left quadrant
    batch = make_views(image, "train", mask=mask)
    areas = [float(v.mask.sum()) for v in batch.views]
    assert areas[0] > 0          # top-left crop sees it
    assert areas[1] == areas[2] == areas[3] == 0.0
    assert areas[4] > 0          # downscaled copy in the whole view
    # the whole view halves each axis relative to the crop: ~quarter the area
    assert areas[4] == pytest.approx(areas[0] / 4.0, rel=0.12)


def test_mask_stays_binary_and_area_preserved():
    mask = (torch.rand(311, 311) > 0.7).float()
    resized = resize_mask(mask, 240)
    assert set(torch.unique(resized).tolist()) <= {0.0, 1.0}
    assert resized.mean().item() == pytest.approx(mask.mean().item(), abs=0.02)


def test_geometry_validation():
    with pytest.raises(ConfigError):
        make_views(rand_image(), "train", base_size=480, view_size=200)
    with pytest.raises(InputError):
        make_views(rand_image(), "validate")
    with pytest.raises(InputError):
        make_views(torch.rand(500, 500), "train")


def test_normalization_roundtrip():
    image = rand_image(5, size=64)
    assert torch.allclose(denormalize_image(normalize_image(image)), image, atol=1e-6)


def test_custom_view_size():
    batch = make_views(rand_image(6, size=100), "train", base_size=128, view_size=64)
    assert len(batch.views) == 5
    assert batch.views[0].image.shape == (3, 64, 64)
