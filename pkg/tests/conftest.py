import numpy as np
import pytest
import torch

from anoprompt.backbone import tiny_backbone
from anoprompt.prompting import PromptStack, build_text_inputs

TINY_WORDS = ["bottle", "cable", "abnormal"]


@pytest.fixture(scope="session")
def backbone():
    """Shared frozen tiny backbone (64px input, 8x8 patch grid)."""
    return tiny_backbone(words=TINY_WORDS, seed=7)


@pytest.fixture()
def stack(backbone):
    torch.manual_seed(11)
    return PromptStack(
        text_dim=backbone.cfg.text_dim,
        vision_dim=backbone.cfg.vision_dim,
        text_len=2,
        vision_len=2,
        depth=2,
        n_views=4,
    )


@pytest.fixture()
def text_inputs(backbone, stack):
    return build_text_inputs(["bottle", "cable"], backbone.tokenizer, stack.n_text_slots)


def micro_backbone(seed=3):
    """Very small double-precision-friendly backbone for gradient checks."""
    return tiny_backbone(
        words=TINY_WORDS,
        text_dim=16,
        vision_dim=20,
        text_layers=2,
        vision_layers=2,
        heads=2,
        patch_size=4,
        input_resolution=16,
        prompt_depth=2,
        context_length=16,
        seed=seed,
    )


def central_difference_check(
    make_loss, params, eps=1e-6, max_coords=24, rel_tol=1e-4, abs_tol=1e-7, seed=0
):
    """Compare autograd gradients against central finite differences.

    ``make_loss`` recomputes the scalar loss from the current parameter
    values; up to ``max_coords`` coordinates per tensor are probed. All
    tensors must be double precision. Returns the worst relative error.
    """
    loss = make_loss()
    grads = torch.autograd.grad(loss, params, allow_unused=False)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        n = flat.numel()
        coords = rng.choice(n, size=min(max_coords, n), replace=False)
        for idx in coords:
            idx = int(idx)
            orig = flat[idx].item()
            flat[idx] = orig + eps
            up = make_loss().item()
            flat[idx] = orig - eps
            down = make_loss().item()
            flat[idx] = orig
            fd = (up - down) / (2.0 * eps)
            analytic = gflat[idx].item()
            err = abs(analytic - fd)
            scale = max(abs(analytic), abs(fd))
            rel = err / scale if scale > abs_tol else 0.0
            assert err <= rel_tol * scale + abs_tol, (
                f"gradient mismatch at coord {idx}: analytic {analytic:.3e} "
                f"vs finite-difference {fd:.3e}"
            )
            worst = max(worst, rel)
    return worst
