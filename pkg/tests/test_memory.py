import numpy as np
import pytest
import torch
import torch.nn.functional as F

from anoprompt.errors import ConfigError, StateError
from anoprompt.memory import MemoryBank


def unit_rows(n, d, seed=0):
    g = torch.Generator().manual_seed(seed)
    return F.normalize(torch.randn(n, d, generator=g), dim=-1)


def brute_force_query(features, rows):
    """O(HW * |R|) double-loop oracle for the half cosine distance map."""
    h, w, d = features.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            best = min(
                0.5 * (1.0 - float(features[i, j] @ rows[r])) for r in range(rows.shape[0])
            )
            out[i, j] = best
    return out


def test_build_row_count(backbone, stack):
    imgs = torch.randn(2, 3, 64, 64, generator=torch.Generator().manual_seed(0))
    bank = MemoryBank.build(backbone, imgs, [3, 4], stack=stack)
    h, w = backbone.cfg.patch_grid
    assert len(bank) == 2 * h * w
    assert bank.shots == 2 and bank.grid == (h, w)
    assert torch.allclose(bank.rows.norm(dim=-1), torch.ones(len(bank)), atol=1e-5)


def test_build_deterministic(backbone, stack):
    imgs = torch.randn(1, 3, 64, 64, generator=torch.Generator().manual_seed(1))
    a = MemoryBank.build(backbone, imgs, [3], stack=stack)
    b = MemoryBank.build(backbone, imgs, [3], stack=stack)
    assert torch.equal(a.rows, b.rows)


def test_build_requires_shots(backbone, stack):
    with pytest.raises(ConfigError):
        MemoryBank.build(backbone, torch.zeros(0, 3, 64, 64), [3], stack=stack)


def test_query_exact_match_is_zero():
    rows = unit_rows(10, 8)
    bank = MemoryBank(rows, [1], 1, (2, 5))
    feats = rows[:10].reshape(2, 5, 8)
    out = bank.query(feats)
    assert torch.allclose(out, torch.zeros(2, 5), atol=1e-6)


def test_query_orthogonal_and_antiparallel():
    rows = torch.eye(4)[:2]  # e1, e2
    bank = MemoryBank(rows, [1], 1, (1, 1))
    e3 = torch.tensor([[[0.0, 0.0, 1.0, 0.0]]])
    assert bank.query(e3).item() == pytest.approx(0.5, abs=1e-7)
    anti = torch.tensor([[[-1.0, 0.0, 0.0, 0.0]]])
    # -e1 has cos -1 to e1 and 0 to e2: the min distance is to e2
    assert bank.query(anti).item() == pytest.approx(0.5, abs=1e-7)
    only_e1 = MemoryBank(rows[:1], [1], 1, (1, 1))
    assert only_e1.query(anti).item() == pytest.approx(1.0, abs=1e-7)


def test_query_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for trial in range(5):
        h, w, d = 4, 5, 12
        n = int(rng.integers(3, 40))
        feats = F.normalize(torch.from_numpy(rng.normal(size=(h, w, d))), dim=-1)
        rows = F.normalize(torch.from_numpy(rng.normal(size=(n, d))), dim=-1)
        bank = MemoryBank(rows, [1], 1, (h, w))
        fast = bank.query(feats).numpy()
        slow = brute_force_query(feats, rows)
        assert np.abs(fast - slow).max() < 1e-6


def test_query_monotone_in_bank_size():
    """Adding rows never increases any distance."""
    rng = np.random.default_rng(1)
    feats = F.normalize(torch.from_numpy(rng.normal(size=(3, 3, 8))), dim=-1)
    rows = F.normalize(torch.from_numpy(rng.normal(size=(20, 8))), dim=-1)
    small = MemoryBank(rows[:5], [1], 1, (3, 3)).query(feats)
    big = MemoryBank(rows, [1], 1, (3, 3)).query(feats)
    assert (big <= small + 1e-12).all()


def test_query_range():
    rng = np.random.default_rng(2)
    feats = F.normalize(torch.from_numpy(rng.normal(size=(6, 6, 16))), dim=-1)
    rows = F.normalize(torch.from_numpy(rng.normal(size=(50, 16))), dim=-1)
    out = MemoryBank(rows, [1], 1, (6, 6)).query(feats)
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


def test_empty_bank_is_state_error():
    bank = MemoryBank(torch.zeros(0, 8), [1], 1, (1, 1))
    with pytest.raises(StateError):
        bank.query(torch.zeros(1, 1, 8))


def test_persistence_roundtrip(tmp_path):
    rows = unit_rows(12, 6, seed=3)
    bank = MemoryBank(rows, [3, 4], 2, (2, 3))
    path = tmp_path / "bank.npz"
    bank.save(path)
    loaded = MemoryBank.load(path)
    assert torch.allclose(loaded.rows, rows, atol=1e-7)
    assert loaded.layers == [3, 4] and loaded.shots == 2 and loaded.grid == (2, 3)
