import json

import numpy as np
import pytest
import torch

from anoprompt.configs import RunConfig, apply_overrides, tiny_run_config
from anoprompt.datasets import discover_categories, generate_synthetic_dataset, load_image
from anoprompt.episodes import run_episode, sample_shots, train_run
from anoprompt.errors import ConfigError, InputError
from anoprompt.training import build_bundle, train_bundle


def micro_config(root, **kw):
    base = dict(
        dataset_root=str(root),
        view_size=32,
        base_size=64,
        tiny_text_dim=24,
        tiny_vision_dim=32,
        tiny_text_layers=2,
        tiny_vision_layers=2,
        tiny_heads=2,
        memory_layers=[1, 2],
        text_len=1,
        vision_len=1,
        epochs=3,
        k=1,
        seeds=[0],
    )
    base.update(kw)
    return tiny_run_config(**base)


@pytest.fixture(scope="module")
def micro_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("micro")
    generate_synthetic_dataset(
        root, n_train=5, n_test_normal=4, n_test_defect=4, size=32, seed=1
    )
    return root


def test_backbone_frozen_through_training(micro_root):
    cfg = micro_config(micro_root, epochs=2)
    cats = discover_categories(micro_root)
    shots = [(cats[0].name, load_image(p)) for p in sample_shots(cats[0], 1, np.random.default_rng(0))]
    bundle = build_bundle(cfg, [cats[0].name], init_seed=0)
    before = bundle.backbone.parameter_checksum()
    train_bundle(bundle, shots, seed=0)
    assert bundle.backbone.parameter_checksum() == before


def test_loss_decreases_and_is_logged(micro_root, tmp_path):
    cfg = micro_config(micro_root, epochs=8)
    cats = discover_categories(micro_root)
    shots = [(cats[0].name, load_image(p)) for p in sample_shots(cats[0], 1, np.random.default_rng(0))]
    bundle = build_bundle(cfg, [cats[0].name], init_seed=0)
    log_path = tmp_path / "metrics.jsonl"
    history = train_bundle(bundle, shots, seed=0, metrics_path=log_path)
    assert len(history) == 8
    epochs = {}
    for rec in history:
        epochs.setdefault(rec["epoch"], []).append(rec["l_total"])
    means = [np.mean(v) for _, v in sorted(epochs.items())]
    assert means[-1] < means[0]
    lines = [json.loads(l) for l in log_path.read_text().splitlines()]
    assert len(lines) == len(history)
    assert all(
        rec["l_total"] == pytest.approx(rec["l_pixel"] + rec["l_img"] + rec["l_align"])
        for rec in lines
    )


def test_training_is_deterministic(micro_root):
    cfg = micro_config(micro_root, epochs=2)
    cats = discover_categories(micro_root)
    shots = [(cats[0].name, load_image(p)) for p in sample_shots(cats[0], 1, np.random.default_rng(0))]
    states = []
    for _ in range(2):
        bundle = build_bundle(cfg, [cats[0].name], init_seed=3)
        train_bundle(bundle, shots, seed=3)
        states.append(
            {k: v.clone() for k, v in list(bundle.stack.state_dict().items())
             + list(bundle.decoder.state_dict().items())}
        )
    for key in states[0]:
        assert torch.equal(states[0][key], states[1][key]), key


def test_warmup_starts_low_and_reaches_preset(micro_root):
    cfg = micro_config(micro_root, epochs=10, warmup_fraction=0.5)
    cats = discover_categories(micro_root)
    shots = [(cats[0].name, load_image(p)) for p in sample_shots(cats[0], 1, np.random.default_rng(0))]
    bundle = build_bundle(cfg, [cats[0].name], init_seed=0)
    history = train_bundle(bundle, shots, seed=0)
    lrs = [rec["lr"] for rec in history]
    assert lrs[0] == pytest.approx(cfg.lr_prompts / 5)
    assert lrs[-1] == pytest.approx(cfg.lr_prompts)
    assert all(b >= a - 1e-12 for a, b in zip(lrs, lrs[1:]))


def test_run_episode_deterministic(micro_root):
    cfg = micro_config(micro_root, epochs=2)
    a = run_episode(cfg, seed=0)
    b = run_episode(cfg, seed=0)
    assert a.image_auroc == b.image_auroc
    assert a.pixel_auroc == b.pixel_auroc
    assert a.per_class == b.per_class
    assert a.categories == ["synthtex"]


def test_run_episode_k_validation(micro_root):
    with pytest.raises(InputError):
        run_episode(micro_config(micro_root, k=3), seed=0)


def test_simulation_ablation_toggles_run(micro_root):
    for kw in (
        {"enable_latent_anomalies": False},
        {"enable_pixel_anomalies": False},
        {"alignment": "mean"},
        {"alignment": "off"},
        {"use_view_signal": False},
        {"coupling": "text_to_image"},
    ):
        cfg = micro_config(micro_root, epochs=1, **kw)
        run = run_episode(cfg, seed=0)
        assert 0.0 <= run.image_auroc <= 1.0


def test_train_run_writes_artifacts(micro_root, tmp_path):
    out = tmp_path / "run"
    cfg = micro_config(micro_root, epochs=1, output_dir=str(out))
    paths = train_run(cfg, out)
    assert paths == [out / "checkpoint.pt"]
    assert (out / "metrics.jsonl").exists()
    assert (out / "banks" / "synthtex.npz").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"] == cfg.config_hash()
    assert manifest["seeds"] == [0]


def test_zero_epochs_checkpoint_equals_initialization(micro_root, tmp_path):
    out = tmp_path / "run0"
    cfg = micro_config(micro_root, epochs=0, output_dir=str(out))
    train_run(cfg, out)
    from anoprompt.prompting import load_checkpoint

    stack, decoder, header = load_checkpoint(out / "checkpoint.pt")
    fresh = build_bundle(cfg, ["synthtex"], init_seed=0)
    for a, b in zip(stack.parameters(), fresh.stack.parameters()):
        assert torch.equal(a, b)
    for a, b in zip(decoder.parameters(), fresh.decoder.parameters()):
        assert torch.equal(a, b)


def test_per_class_writes_one_checkpoint_each(tmp_path):
    root = tmp_path / "two_cats"
    generate_synthetic_dataset(root, category="alpha", n_train=3, n_test_normal=2,
                               n_test_defect=2, size=32, seed=0)
    generate_synthetic_dataset(root, category="beta", n_train=3, n_test_normal=2,
                               n_test_defect=2, size=32, seed=1)
    out = tmp_path / "runpc"
    cfg = micro_config(root, epochs=1, per_class=True, output_dir=str(out))
    paths = train_run(cfg, out)
    assert sorted(p.name for p in paths) == ["alpha.pt", "beta.pt"]
    from anoprompt.prompting import load_checkpoint

    for p in paths:
        _, _, header = load_checkpoint(p)
        assert header["class_names"] == [p.stem]


def test_multi_class_episode_has_row_per_category(tmp_path):
    root = tmp_path / "mc"
    generate_synthetic_dataset(root, category="alpha", n_train=3, n_test_normal=3,
                               n_test_defect=3, size=32, seed=0)
    generate_synthetic_dataset(root, category="beta", n_train=3, n_test_normal=3,
                               n_test_defect=3, size=32, seed=1)
    cfg = micro_config(root, epochs=1)
    run = run_episode(cfg, seed=0)
    assert sorted(run.per_class) == ["alpha", "beta"]
    assert run.image_auroc == pytest.approx(
        np.mean([v["image_auroc"] for v in run.per_class.values()])
    )


def test_config_schema_validation():
    with pytest.raises(ConfigError, match="unknown config keys"):
        RunConfig.from_dict({"learning_rate": 0.1})
    with pytest.raises(ConfigError, match="coupling"):
        RunConfig.from_dict({"coupling": "diagonal"})
    with pytest.raises(ConfigError, match="base_size"):
        RunConfig.from_dict({"base_size": 100, "view_size": 64})
    cfg = RunConfig()
    assert cfg.epochs == 60 and cfg.batch_size == 1
    assert cfg.lr_prompts == pytest.approx(1e-3)
    assert cfg.lr_decoder == pytest.approx(2e-4)
    assert cfg.momentum == pytest.approx(0.9)
    assert cfg.weight_decay == pytest.approx(1e-5)
    assert cfg.prompt_depth == 9
    assert cfg.memory_layers == [7, 8, 9, 10]


def test_apply_overrides_type_aware():
    cfg = RunConfig()
    out = apply_overrides(cfg, ["k=2", "use_memory=false", "seeds=[1, 2]"])
    assert out.k == 2 and out.use_memory is False and out.seeds == [1, 2]
    with pytest.raises(ConfigError, match="unknown config key"):
        apply_overrides(cfg, ["lr=0.5"])
    with pytest.raises(ConfigError, match="key=value"):
        apply_overrides(cfg, ["epochs"])


def test_config_hash_stable_and_sensitive():
    a = RunConfig()
    b = RunConfig()
    assert a.config_hash() == b.config_hash()
    c = apply_overrides(a, ["k=4"])
    assert c.config_hash() != a.config_hash()
