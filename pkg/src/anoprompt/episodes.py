"""k-shot episode orchestration and AUROC evaluation.

An episode samples k normal shots per category with the episode seed,
trains the prompt stack and decoder on simulated anomalies, builds one
memory bank per category from the shots, scores the test set and reports
image- and pixel-level AUROC (mean over categories). Multi-class mode
shares one model across categories; per-class mode trains one per
category.
"""

from __future__ import annotations

import csv
import json
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .configs import RunConfig
from .datasets import CategoryData, discover_categories, load_image, load_mask
from .decoder import pixel_logits, pixel_probabilities
from .errors import IngestionError, InputError
from .losses import image_probability
from .memory import MemoryBank
from .metrics import auroc, pixel_auroc
from .prompting import class_text_features
from .scoring import EPS, ScoreReport, fuse_maps, image_score, resize_map
from .training import ModelBundle, build_bundle, train_bundle
from .views import make_views, normalize_image, resize_mask

VALID_SHOT_COUNTS = (1, 2, 4)


@dataclass
class EvalRun:
    k: int
    seed: int
    categories: list
    image_auroc: float
    pixel_auroc: float
    per_class: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "categories": self.categories,
            "image_auroc": self.image_auroc,
            "pixel_auroc": self.pixel_auroc,
            "per_class": self.per_class,
        }


def sample_shots(category: CategoryData, k: int, rng: np.random.Generator):
    """k training paths drawn uniformly without replacement."""
    if k > len(category.train_good):
        raise InputError(
            f"category {category.name} has only {len(category.train_good)} "
            f"training images, cannot draw {k} shots"
        )
    idx = rng.choice(len(category.train_good), size=k, replace=False)
    return [category.train_good[int(i)] for i in sorted(idx)]


def score_test_image(bundle: ModelBundle, bank, w_pos, w_neg, image, image_id: str):
    """Run the full inference pipeline on one raw image tensor."""
    cfg = bundle.cfg
    backbone, stack, decoder = bundle.backbone, bundle.stack, bundle.decoder
    batch = make_views(image, "test", base_size=cfg.base_size, view_size=cfg.view_size)
    x = normalize_image(batch.whole().image).unsqueeze(0)
    with torch.no_grad():
        z0, patches = backbone.encode_image_with_prompts(x, stack, stack.n_views + 1)
        p_hat = float(image_probability(z0[0], w_pos, w_neg, backbone.similarity_temperature))
        field = decoder(patches)
        _, two_channel = pixel_logits(field, w_pos, w_neg)
        decoder_map = (
            pixel_probabilities(two_channel, float(backbone.logit_scale.exp()))[0]
            .cpu()
            .numpy()
        )
        if bank is not None:
            feats = backbone.extract_intermediate_patches(
                x,
                cfg.memory_layers,
                stack=None if cfg.memory_pre_prompt else stack,
                view_index=stack.n_views + 1,
            )
            mem_map = resize_map(bank.query(feats[0]).cpu().numpy(), decoder_map.shape)
            fused = fuse_maps(decoder_map, mem_map)
        else:
            fused = np.clip(decoder_map.astype(np.float64), EPS, None)
    return ScoreReport(
        image_id=image_id,
        score=image_score(p_hat, fused),
        fused_map=fused,
        p_hat=p_hat,
        map_max=float(fused.max()),
    )


def evaluate_category(bundle: ModelBundle, bank, category: CategoryData):
    """Score every test sample of a category; returns (reports, i_auroc, p_auroc)."""
    cfg = bundle.cfg
    with torch.no_grad():
        w_pos, w_neg = class_text_features(bundle.backbone, bundle.stack, bundle.text_inputs)
    reports, labels, maps, masks = [], [], [], []
    for sample in category.test:
        image = load_image(sample.path)
        report = score_test_image(
            bundle, bank, w_pos, w_neg, image, f"{category.name}/{sample.path.name}"
        )
        report.label = sample.label
        reports.append(report)
        labels.append(sample.label)
        if sample.label == 0:
            masks.append(np.zeros(report.fused_map.shape, dtype=np.float32))
            maps.append(report.fused_map)
        elif sample.mask_path is not None:
            gt = resize_mask(load_mask(sample.mask_path), cfg.view_size).numpy()
            masks.append(gt)
            maps.append(report.fused_map)
    scores = [r.score for r in reports]
    i_auroc = auroc(scores, labels)
    p_auroc = pixel_auroc(maps, masks)
    return reports, i_auroc, p_auroc


def build_category_bank(bundle: ModelBundle, shot_images) -> MemoryBank | None:
    cfg = bundle.cfg
    if not cfg.use_memory:
        return None
    refs = torch.stack(
        [
            normalize_image(
                make_views(im, "test", base_size=cfg.base_size, view_size=cfg.view_size)
                .whole()
                .image
            )
            for im in shot_images
        ]
    )
    return MemoryBank.build(
        bundle.backbone,
        refs,
        cfg.memory_layers,
        stack=None if cfg.memory_pre_prompt else bundle.stack,
    )


def run_episode(cfg: RunConfig, seed: int, metrics_path=None) -> EvalRun:
    """Sample shots, train, build banks, evaluate; fully seed-determined."""
    if cfg.k not in VALID_SHOT_COUNTS:
        raise InputError(f"k must be one of {VALID_SHOT_COUNTS}, got {cfg.k}")
    root = cfg.resolved_dataset_root()
    if root is None:
        raise IngestionError(
            "no dataset root: set dataset_root in the config or the "
            "ANOPROMPT_DATA_ROOT environment variable"
        )
    categories = discover_categories(root, cfg.categories)
    rng = np.random.default_rng(seed)
    shot_paths = {c.name: sample_shots(c, cfg.k, rng) for c in categories}
    shot_images = {
        name: [load_image(p) for p in paths] for name, paths in shot_paths.items()
    }

    per_class: dict = {}
    if cfg.per_class:
        for category in categories:
            bundle = build_bundle(cfg, [category.name], init_seed=seed)
            pairs = [(category.name, im) for im in shot_images[category.name]]
            train_bundle(bundle, pairs, seed=seed, metrics_path=metrics_path)
            bank = build_category_bank(bundle, shot_images[category.name])
            _, i_auroc, p_auroc = evaluate_category(bundle, bank, category)
            per_class[category.name] = {"image_auroc": i_auroc, "pixel_auroc": p_auroc}
    else:
        bundle = build_bundle(cfg, [c.name for c in categories], init_seed=seed)
        pairs = [
            (c.name, im) for c in categories for im in shot_images[c.name]
        ]
        train_bundle(bundle, pairs, seed=seed, metrics_path=metrics_path)
        for category in categories:
            bank = build_category_bank(bundle, shot_images[category.name])
            _, i_auroc, p_auroc = evaluate_category(bundle, bank, category)
            per_class[category.name] = {"image_auroc": i_auroc, "pixel_auroc": p_auroc}

    return EvalRun(
        k=cfg.k,
        seed=seed,
        categories=[c.name for c in categories],
        image_auroc=float(np.mean([v["image_auroc"] for v in per_class.values()])),
        pixel_auroc=float(np.mean([v["pixel_auroc"] for v in per_class.values()])),
        per_class=per_class,
    )


def summarize_runs(runs) -> dict:
    """Mean +/- std over seeds, per metric and per class."""
    image = np.array([r.image_auroc for r in runs])
    pixel = np.array([r.pixel_auroc for r in runs])
    summary = {
        "n_seeds": len(runs),
        "image_auroc_mean": float(image.mean()),
        "image_auroc_std": float(image.std()),
        "pixel_auroc_mean": float(pixel.mean()),
        "pixel_auroc_std": float(pixel.std()),
    }
    return summary


def write_results(runs, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "results.json").open("w") as fh:
        json.dump(
            {"runs": [r.to_dict() for r in runs], "summary": summarize_runs(runs)},
            fh,
            indent=2,
        )
    with (out_dir / "results.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "k", "category", "image_auroc", "pixel_auroc"])
        for r in runs:
            for name, vals in r.per_class.items():
                writer.writerow(
                    [r.seed, r.k, name, f"{vals['image_auroc']:.6f}", f"{vals['pixel_auroc']:.6f}"]
                )
            writer.writerow([r.seed, r.k, "__mean__", f"{r.image_auroc:.6f}", f"{r.pixel_auroc:.6f}"])


def train_run(cfg: RunConfig, out_dir) -> list:
    """Train with the first configured seed and persist all artifacts.

    Writes checkpoint(s), per-category memory banks, a JSONL loss log and
    the run manifest under ``out_dir``; returns the checkpoint paths.
    """
    from .prompting import save_checkpoint

    seed = cfg.seeds[0]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = cfg.resolved_dataset_root()
    if root is None:
        raise IngestionError(
            "no dataset root: set dataset_root in the config or the "
            "ANOPROMPT_DATA_ROOT environment variable"
        )
    categories = discover_categories(root, cfg.categories)
    rng = np.random.default_rng(seed)
    shot_paths = {c.name: sample_shots(c, cfg.k, rng) for c in categories}
    shot_images = {
        name: [load_image(p) for p in paths] for name, paths in shot_paths.items()
    }
    bank_dir = out_dir / "banks"

    def persist(bundle: ModelBundle, names, ckpt_path: Path):
        extra = {"run_config": cfg.to_dict(), "seed": seed}
        save_checkpoint(ckpt_path, bundle.stack, bundle.decoder, names, extra=extra)
        if cfg.use_memory:
            bank_dir.mkdir(exist_ok=True)
            for name in names:
                bank = build_category_bank(bundle, shot_images[name])
                bank.save(bank_dir / f"{name}.npz")

    checkpoints = []
    if cfg.per_class:
        ckpt_root = out_dir / "checkpoints"
        ckpt_root.mkdir(exist_ok=True)
        for category in categories:
            bundle = build_bundle(cfg, [category.name], init_seed=seed)
            pairs = [(category.name, im) for im in shot_images[category.name]]
            train_bundle(
                bundle,
                pairs,
                seed=seed,
                metrics_path=out_dir / f"metrics_{category.name}.jsonl",
            )
            path = ckpt_root / f"{category.name}.pt"
            persist(bundle, [category.name], path)
            checkpoints.append(path)
    else:
        names = [c.name for c in categories]
        bundle = build_bundle(cfg, names, init_seed=seed)
        pairs = [(c.name, im) for c in categories for im in shot_images[c.name]]
        train_bundle(bundle, pairs, seed=seed, metrics_path=out_dir / "metrics.jsonl")
        path = out_dir / "checkpoint.pt"
        persist(bundle, names, path)
        checkpoints.append(path)
    write_manifest(cfg, [seed], out_dir / "manifest.json")
    return checkpoints


def load_bundle_from_checkpoint(path) -> ModelBundle:
    """Rebuild a full model bundle (backbone included) from a checkpoint."""
    from .prompting import build_text_inputs, load_checkpoint
    from .training import build_backbone

    stack, decoder, header = load_checkpoint(path)
    extra = header.get("extra") or {}
    cfg = RunConfig.from_dict(extra["run_config"])
    class_names = header["class_names"]
    backbone = build_backbone(cfg, class_names)
    text_inputs = build_text_inputs(
        class_names, backbone.tokenizer, stack.n_text_slots, cfg.state_word
    )
    return ModelBundle(backbone, stack, decoder, text_inputs, class_names, cfg)


def _git_revision() -> str | None:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5
        )
        return out.stdout.strip() or None
    except Exception:
        return None


def write_manifest(cfg: RunConfig, seeds, path) -> None:
    """Everything needed to reproduce the run byte-identically."""
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seeds": list(seeds),
        "torch_version": torch.__version__,
        "numpy_version": np.__version__,
        "git_revision": _git_revision(),
    }
    Path(path).write_text(json.dumps(manifest, indent=2))
