"""Optimization of prompt and decoder parameters over simulated anomalies.

One step consumes one source image: its five views are corrupted
independently, every view contributes the pixel, image and alignment
terms, and the view-mean of each group is backpropagated. The backbone
stays frozen throughout; only the prompt stack and decoder receive
gradients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import losses
from .backbone import DualEncoderBackbone, tiny_backbone
from .configs import RunConfig
from .decoder import AnomalyDecoder, pixel_logits, pixel_probabilities
from .errors import ConfigError
from .prompting import PromptStack, TextInputs, build_text_inputs, class_text_features
from .synthesis import TextureBank, simulate_latent_anomaly, simulate_pixel_anomaly
from .views import make_views, normalize_image


@dataclass
class ModelBundle:
    """Backbone + learnable state + tokenized templates for one model."""

    backbone: DualEncoderBackbone
    stack: PromptStack
    decoder: AnomalyDecoder
    text_inputs: TextInputs
    class_names: list
    cfg: RunConfig

    def trainable_parameters(self):
        return list(self.stack.parameters()) + list(self.decoder.parameters())


def build_backbone(cfg: RunConfig, class_names) -> DualEncoderBackbone:
    if cfg.backbone == "tiny":
        words = list(class_names) + [cfg.state_word]
        return tiny_backbone(
            words=words,
            text_dim=cfg.tiny_text_dim,
            vision_dim=cfg.tiny_vision_dim,
            text_layers=cfg.tiny_text_layers,
            vision_layers=cfg.tiny_vision_layers,
            heads=cfg.tiny_heads,
            patch_size=cfg.tiny_patch_size,
            input_resolution=cfg.view_size,
            prompt_depth=cfg.prompt_depth,
            seed=cfg.tiny_backbone_seed,
        )
    from .backbone import load_pretrained_backbone

    if not cfg.weights_path or not cfg.merges_path:
        raise ConfigError(
            "the vit_b16_plus_240 backbone needs weights_path and merges_path "
            "(OpenCLIP-format state dict and BPE merges file)"
        )
    return load_pretrained_backbone(cfg.weights_path, cfg.merges_path)


def build_bundle(cfg: RunConfig, class_names, init_seed: int) -> ModelBundle:
    """Assemble backbone, freshly initialized prompt stack and decoder."""
    backbone = build_backbone(cfg, class_names)
    torch.manual_seed(init_seed)
    stack = PromptStack(
        text_dim=backbone.cfg.text_dim,
        vision_dim=backbone.cfg.vision_dim,
        text_len=cfg.text_len,
        vision_len=cfg.vision_len,
        depth=cfg.prompt_depth,
        n_views=cfg.n_views,
        coupling=cfg.coupling,
        use_view_signal=cfg.use_view_signal,
    )
    decoder = AnomalyDecoder(
        vision_dim=backbone.cfg.vision_dim,
        text_dim=backbone.cfg.text_dim,
        grid=backbone.cfg.patch_grid,
        output_size=(cfg.view_size, cfg.view_size),
    )
    text_inputs = build_text_inputs(
        class_names, backbone.tokenizer, stack.n_text_slots, cfg.state_word
    )
    return ModelBundle(backbone, stack, decoder, text_inputs, list(class_names), cfg)


def build_optimizer(bundle: ModelBundle, total_steps: int):
    cfg = bundle.cfg
    optimizer = torch.optim.SGD(
        [
            {"params": bundle.stack.parameters(), "lr": cfg.lr_prompts},
            {"params": bundle.decoder.parameters(), "lr": cfg.lr_decoder},
        ],
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    warmup = max(1, int(round(total_steps * cfg.warmup_fraction))) if total_steps else 1
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: min(1.0, (step + 1) / warmup)
    )
    return optimizer, scheduler


def _view_losses(bundle: ModelBundle, view, textures, rng, w_pos, w_neg):
    cfg = bundle.cfg
    backbone, stack, decoder = bundle.backbone, bundle.stack, bundle.decoder
    tau = backbone.similarity_temperature
    scale = float(backbone.logit_scale.exp())

    clean = normalize_image(view.image).unsqueeze(0)
    z_pos_b, patches_pos = backbone.encode_image_with_prompts(clean, stack, view.view_index)
    z_pos = z_pos_b[0]

    pixel_terms = []
    z_neg = None
    field = None
    abnormal_map = None
    if cfg.enable_pixel_anomalies:
        synth = simulate_pixel_anomaly(view.image, textures, rng)
        corrupted = normalize_image(synth.image_minus).unsqueeze(0)
        z_neg_b, patches_neg = backbone.encode_image_with_prompts(
            corrupted, stack, view.view_index
        )
        z_neg = z_neg_b[0]
        field = decoder(patches_neg)[0]
        abnormal_map, two_channel = pixel_logits(field, w_pos, w_neg)
        prob = pixel_probabilities(two_channel, scale)
        pixel_terms.append(
            losses.dice_loss(prob, synth.mask, cfg.dice_smooth)
            + losses.focal_loss(prob, synth.mask, cfg.focal_gamma, cfg.focal_alpha)
        )
        align_global = z_neg
    else:
        # latent-only ablation: decode the clean view so the alignment
        # path (and the decoder) still receives a signal
        field = decoder(patches_pos)[0]
        abnormal_map, _ = pixel_logits(field, w_pos, w_neg)
        align_global = z_pos

    z_lat = None
    if cfg.enable_latent_anomalies:
        z_lat = simulate_latent_anomaly(z_pos, rng, cfg.latent_mu, cfg.latent_sigma)

    img_term = losses.image_loss(
        z_pos, z_neg, z_lat, w_pos, w_neg, tau, cfg.latent_smoothing
    )

    align_term = None
    if cfg.alignment == "weighted":
        align_term = losses.alignment_loss(
            abnormal_map, field, align_global, cfg.align_temperature
        )
    elif cfg.alignment == "mean":
        align_term = losses.mean_alignment_loss(field, align_global)

    zero = torch.zeros((), dtype=view.image.dtype)
    return (
        torch.stack(pixel_terms).sum() if pixel_terms else zero,
        img_term,
        align_term if align_term is not None else zero,
    )


def train_bundle(
    bundle: ModelBundle,
    shots,
    seed: int,
    metrics_path=None,
) -> list:
    """Optimize the bundle on (category, image) shot pairs.

    ``shots`` is a list of (category_name, raw image tensor) pairs; one
    step consumes one pair. Returns the per-step loss history.
    """
    cfg = bundle.cfg
    shots = list(shots)
    total_steps = cfg.epochs * len(shots)
    optimizer, scheduler = build_optimizer(bundle, total_steps)
    rng = np.random.default_rng(seed)
    textures = TextureBank(cfg.texture_dir)
    bundle.stack.train()
    bundle.decoder.train()

    history = []
    log_fh = Path(metrics_path).open("w") if metrics_path else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(shots))
            for idx in order:
                _, image = shots[int(idx)]
                batch = make_views(
                    image, "train", base_size=cfg.base_size, view_size=cfg.view_size
                )
                w_pos, w_neg = class_text_features(
                    bundle.backbone, bundle.stack, bundle.text_inputs
                )
                pix, img, align = [], [], []
                for view in batch.views:
                    p, i, a = _view_losses(bundle, view, textures, rng, w_pos, w_neg)
                    pix.append(p)
                    img.append(i)
                    align.append(a)
                breakdown = losses.LossBreakdown(
                    l_pixel=torch.stack(pix).mean(),
                    l_img=torch.stack(img).mean(),
                    l_align=torch.stack(align).mean(),
                )
                lr_used = optimizer.param_groups[0]["lr"]
                optimizer.zero_grad()
                breakdown.l_total.backward()
                optimizer.step()
                scheduler.step()
                record = {
                    "step": step,
                    "epoch": epoch,
                    "lr": lr_used,
                    **breakdown.as_floats(),
                }
                history.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
                step += 1
    finally:
        if log_fh:
            log_fh.close()
    bundle.stack.eval()
    bundle.decoder.eval()
    return history
