"""Frozen dual-encoder backbone with layer-wise prompt injection.

The encoder is a standard CLIP-style pair (causal text transformer +
vision transformer) written so that its parameter names mirror the
OpenCLIP module tree. Two flavours share the class:

* ``tiny_backbone`` builds a small randomly-initialized instance for
  tests and desk-scale runs (word-level tokenizer);
* ``load_pretrained_backbone`` builds the ViT-B/16+-class configuration
  and loads an OpenCLIP-format state dict from disk (byte-BPE tokenizer).

Prompted forward passes replace a contiguous slot region at each of the
first J layers with fresh learnable blocks; past layer J the slot outputs
propagate untouched. With zero-length prompt blocks the prompted paths
execute the very same tensor ops as the plain ones.
"""

from __future__ import annotations

import hashlib
import warnings
from collections import OrderedDict
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InputError
from .tokenizers import ByteBPETokenizer, WordTokenizer


@dataclass
class BackboneConfig:
    """Dimensions and depths of the frozen dual encoder.

    ``text_dim``/``vision_dim`` are the transformer widths (the shared
    embedding space has width ``text_dim``); ``prompt_depth`` is the
    number of leading layers that receive fresh prompt blocks.
    """

    text_dim: int = 640
    vision_dim: int = 896
    text_layers: int = 12
    vision_layers: int = 12
    text_heads: int = 10
    vision_heads: int = 14
    patch_size: int = 16
    input_resolution: int = 240
    prompt_depth: int = 9
    context_length: int = 77
    vocab_size: int = 49408
    logit_scale_init: float = 4.6052  # exp() ~ 100, the usual trained value
    quick_gelu: bool = False
    name: str = "vit_b16_plus_240"

    def __post_init__(self):
        if self.input_resolution % self.patch_size != 0:
            raise ConfigError(
                f"input_resolution {self.input_resolution} is not a multiple of "
                f"patch_size {self.patch_size}"
            )
        if not (1 <= self.prompt_depth <= min(self.text_layers, self.vision_layers)):
            raise ConfigError(
                f"prompt_depth {self.prompt_depth} must lie in [1, "
                f"{min(self.text_layers, self.vision_layers)}]"
            )

    @property
    def patch_grid(self) -> tuple[int, int]:
        side = self.input_resolution // self.patch_size
        return (side, side)

    @property
    def n_patches(self) -> int:
        h, w = self.patch_grid
        return h * w


class QuickGELU(nn.Module):
    def forward(self, x):
        return x * torch.sigmoid(1.702 * x)


class ResidualAttentionBlock(nn.Module):
    def __init__(self, width: int, heads: int, quick_gelu: bool = False):
        super().__init__()
        self.ln_1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.ln_2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            OrderedDict(
                [
                    ("c_fc", nn.Linear(width, width * 4)),
                    ("gelu", QuickGELU() if quick_gelu else nn.GELU()),
                    ("c_proj", nn.Linear(width * 4, width)),
                ]
            )
        )

    def forward(self, x, attn_mask=None):
        y = self.ln_1(x)
        y = self.attn(y, y, y, need_weights=False, attn_mask=attn_mask)[0]
        x = x + y
        return x + self.mlp(self.ln_2(x))


class Transformer(nn.Module):
    def __init__(self, width: int, layers: int, heads: int, quick_gelu: bool = False):
        super().__init__()
        self.resblocks = nn.ModuleList(
            ResidualAttentionBlock(width, heads, quick_gelu) for _ in range(layers)
        )


class VisionTower(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        w = cfg.vision_dim
        self.conv1 = nn.Conv2d(3, w, cfg.patch_size, cfg.patch_size, bias=False)
        self.class_embedding = nn.Parameter(torch.zeros(w))
        self.positional_embedding = nn.Parameter(torch.zeros(cfg.n_patches + 1, w))
        self.ln_pre = nn.LayerNorm(w)
        self.transformer = Transformer(w, cfg.vision_layers, cfg.vision_heads, cfg.quick_gelu)
        self.ln_post = nn.LayerNorm(w)
        self.proj = nn.Parameter(torch.zeros(w, cfg.text_dim))


class DualEncoderBackbone(nn.Module):
    """Frozen text+vision encoder pair exposing plain and prompted passes."""

    def __init__(self, cfg: BackboneConfig, tokenizer):
        super().__init__()
        self.cfg = cfg
        self.tokenizer = tokenizer
        d = cfg.text_dim
        self.token_embedding = nn.Embedding(cfg.vocab_size, d)
        self.positional_embedding = nn.Parameter(torch.zeros(cfg.context_length, d))
        self.transformer = Transformer(d, cfg.text_layers, cfg.text_heads, cfg.quick_gelu)
        self.ln_final = nn.LayerNorm(d)
        self.text_projection = nn.Parameter(torch.zeros(d, d))
        self.visual = VisionTower(cfg)
        self.logit_scale = nn.Parameter(torch.tensor(float(cfg.logit_scale_init)))
        self._mask_cache: dict = {}

    # -- housekeeping -----------------------------------------------------

    def freeze(self) -> "DualEncoderBackbone":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def parameter_checksum(self) -> str:
        """SHA-256 over all parameter bytes; used to assert frozen weights."""
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    @property
    def similarity_temperature(self) -> float:
        """tau such that logits = cos / tau (CLIP convention)."""
        return float(1.0 / self.logit_scale.exp())

    def _causal_mask(self, length: int, dtype, device):
        key = (length, dtype, device)
        if key not in self._mask_cache:
            mask = torch.full((length, length), float("-inf"), dtype=dtype, device=device)
            self._mask_cache[key] = mask.triu_(1)
        return self._mask_cache[key]

    def _check_stack(self, stack):
        if stack.text_dim != self.cfg.text_dim or stack.vision_dim != self.cfg.vision_dim:
            raise ConfigError(
                f"prompt block dims ({stack.text_dim}, {stack.vision_dim}) do not match "
                f"backbone dims ({self.cfg.text_dim}, {self.cfg.vision_dim})"
            )
        if stack.depth > min(self.cfg.text_layers, self.cfg.vision_layers):
            raise ConfigError(
                f"prompt depth {stack.depth} exceeds backbone depth "
                f"{min(self.cfg.text_layers, self.cfg.vision_layers)}"
            )

    # -- plain (prompt-free) passes ---------------------------------------
    # These are kept as independent implementations so identity checks
    # against the prompted paths are meaningful.

    def encode_text(self, token_ids: torch.Tensor) -> torch.Tensor:
        x = self.token_embedding(token_ids) + self.positional_embedding[: token_ids.shape[1]]
        mask = self._causal_mask(x.shape[1], x.dtype, x.device)
        for block in self.transformer.resblocks:
            x = block(x, attn_mask=mask)
        x = self.ln_final(x)
        eot = token_ids.argmax(dim=-1)
        feats = x[torch.arange(x.shape[0]), eot] @ self.text_projection
        return F.normalize(feats, dim=-1)

    def encode_image(self, images: torch.Tensor):
        x = self._embed_patches(images)
        for block in self.visual.transformer.resblocks:
            x = block(x)
        x = self.visual.ln_post(x)
        cls = F.normalize(x[:, 0] @ self.visual.proj, dim=-1)
        return cls, x[:, 1:]

    def _embed_patches(self, images: torch.Tensor) -> torch.Tensor:
        v = self.visual
        b = images.shape[0]
        x = v.conv1(images).flatten(2).transpose(1, 2)  # (B, n, d_v)
        cls = v.class_embedding.to(x.dtype).expand(b, 1, -1)
        x = torch.cat([cls, x], dim=1) + v.positional_embedding
        return v.ln_pre(x)

    # -- prompted passes ---------------------------------------------------

    def encode_text_with_prompts(self, token_ids: torch.Tensor, stack) -> torch.Tensor:
        """Forward text tokens with deep prompt blocks; returns unit features.

        ``token_ids`` must have been tokenized with ``stack.n_text_slots``
        placeholder positions directly after the start token.
        """
        self._check_stack(stack)
        n_slots = stack.n_text_slots
        if n_slots:
            slot_ids = token_ids[:, 1 : 1 + n_slots]
            if not bool((slot_ids == self.tokenizer.slot_id).all()):
                raise InputError(
                    "token sequence does not carry the expected "
                    f"{n_slots} prompt-slot placeholders after the start token"
                )
        x = self.token_embedding(token_ids) + self.positional_embedding[: token_ids.shape[1]]
        mask = self._causal_mask(x.shape[1], x.dtype, x.device)
        b = x.shape[0]
        for j, block in enumerate(self.transformer.resblocks):
            if n_slots and j < stack.depth:
                text_block, _ = stack.couple_layer(j + 1)
                text_block = text_block.to(x.dtype).unsqueeze(0).expand(b, -1, -1)
                x = torch.cat([x[:, :1], text_block, x[:, 1 + n_slots :]], dim=1)
            x = block(x, attn_mask=mask)
        x = self.ln_final(x)
        eot = token_ids.argmax(dim=-1)
        feats = x[torch.arange(b), eot] @ self.text_projection
        return F.normalize(feats, dim=-1)

    def encode_image_with_prompts(
        self,
        images: torch.Tensor,
        stack,
        view_index: int,
        capture_layers=None,
    ):
        """Prompted vision pass conditioned on one multi-view signal row.

        Returns ``(cls_feature, patch_features)`` where the CLS feature is
        projected into the shared space and normalized and patch features
        are the final-layer tokens (post-norm, width ``vision_dim``) with
        prompt slots stripped. With ``capture_layers`` a dict of raw
        per-layer patch tokens (1-based layer index) is returned as third
        element.
        """
        self._check_stack(stack)
        stack.check_view_index(view_index)
        n_slots = stack.n_vision_slots
        x = self._embed_patches(images)
        b = x.shape[0]
        captured = {}
        capture = set(capture_layers or ())
        for j, block in enumerate(self.visual.transformer.resblocks):
            if n_slots and j < stack.depth:
                vision_block = stack.vision_layer_block(j + 1, view_index)
                vision_block = vision_block.to(x.dtype).unsqueeze(0).expand(b, -1, -1)
                if j == 0:
                    x = torch.cat([x[:, :1], vision_block, x[:, 1:]], dim=1)
                else:
                    x = torch.cat([x[:, :1], vision_block, x[:, 1 + n_slots :]], dim=1)
            x = block(x)
            if (j + 1) in capture:
                captured[j + 1] = x[:, 1 + (n_slots if stack.depth >= 1 else 0) :]
        strip = n_slots if stack.depth >= 1 else 0
        x = self.visual.ln_post(x)
        cls = F.normalize(x[:, 0] @ self.visual.proj, dim=-1)
        patches = x[:, 1 + strip :]
        if capture_layers is not None:
            return cls, patches, captured
        return cls, patches

    def extract_intermediate_patches(
        self, images: torch.Tensor, layers, stack=None, view_index: int | None = None
    ) -> torch.Tensor:
        """Layer-averaged, L2-normalized patch tokens on the patch grid.

        ``layers`` are 1-based vision layer indices; tokens from the listed
        layers are averaged per location, then normalized. When ``stack``
        is given the extraction happens inside the prompted forward
        (whole-image view by default), otherwise the plain pass is used.
        """
        layers = list(layers)
        if not layers:
            raise InputError("layer list for patch extraction is empty")
        bad = [l for l in layers if not (1 <= l <= self.cfg.vision_layers)]
        if bad:
            raise InputError(
                f"vision layer indices {bad} out of range [1, {self.cfg.vision_layers}]"
            )
        capture = set(layers)
        if stack is not None:
            if view_index is None:
                view_index = stack.n_views + 1
            _, _, captured = self.encode_image_with_prompts(
                images, stack, view_index, capture_layers=capture
            )
        else:
            captured = {}
            x = self._embed_patches(images)
            for j, block in enumerate(self.visual.transformer.resblocks):
                x = block(x)
                if (j + 1) in capture:
                    captured[j + 1] = x[:, 1:]
        stacked = torch.stack([captured[l] for l in layers], dim=0)
        mean = F.normalize(stacked.mean(dim=0), dim=-1)
        h, w = self.cfg.patch_grid
        return mean.reshape(mean.shape[0], h, w, self.cfg.vision_dim)


# -- builders ---------------------------------------------------------------


def _init_clip_style(model: DualEncoderBackbone, seed: int) -> None:
    cfg = model.cfg
    gen = torch.Generator().manual_seed(seed)

    def normal_(t, std):
        with torch.no_grad():
            t.copy_(torch.randn(t.shape, generator=gen) * std)

    normal_(model.token_embedding.weight, 0.02)
    normal_(model.positional_embedding, 0.01)
    normal_(model.text_projection, cfg.text_dim**-0.5)
    v = model.visual
    normal_(v.conv1.weight, (3 * cfg.patch_size**2) ** -0.5)
    normal_(v.class_embedding, cfg.vision_dim**-0.5)
    normal_(v.positional_embedding, 0.01)
    normal_(v.proj, cfg.vision_dim**-0.5)
    for tower, width in ((model.transformer, cfg.text_dim), (v.transformer, cfg.vision_dim)):
        proj_std = (width**-0.5) * ((2 * len(tower.resblocks)) ** -0.5)
        for block in tower.resblocks:
            normal_(block.attn.in_proj_weight, width**-0.5)
            normal_(block.attn.out_proj.weight, proj_std)
            normal_(block.mlp.c_fc.weight, (2 * width) ** -0.5)
            normal_(block.mlp.c_proj.weight, proj_std)
            # zero the biases the constructors drew from the global RNG so
            # construction is a pure function of the seed
            with torch.no_grad():
                block.mlp.c_fc.bias.zero_()
                block.mlp.c_proj.bias.zero_()


DEFAULT_TINY_WORDS = ("abnormal",)


def tiny_backbone(
    words=DEFAULT_TINY_WORDS,
    text_dim: int = 48,
    vision_dim: int = 64,
    text_layers: int = 3,
    vision_layers: int = 4,
    heads: int = 4,
    patch_size: int = 8,
    input_resolution: int = 64,
    prompt_depth: int = 2,
    context_length: int = 32,
    logit_scale_init: float = 4.6052,  # exp() ~ 100, same convention as reference
    seed: int = 0,
) -> DualEncoderBackbone:
    """Small frozen random backbone for tests and desk-scale experiments.

    ``words`` is the closed vocabulary (class names and state words,
    whitespace-split) the word-level tokenizer will accept.
    """
    tokenizer = WordTokenizer(words, context_length=context_length)
    cfg = BackboneConfig(
        text_dim=text_dim,
        vision_dim=vision_dim,
        text_layers=text_layers,
        vision_layers=vision_layers,
        text_heads=heads,
        vision_heads=heads,
        patch_size=patch_size,
        input_resolution=input_resolution,
        prompt_depth=prompt_depth,
        context_length=context_length,
        vocab_size=tokenizer.vocab_size,
        logit_scale_init=logit_scale_init,
        name="tiny",
    )
    model = DualEncoderBackbone(cfg, tokenizer)
    _init_clip_style(model, seed)
    return model.freeze()


def load_pretrained_backbone(
    weights_path: str,
    merges_path: str,
    cfg: BackboneConfig | None = None,
) -> DualEncoderBackbone:
    """Build the reference ViT-B/16+-class encoder and load real weights.

    ``weights_path`` is an OpenCLIP-format state dict (``torch.save`` of
    parameter tensors under the standard module names); ``merges_path``
    the CLIP BPE merges file. Raises ``ConfigError`` when the file does
    not cover the expected parameter tree.
    """
    cfg = cfg or BackboneConfig()
    tokenizer = ByteBPETokenizer(merges_path, context_length=cfg.context_length)
    model = DualEncoderBackbone(cfg, tokenizer)
    state = torch.load(weights_path, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    state = {k.removeprefix("module."): v for k, v in state.items()}
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing:
        raise ConfigError(
            f"checkpoint {weights_path} is missing parameters: {sorted(missing)[:8]} ..."
        )
    if unexpected:
        # OpenCLIP dicts may carry extra buffers (e.g. a stored attn_mask)
        warnings.warn(f"ignoring {len(unexpected)} unused checkpoint entries", stacklevel=2)
    return model.freeze()
