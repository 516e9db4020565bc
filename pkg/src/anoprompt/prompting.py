"""Learnable prompt state: deep context blocks, cross-modal coupling, view signal.

All trainable prompt parameters live in :class:`PromptStack`. Per layer j
the coupled blocks are

    text block   = [ P_t[j] ; proj_v->t(P_v[j]) ]           (C_t + C_v rows)
    vision block = [ c_i ; P_v[j] ; proj_t->v(P_t[j]) ]     (1 + C_v + C_t rows)

where c_i is the multi-view signal row matched to the current view. The
cross projections are shared across layers and can be masked per coupling
mode to reproduce the one-directional / independent ablations.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InputError

COUPLING_MODES = ("bidirectional", "text_to_image", "image_to_text", "independent")


class PromptStack(nn.Module):
    """All learnable prompt state for one model.

    Args:
        text_dim / vision_dim: backbone widths.
        text_len / vision_len: context lengths C_t and C_v.
        depth: number of prompted layers J.
        n_views: N sub-crops; the signal table holds N+1 rows, the last
            one standing for the whole image.
        coupling: one of ``COUPLING_MODES``; non-bidirectional modes zero
            the corresponding cross projection (block shapes unchanged).
        use_view_signal: drop the signal row entirely when False.
    """

    def __init__(
        self,
        text_dim: int,
        vision_dim: int,
        text_len: int = 3,
        vision_len: int = 3,
        depth: int = 9,
        n_views: int = 4,
        coupling: str = "bidirectional",
        use_view_signal: bool = True,
        init_std: float = 0.02,
    ):
        super().__init__()
        if depth < 1:
            raise ConfigError(f"prompt depth must be >= 1, got {depth}")
        if text_len < 0 or vision_len < 0:
            raise ConfigError("context lengths cannot be negative")
        if coupling not in COUPLING_MODES:
            raise ConfigError(f"coupling must be one of {COUPLING_MODES}, got {coupling!r}")
        self.text_dim = text_dim
        self.vision_dim = vision_dim
        self.text_len = text_len
        self.vision_len = vision_len
        self.depth = depth
        self.n_views = n_views
        self.coupling = coupling
        self.use_view_signal = use_view_signal

        self.text_ctx = nn.Parameter(torch.randn(depth, text_len, text_dim) * init_std)
        self.vision_ctx = nn.Parameter(torch.randn(depth, vision_len, vision_dim) * init_std)
        self.text_to_vision = nn.Linear(text_dim, vision_dim)
        self.vision_to_text = nn.Linear(vision_dim, text_dim)
        # small-normal weights and zero bias keep the cross rows at the same
        # scale as the contexts; default bias init would inject rows that
        # drown the frozen encoder's token statistics
        for proj in (self.text_to_vision, self.vision_to_text):
            nn.init.normal_(proj.weight, std=init_std)
            nn.init.zeros_(proj.bias)
        self.view_signal = nn.Parameter(torch.randn(n_views + 1, vision_dim) * init_std)

    # -- shapes ------------------------------------------------------------

    @property
    def n_text_slots(self) -> int:
        return self.text_len + self.vision_len

    @property
    def n_vision_slots(self) -> int:
        return self.vision_len + self.text_len + (1 if self.use_view_signal else 0)

    def check_view_index(self, view_index: int) -> None:
        if not (1 <= view_index <= self.n_views + 1):
            raise InputError(
                f"view_index {view_index} out of range [1, {self.n_views + 1}]"
            )

    # -- block assembly ------------------------------------------------------

    def couple_layer(self, j: int):
        """Coupled (text_block, vision_block) for 1-based layer j (no signal)."""
        if not (1 <= j <= self.depth):
            raise InputError(f"layer index {j} out of range [1, {self.depth}]")
        t = self.text_ctx[j - 1]
        v = self.vision_ctx[j - 1]
        m_v2t = 1.0 if self.coupling in ("bidirectional", "image_to_text") else 0.0
        m_t2v = 1.0 if self.coupling in ("bidirectional", "text_to_image") else 0.0
        text_block = torch.cat([t, self.vision_to_text(v) * m_v2t], dim=0)
        vision_block = torch.cat([v, self.text_to_vision(t) * m_t2v], dim=0)
        return text_block, vision_block

    def attach_view_signal(self, vision_block: torch.Tensor, view_index: int) -> torch.Tensor:
        """Prepend exactly the matched signal row (no-op when disabled)."""
        self.check_view_index(view_index)
        if not self.use_view_signal:
            return vision_block
        row = self.view_signal[view_index - 1 : view_index]
        return torch.cat([row, vision_block], dim=0)

    def vision_layer_block(self, j: int, view_index: int) -> torch.Tensor:
        return self.attach_view_signal(self.couple_layer(j)[1], view_index)


@dataclass
class TextInputs:
    """Tokenized normal/abnormal template pair per class."""

    class_names: list
    normal_tokens: torch.Tensor  # (K, context_length)
    abnormal_tokens: torch.Tensor

    def tokens(self, branch: str) -> torch.Tensor:
        if branch == "normal":
            return self.normal_tokens
        if branch == "abnormal":
            return self.abnormal_tokens
        raise InputError(f"branch must be 'normal' or 'abnormal', got {branch!r}")


def build_text_inputs(
    class_names,
    tokenizer,
    n_slots: int,
    state_word: str = "abnormal",
) -> TextInputs:
    """Tokenize the "<class>" / "<state> <class>" template pair per class.

    ``n_slots`` placeholder positions (the stack's ``n_text_slots``) are
    reserved after the start token for the learnable blocks.
    """
    class_names = list(class_names)
    if not class_names:
        raise InputError("class_names must be non-empty")
    normal = tokenizer.tokenize(class_names, n_slots=n_slots)
    abnormal = tokenizer.tokenize(
        [f"{state_word} {name}" for name in class_names], n_slots=n_slots
    )
    return TextInputs(class_names, normal, abnormal)


def class_text_features(backbone, stack: PromptStack, text_inputs: TextInputs):
    """Class-averaged (normal, abnormal) text features, re-normalized.

    Per-class features come from the prompted text pass; the average over
    classes is normalized again so downstream similarities stay cosines.
    """
    w_pos = backbone.encode_text_with_prompts(text_inputs.normal_tokens, stack)
    w_neg = backbone.encode_text_with_prompts(text_inputs.abnormal_tokens, stack)
    return (
        F.normalize(w_pos.mean(dim=0), dim=-1),
        F.normalize(w_neg.mean(dim=0), dim=-1),
    )


# -- checkpointing -----------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, stack: PromptStack, decoder, class_names, extra=None) -> None:
    """Single-file checkpoint: config header + prompt and decoder tensors."""
    header = {
        "version": CHECKPOINT_VERSION,
        "text_dim": stack.text_dim,
        "vision_dim": stack.vision_dim,
        "text_len": stack.text_len,
        "vision_len": stack.vision_len,
        "depth": stack.depth,
        "n_views": stack.n_views,
        "coupling": stack.coupling,
        "use_view_signal": stack.use_view_signal,
        "class_names": list(class_names),
        "decoder": decoder.config_header(),
    }
    if extra:
        header["extra"] = extra
    torch.save(
        {"header": header, "stack": stack.state_dict(), "decoder": decoder.state_dict()},
        path,
    )


def load_checkpoint(path):
    """Rebuild (stack, decoder, header) from :func:`save_checkpoint` output."""
    from .decoder import AnomalyDecoder

    blob = torch.load(path, map_location="cpu", weights_only=True)
    header = blob["header"]
    if header.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version in {path}: {header.get('version')}")
    stack = PromptStack(
        text_dim=header["text_dim"],
        vision_dim=header["vision_dim"],
        text_len=header["text_len"],
        vision_len=header["vision_len"],
        depth=header["depth"],
        n_views=header["n_views"],
        coupling=header["coupling"],
        use_view_signal=header["use_view_signal"],
    )
    stack.load_state_dict(blob["stack"])
    decoder = AnomalyDecoder.from_config_header(header["decoder"])
    decoder.load_state_dict(blob["decoder"])
    return stack, decoder, header
