"""Few-shot visual anomaly detection with coupled multi-modal deep prompts.

A frozen CLIP-style dual encoder is adapted through learnable textual and
visual context blocks that communicate through shared cross projections,
trained only on simulated anomalies. Localization comes from a light
three-convolution decoder over patch tokens; inference fuses the decoder
map with a nearest-neighbor visual memory of the few normal shots.
"""

from .backbone import BackboneConfig, DualEncoderBackbone, load_pretrained_backbone, tiny_backbone
from .configs import RunConfig, tiny_run_config
from .decoder import AnomalyDecoder, pixel_logits, pixel_probabilities
from .episodes import EvalRun, run_episode
from .losses import (
    LossBreakdown,
    alignment_loss,
    dice_loss,
    focal_loss,
    image_loss,
    image_probability,
)
from .memory import MemoryBank
from .metrics import auroc, pixel_auroc
from .prompting import PromptStack, build_text_inputs, class_text_features
from .scoring import AnomalyMap, ScoreReport, fuse_maps, image_score
from .synthesis import (
    SyntheticAnomaly,
    TextureBank,
    perlin_noise,
    simulate_latent_anomaly,
    simulate_pixel_anomaly,
)
from .views import ViewBatch, make_views

__version__ = "0.1.0"

__all__ = [
    "AnomalyDecoder",
    "AnomalyMap",
    "BackboneConfig",
    "DualEncoderBackbone",
    "EvalRun",
    "LossBreakdown",
    "MemoryBank",
    "PromptStack",
    "RunConfig",
    "ScoreReport",
    "SyntheticAnomaly",
    "TextureBank",
    "ViewBatch",
    "alignment_loss",
    "auroc",
    "build_text_inputs",
    "class_text_features",
    "dice_loss",
    "focal_loss",
    "fuse_maps",
    "image_loss",
    "image_probability",
    "image_score",
    "load_pretrained_backbone",
    "make_views",
    "perlin_noise",
    "pixel_auroc",
    "pixel_logits",
    "pixel_probabilities",
    "run_episode",
    "simulate_latent_anomaly",
    "simulate_pixel_anomaly",
    "tiny_backbone",
    "tiny_run_config",
]
