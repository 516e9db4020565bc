"""Map fusion and image-level scoring.

Two maps (or a probability and a map maximum) combine by the harmonic
rule a*b/(a+b): either small input vetoes the result. Inputs are clamped
to EPS because the rule is undefined at zero. For a=b the result is a/2,
and in general min/2 <= result <= min.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError

EPS = 1e-6

PROVENANCES = ("decoder", "memory", "fused")


def fuse_maps(a, b):
    """Elementwise harmonic combination of two maps in (0, 1]."""
    a = np.clip(np.asarray(a, dtype=np.float64), EPS, None)
    b = np.clip(np.asarray(b, dtype=np.float64), EPS, None)
    return a * b / (a + b)


def image_score(p_hat: float, anomaly_map) -> float:
    """Harmonic combination of the abnormal probability and the map maximum."""
    m = np.asarray(anomaly_map, dtype=np.float64)
    if m.size == 0:
        raise InputError("anomaly map is empty")
    p = max(float(p_hat), EPS)
    peak = max(float(m.max()), EPS)
    return float(p * peak / (p + peak))


@dataclass
class AnomalyMap:
    values: np.ndarray  # (h, w), strictly positive after clamping
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise InputError(f"provenance must be one of {PROVENANCES}, got {self.provenance!r}")
        self.values = np.clip(np.asarray(self.values, dtype=np.float64), EPS, None)


@dataclass
class ScoreReport:
    image_id: str
    score: float
    fused_map: np.ndarray
    p_hat: float
    map_max: float
    label: int | None = None


def resize_map(values, size) -> np.ndarray:
    """Bilinear upsampling of a (h, w) map to ``size`` = (H, W)."""
    import torch
    import torch.nn.functional as F

    t = torch.as_tensor(np.asarray(values), dtype=torch.float32)[None, None]
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)
    return out[0, 0].numpy().astype(np.float64)


def write_scores_csv(reports, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "label", "score", "p_hat", "map_max"])
        for r in reports:
            writer.writerow(
                [r.image_id, "" if r.label is None else r.label, f"{r.score:.8f}",
                 f"{r.p_hat:.8f}", f"{r.map_max:.8f}"]
            )


def write_heatmap_png16(values, path) -> None:
    """Save a [0, 1] map as a 16-bit grayscale PNG."""
    arr = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 65535.0).round().astype(np.uint16)).save(path)
