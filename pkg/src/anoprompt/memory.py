"""Visual memory of reference patch features and its anomaly map query.

The bank stores L2-normalized, layer-averaged patch features from the k
normal shots (one prompted forward per shot). A query scores each grid
location as half the minimum cosine distance to any stored row, so scores
live in [0, 1] for unit-norm inputs.
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import ConfigError, StateError


class MemoryBank:
    def __init__(self, rows: torch.Tensor, layers, shots: int, grid):
        if rows.ndim != 2:
            raise ConfigError(f"bank rows must be 2D, got shape {tuple(rows.shape)}")
        self.rows = rows
        self.layers = list(layers)
        self.shots = shots
        self.grid = tuple(grid)

    def __len__(self) -> int:
        return self.rows.shape[0]

    @classmethod
    def build(
        cls,
        backbone,
        images: torch.Tensor,
        layers,
        stack=None,
        view_index: int | None = None,
    ) -> "MemoryBank":
        """Fill the bank from k reference images (k = images.shape[0]).

        With ``stack`` the features come from the prompted forward pass
        (the default inference-pipeline behaviour); passing ``stack=None``
        is the pre-prompt variant.
        """
        if images.ndim != 4 or images.shape[0] < 1:
            raise ConfigError(
                f"need a (k>=1, 3, H, W) reference batch, got {tuple(images.shape)}"
            )
        with torch.no_grad():
            feats = backbone.extract_intermediate_patches(
                images, layers, stack=stack, view_index=view_index
            )
        k, h, w, d = feats.shape
        return cls(feats.reshape(k * h * w, d), layers, k, (h, w))

    def query(self, features: torch.Tensor) -> torch.Tensor:
        """Min cosine half-distance map for (h, w, d) or (B, h, w, d) features."""
        if len(self) == 0:
            raise StateError("memory bank is empty; build it before querying")
        squeeze = features.ndim == 3
        if squeeze:
            features = features.unsqueeze(0)
        b, h, w, d = features.shape
        sims = features.reshape(-1, d) @ self.rows.T
        dist = 0.5 * (1.0 - sims.max(dim=1).values)
        out = dist.reshape(b, h, w)
        return out[0] if squeeze else out

    # -- persistence (npz: row-major float32 rows + dims header) -------------

    def save(self, path) -> None:
        np.savez(
            path,
            rows=self.rows.detach().cpu().numpy().astype(np.float32),
            layers=np.asarray(self.layers, dtype=np.int64),
            shots=np.asarray([self.shots], dtype=np.int64),
            grid=np.asarray(self.grid, dtype=np.int64),
        )

    @classmethod
    def load(cls, path) -> "MemoryBank":
        with np.load(path) as blob:
            return cls(
                torch.from_numpy(blob["rows"]),
                blob["layers"].tolist(),
                int(blob["shots"][0]),
                tuple(blob["grid"].tolist()),
            )
