"""Latent-space value type shared by the autoencoder, schedules, and samplers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError

ALLOWED_SCALE_FACTORS = (1, 2, 4, 8)


@dataclass
class LatentTensor:
    """Compressed image representation.

    ``data`` has shape (C, h, w) where h = H / f and w = W / f for the
    source image resolution (H, W).
    """

    data: np.ndarray
    f: int = 1

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ShapeError(f"latent data must be (C, h, w), got shape {self.data.shape}")
        if self.f not in ALLOWED_SCALE_FACTORS:
            raise ParameterError(f"scale factor must be one of {ALLOWED_SCALE_FACTORS}, got {self.f}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    @property
    def source_resolution(self) -> tuple[int, int]:
        h, w = self.spatial
        return h * self.f, w * self.f

    def copy(self) -> "LatentTensor":
        return LatentTensor(self.data.copy(), self.f)
