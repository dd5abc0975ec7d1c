"""Synthetic "blob" scenes: soft colored discs over a vertical ramp.

A scene is resolution-independent (centers and radii live in normalized
coordinates), so the same scene renders consistently at any grid size; that
lets one model train across resolutions.  The condition vector summarizes
the scene as per-color blob counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .grid import LatentGrid, SeededRng

__all__ = ["BlobScene", "ToyDataset", "PALETTE"]

PALETTE = (
    (0.90, 0.20, 0.20),
    (0.20, 0.85, 0.25),
    (0.20, 0.35, 0.95),
    (0.95, 0.85, 0.20),
)

# background ramp keeps the data distribution position-dependent
_RAMP_BASE = 0.10
_RAMP_GAIN = 0.15


@dataclass(frozen=True)
class BlobScene:
    centers: tuple[tuple[float, float], ...]  # (cy, cx) in (0, 1)
    radii: tuple[float, ...]                  # normalized radius
    classes: tuple[int, ...]                  # palette index per blob


class ToyDataset:
    """Sampler for blob scenes rendered as ``(h, w, 3)`` images in [0, 1]."""

    def __init__(self, h: int = 16, w: int = 16, max_blobs: int = 3, palette=PALETTE):
        if max_blobs < 1:
            raise ContractError(f"max_blobs must be >= 1; got {max_blobs}")
        self.h = int(h)
        self.w = int(w)
        self.d = 3
        self.max_blobs = int(max_blobs)
        self.palette = tuple(tuple(float(c) for c in color) for color in palette)

    @property
    def condition_arity(self) -> int:
        return len(self.palette)

    def sample_scene(self, rng: SeededRng) -> BlobScene:
        n = int(rng.integers(1, self.max_blobs + 1))
        centers, radii, classes = [], [], []
        for _ in range(n):
            cy, cx = rng.uniform(0.10, 0.90, size=2)
            centers.append((float(cy), float(cx)))
            radii.append(float(rng.uniform(0.12, 0.30)))
            classes.append(int(rng.integers(0, len(self.palette))))
        return BlobScene(tuple(centers), tuple(radii), tuple(classes))

    def condition(self, scene: BlobScene) -> np.ndarray:
        counts = np.zeros(len(self.palette), dtype=np.float64)
        for c in scene.classes:
            counts[c] += 1.0
        return counts / self.max_blobs

    def render(self, scene: BlobScene, h: int | None = None, w: int | None = None) -> np.ndarray:
        h = self.h if h is None else int(h)
        w = self.w if w is None else int(w)
        yy = (np.arange(h) + 0.5) / h
        xx = (np.arange(w) + 0.5) / w
        img = np.empty((h, w, 3), dtype=np.float64)
        img[:] = (_RAMP_BASE + _RAMP_GAIN * yy)[:, None, None]
        for (cy, cx), radius, cls in zip(scene.centers, scene.radii, scene.classes):
            d2 = (yy[:, None] - cy) ** 2 + (xx[None, :] - cx) ** 2
            sigma = radius / 2.0
            bump = np.exp(-d2 / (2.0 * sigma * sigma))
            img += bump[:, :, None] * np.asarray(self.palette[cls])
        return np.clip(img, 0.0, 1.0)

    def sample(self, rng: SeededRng, h: int | None = None, w: int | None = None):
        """Draw one scene; returns ``(grid at t=1, condition vector)``."""
        scene = self.sample_scene(rng)
        return LatentGrid(self.render(scene, h, w), t=1.0), self.condition(scene)
