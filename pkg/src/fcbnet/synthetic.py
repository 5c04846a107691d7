"""Synthetic blob-mask imagery for smoke tests and demos."""
from __future__ import annotations

import numpy as np
import torch
from torch.utils.data import TensorDataset


def blob_sample(rng: np.random.Generator, size: int = 64, channels: int = 3, blobs: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """One image with elliptical "weed" blobs brighter than a textured background."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    mask = np.zeros((size, size), dtype=np.int64)
    for _ in range(blobs):
        cy, cx = rng.uniform(0.15, 0.85, 2) * size
        ry, rx = rng.uniform(0.08, 0.2, 2) * size
        mask[((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0] = 1
    base = rng.normal(0.0, 0.3, (channels, size, size)).astype(np.float32)
    offset = rng.uniform(0.8, 1.5, (channels, 1, 1)).astype(np.float32)
    image = base + offset * mask[None].astype(np.float32)
    return image, mask


def blob_dataset(n: int = 8, size: int = 64, channels: int = 3, seed: int = 0) -> TensorDataset:
    rng = np.random.default_rng(seed)
    pairs = [blob_sample(rng, size, channels) for _ in range(n)]
    images = torch.from_numpy(np.stack([p[0] for p in pairs]))
    masks = torch.from_numpy(np.stack([p[1] for p in pairs]))
    return TensorDataset(images, masks)
