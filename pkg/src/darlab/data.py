"""Procedural 8x8 class-conditional blob images, patchified into tokens."""
from __future__ import annotations

import numpy as np

IMAGE = 8
PATCH = 2

# blob centre (row, col) per class, cycled for larger label counts
_CENTRES = [(2.0, 2.0), (2.0, 5.0), (5.0, 2.0), (5.0, 5.0), (3.5, 3.5), (1.5, 3.5), (5.5, 3.5), (3.5, 1.5)]


def blob_images(rng: np.random.Generator, labels: np.ndarray) -> np.ndarray:
    """Unnormalized images (n, 8, 8): a jittered Gaussian blob per class plus faint noise."""
    n = labels.shape[0]
    rr, cc = np.meshgrid(np.arange(IMAGE), np.arange(IMAGE), indexing="ij")
    centres = np.array([_CENTRES[c % len(_CENTRES)] for c in labels], dtype=np.float64).reshape(n, 2)
    centres = centres + rng.normal(0.0, 0.5, size=(n, 2))
    width = rng.uniform(0.9, 1.6, size=(n, 1, 1))
    amp = rng.uniform(0.8, 1.2, size=(n, 1, 1))
    dist2 = (rr[None] - centres[:, 0, None, None]) ** 2 + (cc[None] - centres[:, 1, None, None]) ** 2
    img = amp * np.exp(-dist2 / (2 * width ** 2))
    return img + 0.05 * rng.standard_normal(img.shape)


def patchify(images: np.ndarray, patch: int = PATCH) -> np.ndarray:
    """(n, H, W) -> (n, H/p * W/p, p*p), row-major patch order."""
    n, H, W = images.shape
    x = images.reshape(n, H // patch, patch, W // patch, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(n, (H // patch) * (W // patch), patch * patch)


def unpatchify(tokens: np.ndarray, patch: int = PATCH, size: int = IMAGE) -> np.ndarray:
    n = tokens.shape[0]
    g = size // patch
    x = tokens.reshape(n, g, g, patch, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(n, size, size)


def make_dataset(seed: int, n: int, n_classes: int = 4, dtype=np.float32):
    """Returns (tokens (n, 16, 4), labels (n,)) normalized to zero mean, unit variance."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_classes, size=n)
    tokens = patchify(blob_images(rng, labels))
    tokens = (tokens - tokens.mean()) / tokens.std()
    return tokens.astype(dtype), labels.astype(np.int64)
