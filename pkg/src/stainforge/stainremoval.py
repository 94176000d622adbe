"""Stain removal: colorful image -> grayscale + color-encoding mask (GM).

The GM is the only input the style reconstruction generator ever sees. The
mask marks pixels whose red channel strictly dominates both other channels,
which keeps coarse red/blue cytoplasm information alive through
decolorization. Ties and non-red maxima map to 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imagecore import rgb_to_gray


@dataclass(frozen=True)
class GmImage:
    """Two-channel generator input: luminance plane + binary red-dominance mask."""

    gray: np.ndarray  # (H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) float32 in {0, 1}

    @property
    def height(self) -> int:
        return self.gray.shape[0]

    @property
    def width(self) -> int:
        return self.gray.shape[1]

    def stacked(self) -> np.ndarray:
        """(H, W, 2) array, channel 0 = gray, channel 1 = mask."""
        return np.stack([self.gray, self.mask], axis=-1)


def color_mask(img: np.ndarray) -> np.ndarray:
    """1 where R strictly exceeds both G and B, else 0. Shape (H, W)."""
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    return ((r > g) & (r > b)).astype(np.float32)


def make_gm(img: np.ndarray) -> GmImage:
    """Convert one RGB image into its GM representation."""
    return GmImage(
        gray=rgb_to_gray(img).astype(np.float32),
        mask=color_mask(img),
    )


def gm_batch(images: np.ndarray) -> np.ndarray:
    """Vectorized GM for a stack of images: (B, H, W, 3) -> (B, 2, H, W)."""
    r, g, b = images[..., 0], images[..., 1], images[..., 2]
    gray = np.clip(0.299 * r + 0.587 * g + 0.114 * b, 0.0, 1.0)
    mask = ((r > g) & (r > b)).astype(np.float32)
    return np.stack([gray.astype(np.float32), mask], axis=1)
