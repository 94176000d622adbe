"""Image representation, color conversions, histograms, and histogram distance.

Images are numpy float arrays of shape (H, W, 3) with values in [0, 1],
channel order R, G, B. All functions here are pure and thread-safe.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from matplotlib import colors as _mpl_colors
from PIL import Image

from .errors import BinMismatchError, EmptySetError, IoError

# ITU-R 601 luma weights. Sum to exactly 1.
GRAY_WEIGHTS = (0.299, 0.587, 0.114)

DEFAULT_HISTOGRAM_BINS = 64


def validate_rgb(img: np.ndarray, divisor: int = 1) -> None:
    """Check the (H, W, 3) layout, the [0, 1] range, and side divisibility."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {img.shape}")
    h, w = img.shape[:2]
    if h < 8 or w < 8:
        raise ValueError(f"image sides must be >= 8, got {h}x{w}")
    if divisor > 1 and (h % divisor or w % divisor):
        raise ValueError(f"image sides {h}x{w} not divisible by {divisor}")
    if float(img.min()) < 0.0 or float(img.max()) > 1.0:
        raise ValueError("image values outside [0, 1]")


def rgb_to_gray(img: np.ndarray) -> np.ndarray:
    """Luma-weighted channel sum, (H, W, 3) -> (H, W), both in [0, 1]."""
    r, g, b = GRAY_WEIGHTS
    gray = r * img[..., 0] + g * img[..., 1] + b * img[..., 2]
    return np.clip(gray, 0.0, 1.0)


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    """RGB -> HSV with H in [0, 1) cyclic, S and V in [0, 1].

    Achromatic pixels get H = 0 by convention.
    """
    hsv = _mpl_colors.rgb_to_hsv(np.asarray(img, dtype=np.float64))
    hsv[..., 0] %= 1.0
    return hsv


def hsv_to_rgb(img: np.ndarray) -> np.ndarray:
    rgb = _mpl_colors.hsv_to_rgb(np.asarray(img, dtype=np.float64))
    return np.clip(rgb, 0.0, 1.0)


@dataclass(frozen=True)
class ChannelHistogram:
    """Per-channel histogram over [0, 1] with unit mass in each channel."""

    bins: int
    mass: np.ndarray  # shape (3, bins), rows sum to 1

    def __post_init__(self):
        if self.mass.shape != (3, self.bins):
            raise ValueError(f"mass shape {self.mass.shape} != (3, {self.bins})")


def channel_histogram(
    images: Iterable[np.ndarray], bins: int = DEFAULT_HISTOGRAM_BINS
) -> ChannelHistogram:
    """Pool pixels of every image in the set into one histogram per channel.

    Bin edges are uniform over [0, 1]; the value 1.0 lands in the last bin.
    """
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    counts = np.zeros((3, bins), dtype=np.float64)
    n_images = 0
    for img in images:
        n_images += 1
        for c in range(3):
            hist, _ = np.histogram(img[..., c], bins=bins, range=(0.0, 1.0))
            counts[c] += hist
    if n_images == 0:
        raise EmptySetError("channel_histogram needs at least one image")
    total = counts.sum(axis=1, keepdims=True)
    return ChannelHistogram(bins=bins, mass=counts / total)


def bhattacharyya(p: ChannelHistogram, q: ChannelHistogram) -> float:
    """Mean over channels of sqrt(1 - BC), in [0, 1]; 0 iff identical.

    The max(0, .) clamp guards against the Bhattacharyya coefficient drifting
    slightly above 1 in floating point.
    """
    if p.bins != q.bins:
        raise BinMismatchError(f"bin counts differ: {p.bins} vs {q.bins}")
    bc = np.sqrt(p.mass * q.mass).sum(axis=1)
    dist = np.sqrt(np.maximum(0.0, 1.0 - bc))
    return float(dist.mean())


def read_png(path: str | Path) -> np.ndarray:
    """8-bit PNG -> float32 RGB image in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return arr / 255.0


def write_png(path: str | Path, img: np.ndarray) -> None:
    """Float image in [0, 1] -> 8-bit PNG. Quantizes by round-half-up."""
    path = Path(path)
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    quantized = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    if quantized.ndim == 2:
        im = Image.fromarray(quantized, mode="L")
    else:
        im = Image.fromarray(quantized, mode="RGB")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        im.save(path, format="PNG")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def to_float(images_u8: np.ndarray) -> np.ndarray:
    """uint8 image or stack of images -> float32 in [0, 1]."""
    return images_u8.astype(np.float32) / 255.0


def quantize_u8(img: np.ndarray) -> np.ndarray:
    """Apply the PNG write quantization without touching disk."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)
