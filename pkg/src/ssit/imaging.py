"""Small image primitives shared by saliency and augmentation."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

LUMA = np.array([0.299, 0.587, 0.114])


def to_gray(image: np.ndarray) -> np.ndarray:
    """H×W or H×W×C float image -> H×W float64 intensity."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim != 3:
        raise ValueError(f"expected H×W or H×W×C image, got shape {img.shape}")
    if img.shape[2] == 1:
        return img[..., 0]
    if img.shape[2] >= 3:
        return img[..., :3] @ LUMA
    return img.mean(axis=2)


def bilinear_sample(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample `image` bilinearly at fractional coordinates, edge-clamped.

    Pixel (i, j) has its center at (i, j). Channels (trailing axis) are sampled independently.
    """
    img = np.asarray(image, dtype=np.float64)
    coords = np.stack([ys, xs])
    if img.ndim == 2:
        return ndimage.map_coordinates(img, coords, order=1, mode="nearest")
    return np.stack(
        [ndimage.map_coordinates(img[..., c], coords, order=1, mode="nearest") for c in range(img.shape[2])],
        axis=-1,
    )


def resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize with half-pixel-center alignment, edge-clamped sampling."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    oh, ow = size
    if (oh, ow) == (h, w):
        return img.copy()
    ys = np.clip((np.arange(oh) + 0.5) * (h / oh) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(ow) + 0.5) * (w / ow) - 0.5, 0, w - 1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(img, yy, xx)


def gaussian_kernel1d(sigma: float, radius: int | None = None) -> np.ndarray:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(3.0 * sigma)) if radius is None else radius
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur over the two spatial axes, reflect padding."""
    img = np.asarray(image, dtype=np.float64)
    k = gaussian_kernel1d(sigma)
    out = ndimage.convolve1d(img, k, axis=0, mode="reflect")
    return ndimage.convolve1d(out, k, axis=1, mode="reflect")


def integral_image(gray: np.ndarray) -> np.ndarray:
    """Zero-padded summed-area table: S[i, j] = sum(gray[:i, :j]) in float64."""
    s = np.zeros((gray.shape[0] + 1, gray.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(np.asarray(gray, dtype=np.float64), axis=0), axis=1, out=s[1:, 1:])
    return s


def box_mean(gray: np.ndarray, radius: int, table: np.ndarray | None = None) -> np.ndarray:
    """Mean over the (2r+1)² window around each pixel, clipped at the borders."""
    h, w = gray.shape
    s = integral_image(gray) if table is None else table
    i = np.arange(h)
    j = np.arange(w)
    top = np.clip(i - radius, 0, h)[:, None]
    bot = np.clip(i + radius + 1, 0, h)[:, None]
    left = np.clip(j - radius, 0, w)[None, :]
    right = np.clip(j + radius + 1, 0, w)[None, :]
    total = s[bot, right] - s[top, right] - s[bot, left] + s[top, left]
    area = (bot - top) * (right - left)
    return total / area
