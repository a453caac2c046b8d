"""Seeded view generation for the query and key encoders.

Each view is one inverse-mapped warp (crop -> resize -> flips -> rotation)
sampled bilinearly, followed by photometric ops on the image only. The same
warp is applied to the saliency map so the two stay pixel-aligned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .config import ConfigError, ViewSpec
from .imaging import bilinear_sample, gaussian_blur, to_gray


def hflip(image: np.ndarray) -> np.ndarray:
    return np.asarray(image)[:, ::-1].copy()


def vflip(image: np.ndarray) -> np.ndarray:
    return np.asarray(image)[::-1].copy()


def adjust_brightness(image: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(np.asarray(image) * factor, 0.0, 1.0)


def adjust_contrast(image: np.ndarray, factor: float) -> np.ndarray:
    img = np.asarray(image)
    m = to_gray(img).mean()
    return np.clip((img - m) * factor + m, 0.0, 1.0)


def adjust_saturation(image: np.ndarray, factor: float) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 2 or img.shape[2] < 3:
        return img.copy()
    gray = to_gray(img)[..., None]
    return np.clip(gray + (img - gray) * factor, 0.0, 1.0)


def blur(image: np.ndarray, sigma: float) -> np.ndarray:
    return gaussian_blur(image, sigma)


@dataclass(frozen=True)
class Warp:
    """Crop box (top, left, height, width) in source pixels, then flips and rotation of the output."""

    top: float
    left: float
    height: float
    width: float
    hflip: bool = False
    vflip: bool = False
    degrees: float = 0.0

    def area_fraction(self, src_h: int, src_w: int) -> float:
        return self.height * self.width / (src_h * src_w)

    def source_coords(self, out_size: int, src_h: int, src_w: int):
        """Source (y, x) sampled by each output pixel, plus a mask of pixels rotated in from outside."""
        s = out_size
        c = (s - 1) / 2.0
        i, j = np.meshgrid(np.arange(s, dtype=np.float64), np.arange(s, dtype=np.float64), indexing="ij")
        # undo rotation about the output center (counter-clockwise in display coords)
        th = math.radians(self.degrees)
        cos, sin = math.cos(th), math.sin(th)
        di, dj = i - c, j - c
        ii = cos * di + sin * dj + c
        jj = -sin * di + cos * dj + c
        valid = (ii >= -0.5) & (ii <= s - 0.5) & (jj >= -0.5) & (jj <= s - 0.5)
        if self.vflip:
            ii = (s - 1) - ii
        if self.hflip:
            jj = (s - 1) - jj
        ys = self.top + (ii + 0.5) * (self.height / s) - 0.5
        xs = self.left + (jj + 0.5) * (self.width / s) - 0.5
        ys = np.clip(ys, 0.0, src_h - 1)
        xs = np.clip(xs, 0.0, src_w - 1)
        return ys, xs, valid

    def apply(self, image: np.ndarray, out_size: int) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        ys, xs, valid = self.source_coords(out_size, img.shape[0], img.shape[1])
        out = bilinear_sample(img, ys, xs)
        mask = valid if img.ndim == 2 else valid[..., None]
        return out * mask


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate a square image about its center, bilinear, zero padding."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    if h != w:
        raise ValueError(f"rotate expects a square image, got {h}×{w}")
    return Warp(0.0, 0.0, float(h), float(w), degrees=degrees).apply(img, h)


def sample_warp(rng: np.random.Generator, spec: ViewSpec, src_h: int, src_w: int) -> Warp:
    lo, hi = spec.crop_scale
    if not 0.0 < lo <= hi <= 1.0:
        raise ConfigError(f"crop_scale range must satisfy 0 < lo <= hi <= 1, got {spec.crop_scale}")
    area = src_h * src_w * rng.uniform(lo, hi)
    log_r = rng.uniform(math.log(spec.crop_ratio[0]), math.log(spec.crop_ratio[1]))
    ratio = math.exp(log_r)
    w = math.sqrt(area * ratio)
    h = math.sqrt(area / ratio)
    # clamp to the image, keeping the sampled area exact
    if w > src_w:
        w = float(src_w)
        h = area / w
    if h > src_h:
        h = float(src_h)
        w = area / h
    top = rng.uniform(0.0, src_h - h)
    left = rng.uniform(0.0, src_w - w)
    flip_h = rng.random() < spec.hflip_prob
    flip_v = rng.random() < spec.vflip_prob
    degrees = 0.0
    if rng.random() < spec.rotation_prob:
        degrees = rng.uniform(-spec.rotation_degrees, spec.rotation_degrees)
    return Warp(top, left, h, w, flip_h, flip_v, degrees)


def photometric(image: np.ndarray, rng: np.random.Generator, spec: ViewSpec) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    # draws are made unconditionally so the stream does not depend on outcomes
    do_jitter = rng.random() < spec.jitter_prob
    factors = rng.uniform(-1.0, 1.0, size=3) * np.array([spec.brightness, spec.contrast, spec.saturation]) + 1.0
    do_blur = rng.random() < spec.blur_prob
    sigma = rng.uniform(*spec.blur_sigma)
    if do_jitter:
        img = adjust_brightness(img, factors[0])
        img = adjust_contrast(img, factors[1])
        img = adjust_saturation(img, factors[2])
    if do_blur:
        img = blur(img, sigma)
    return np.clip(img, 0.0, 1.0)


class Views(NamedTuple):
    query: np.ndarray
    key: np.ndarray
    key_saliency: np.ndarray
    query_saliency: np.ndarray


def make_rng(seed) -> np.random.Generator:
    """Generator from an int or a tuple such as (global_seed, epoch, sample_index)."""
    if isinstance(seed, (tuple, list)):
        return np.random.default_rng(np.random.SeedSequence([int(s) for s in seed]))
    return np.random.default_rng(np.random.SeedSequence(int(seed)))


def make_views(image, saliency, q_spec: ViewSpec, k_spec: ViewSpec, seed, out_size: int = 64) -> Views:
    img = np.asarray(image, dtype=np.float64)
    sal = np.asarray(saliency, dtype=np.float64)
    if img.shape[:2] != sal.shape:
        raise ValueError(f"image {img.shape[:2]} and saliency {sal.shape} dimensions differ")
    q_spec.validate("query")
    k_spec.validate("key")
    rng = make_rng(seed)
    h, w = sal.shape
    q_warp = sample_warp(rng, q_spec, h, w)
    k_warp = sample_warp(rng, k_spec, h, w)
    # the map rides along as an extra channel so it sees exactly the image's warp
    stacked = np.concatenate([img if img.ndim == 3 else img[..., None], sal[..., None]], axis=2)
    q_all = q_warp.apply(stacked, out_size)
    k_all = k_warp.apply(stacked, out_size)
    query = photometric(q_all[..., :-1], rng, q_spec)
    key = photometric(k_all[..., :-1], rng, k_spec)
    return Views(
        query=query.astype(np.float32),
        key=key.astype(np.float32),
        key_saliency=np.clip(k_all[..., -1], 0.0, 1.0).astype(np.float32),
        query_saliency=np.clip(q_all[..., -1], 0.0, 1.0).astype(np.float32),
    )
