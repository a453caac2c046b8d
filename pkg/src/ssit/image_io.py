"""PNG / PGM / PPM reading and writing for float images in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .numerics.serialize import atomic_write

SUPPORTED = (".png", ".pgm", ".ppm")


class ImageReadError(OSError):
    pass


def read_image(path) -> np.ndarray:
    """H×W×C float64 in [0, 1] (C = 1 for grayscale, 3 for color)."""
    path = Path(path)
    if path.suffix.lower() not in SUPPORTED:
        raise ImageReadError(f"{path}: unsupported image type (expected PNG, PGM or PPM)")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            elif im.mode in ("L", "1", "P", "LA"):
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise ImageReadError(f"{path}: cannot read image: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255).astype(np.uint8)


def encode_pnm(values: np.ndarray) -> bytes:
    """Binary PGM for 2-D / single-channel input, PPM for 3-channel."""
    pix = to_uint8(values)
    if pix.ndim == 3 and pix.shape[2] == 1:
        pix = pix[..., 0]
    h, w = pix.shape[:2]
    magic = "P5" if pix.ndim == 2 else "P6"
    return f"{magic}\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def write_image(path, values: np.ndarray) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm"):
        atomic_write(path, encode_pnm(values))
        return
    if suffix != ".png":
        raise ValueError(f"{path}: unsupported output type")
    pix = to_uint8(values)
    if pix.ndim == 3 and pix.shape[2] == 1:
        pix = pix[..., 0]
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    Image.fromarray(pix).save(tmp, format="PNG")
    tmp.replace(path)
