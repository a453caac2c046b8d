"""Static saliency detection and salient-patch selection.

Two training-free backends produce a per-pixel saliency field in [0, 1]:
a multi-scale center-surround detector over intensity (the default) and the
spectral-residual detector. Maps are scored per patch by their maximum, and
the lowest-scoring patches are dropped from the momentum encoder's input.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .config import ConfigError
from .imaging import box_mean, gaussian_blur, integral_image, resize_bilinear, to_gray
from .numerics.serialize import atomic_write, tensor_from_bytes, tensor_to_bytes

MIN_SIDE = 8
BACKENDS = ("fine", "spectral")


@dataclass(frozen=True)
class PatchScores:
    grid_h: int
    grid_w: int
    scores: np.ndarray

    def __len__(self) -> int:
        return self.grid_h * self.grid_w


@dataclass(frozen=True)
class KeepSet:
    kept_indices: np.ndarray
    num_patches: int

    def __len__(self) -> int:
        return len(self.kept_indices)


def _check_image(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] < 1):
        raise ValueError(f"image must be H×W or H×W×C with C >= 1, got shape {img.shape}")
    if min(img.shape[:2]) < MIN_SIDE:
        raise ValueError(f"image too small for saliency: {img.shape[:2]}, need min side >= {MIN_SIDE}")
    return img


def normalize(saliency: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; a flat map becomes all zeros."""
    x = np.asarray(saliency, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if not hi > lo:
        return np.zeros_like(x)
    out = (x - lo) / (hi - lo)
    out[x == hi] = 1.0
    return out


def default_radii(height: int, width: int) -> tuple[int, ...]:
    r = max(1, round(min(height, width) / 64))
    return (r, 2 * r, 4 * r, 8 * r)


def fine_grained_saliency(image, radii: tuple[int, ...] | None = None) -> np.ndarray:
    """Center-surround saliency on intensity, summed over surround radii and both polarities."""
    img = _check_image(image)
    gray = to_gray(img)
    radii = default_radii(*gray.shape) if radii is None else tuple(radii)
    table = integral_image(gray)
    total = np.zeros_like(gray)
    for r in radii:
        surround = box_mean(gray, int(r), table)
        diff = gray - surround
        total += np.maximum(diff, 0.0) + np.maximum(-diff, 0.0)
    # differences below float64 noise of the integral table count as no contrast
    scale = max(1.0, float(np.abs(gray).max()))
    total[total < 1e-9 * scale] = 0.0
    return normalize(total)


def spectral_residual_saliency(image, work_size: int = 64, smooth_sigma: float = 2.5,
                               amplitude_floor: float = 1e-2) -> np.ndarray:
    """Spectral residual of the log-amplitude spectrum, computed at `work_size`² and resized back.

    Amplitudes are floored at `amplitude_floor` times the peak before the log:
    exact spectral zeros (common for synthetic shapes) would otherwise dominate
    the residual with values near log(0).
    """
    img = _check_image(image)
    gray = to_gray(img)
    h, w = gray.shape
    small = resize_bilinear(gray, (work_size, work_size))
    if np.ptp(small) <= 1e-12 * max(1.0, float(np.abs(small).max())):
        # flat input has no spectrum beyond DC
        return np.zeros((h, w))
    spectrum = np.fft.fft2(small)
    amp = np.abs(spectrum)
    log_amp = np.log(amp + amplitude_floor * amp.max())
    phase = np.angle(spectrum)
    residual = log_amp - box_mean(log_amp, 1)
    recon = np.fft.ifft2(np.exp(residual + 1j * phase))
    sal = gaussian_blur(np.abs(recon) ** 2, smooth_sigma)
    sal = normalize(sal)
    return np.clip(resize_bilinear(sal, (h, w)), 0.0, 1.0)


def compute_saliency(image, backend: str = "fine", **params) -> np.ndarray:
    if backend == "fine":
        return fine_grained_saliency(image, **params)
    if backend == "spectral":
        return spectral_residual_saliency(image, **params)
    raise ConfigError(f"unknown saliency backend {backend!r}; expected one of {BACKENDS}")


def binarize(saliency: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"binarization threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(saliency) >= threshold).astype(np.float32)


def patch_scores(saliency: np.ndarray, patch_size: int) -> PatchScores:
    """Maximum saliency within each non-overlapping P×P patch, row-major."""
    s = np.asarray(saliency)
    h, w = s.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"saliency map {h}×{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    scores = s.reshape(gh, p, gw, p).max(axis=(1, 3)).reshape(-1)
    return PatchScores(gh, gw, scores)


def num_removed(num_patches: int, masking_ratio: float) -> int:
    """floor(m/100 · N), computed exactly for decimal ratios."""
    if not 0 <= masking_ratio < 100:
        raise ConfigError(f"masking ratio must lie in [0, 100), got {masking_ratio}")
    return math.floor(Fraction(str(masking_ratio)) * num_patches / 100)


def select_salient(scores: PatchScores | np.ndarray, masking_ratio: float) -> KeepSet:
    """Drop the floor(m% · N) lowest-scoring patches.

    Among equal scores the higher patch index is removed first.
    """
    values = scores.scores if isinstance(scores, PatchScores) else np.asarray(scores)
    n = len(values)
    k_remove = num_removed(n, masking_ratio)
    idx = np.arange(n)
    # lexsort: last key is primary -> score ascending, then index descending
    order = np.lexsort((-idx, values))
    removed = order[:k_remove]
    keep = np.ones(n, dtype=bool)
    keep[removed] = False
    return KeepSet(np.flatnonzero(keep), n)


# -- on-disk cache ----------------------------------------------------------

def content_hash(image: np.ndarray) -> str:
    arr = np.ascontiguousarray(image)
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(str(arr.dtype).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def to_pgm_bytes(values: np.ndarray) -> bytes:
    """8-bit binary PGM of a [0, 1] float map."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    pix = np.round(v * 255).astype(np.uint8)
    h, w = pix.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


class SaliencyCache:
    """Saliency maps keyed by image content hash, backend and backend parameters.

    Each entry stores a float tensor record (`<key>.sstn`) and an 8-bit PGM
    preview (`<key>.pgm`). `manifest.txt` holds one tab-separated line per entry:
    ``hash  backend  params-json  relative-path``.
    """

    MANIFEST = "manifest.txt"

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._manifest = self._read_manifest()

    def _read_manifest(self) -> dict[str, tuple[str, str, str, str]]:
        entries = {}
        path = self.root / self.MANIFEST
        if path.exists():
            for line in path.read_text().splitlines():
                if not line.strip():
                    continue
                digest, backend, params, rel = line.split("\t")
                entries[self.entry_key(digest, backend, params)] = (digest, backend, params, rel)
        return entries

    @staticmethod
    def entry_key(digest: str, backend: str, params: str) -> str:
        return hashlib.sha256(f"{digest}|{backend}|{params}".encode()).hexdigest()[:32]

    def _write_manifest(self) -> None:
        lines = ["\t".join(v) for v in sorted(self._manifest.values(), key=lambda e: e[3])]
        atomic_write(self.root / self.MANIFEST, ("\n".join(lines) + ("\n" if lines else "")).encode())

    def __len__(self) -> int:
        return len(self._manifest)

    def lookup(self, image: np.ndarray, backend: str, params: dict | None = None) -> np.ndarray | None:
        params_s = json.dumps(params or {}, sort_keys=True)
        key = self.entry_key(content_hash(image), backend, params_s)
        entry = self._manifest.get(key)
        if entry is None:
            return None
        path = self.root / entry[3]
        if not path.exists():
            return None
        return tensor_from_bytes(path.read_bytes()).astype(np.float64)

    def get(self, image: np.ndarray, backend: str = "fine", params: dict | None = None) -> np.ndarray:
        """Cached map for `image`, computing and storing it on a miss."""
        params = params or {}
        cached = self.lookup(image, backend, params)
        if cached is not None:
            return cached
        sal = compute_saliency(image, backend, **params)
        params_s = json.dumps(params, sort_keys=True)
        digest = content_hash(image)
        key = self.entry_key(digest, backend, params_s)
        rel = f"{key}.sstn"
        atomic_write(self.root / rel, tensor_to_bytes(sal.astype(np.float32)))
        atomic_write(self.root / f"{key}.pgm", to_pgm_bytes(sal))
        with self._lock:
            self._manifest[key] = (digest, backend, params_s, rel)
            self._write_manifest()
        # return exactly what a later cache hit would
        return sal.astype(np.float32).astype(np.float64)
