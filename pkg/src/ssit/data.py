"""Synthetic graded "fundus" images and labelled dataset directories.

Grade g images show g bright circular lesions on a dark, vignetted disc with
per-image illumination and tint, plus pixel noise. Directory layout::

    DIR/labels.csv            file,grade,split
    DIR/<split>/<name>.png
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import make_rng
from .image_io import read_image, write_image

SPLITS = ("train", "val", "test")


@dataclass
class LabeledDataset:
    images: list[np.ndarray]
    grades: np.ndarray
    splits: np.ndarray
    names: list[str] = field(default_factory=list)
    num_grades: int = 3

    def __post_init__(self):
        self.grades = np.asarray(self.grades, dtype=np.int64)
        self.splits = np.asarray(self.splits)
        if len(self.images) != len(self.grades) or len(self.grades) != len(self.splits):
            raise ValueError("images, grades and splits must have equal length")
        if len(self.grades) and (self.grades.min() < 0 or self.grades.max() >= self.num_grades):
            raise ValueError(f"grades must lie in [0, {self.num_grades})")
        if not self.names:
            self.names = [f"img{i:05d}" for i in range(len(self.images))]

    def split(self, name: str) -> tuple[list[np.ndarray], np.ndarray]:
        idx = np.flatnonzero(self.splits == name)
        return [self.images[i] for i in idx], self.grades[idx]

    def indices(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.splits == name)


def synth_image(rng: np.random.Generator, grade: int, size: int = 64) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    cy, cx = c + rng.uniform(-2, 2, size=2)
    radius = size * rng.uniform(0.42, 0.47)
    rho = np.hypot(yy - cy, xx - cx)
    disc = np.clip(radius - rho + 0.5, 0.0, 1.0)
    illum = rng.uniform(0.45, 1.0)
    tint = np.array([0.75, 0.35, 0.15]) * rng.uniform(0.85, 1.15, size=3)
    # smooth illumination gradient across the disc
    gy, gx = rng.uniform(-0.25, 0.25, size=2)
    shade = illum * (1.0 - 0.45 * (rho / radius) ** 2) * (1.0 + gy * (yy - cy) / radius + gx * (xx - cx) / radius)
    img = disc[..., None] * np.clip(shade, 0.0, None)[..., None] * tint
    placed: list[tuple[float, float, float]] = []
    tries = 0
    while len(placed) < grade and tries < 1000:
        tries += 1
        r = rng.uniform(3.0, 5.0)
        ang = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(0, radius - r - 3)
        ly, lx = cy + dist * np.sin(ang), cx + dist * np.cos(ang)
        if any(np.hypot(ly - py, lx - px) < r + pr + 2 for py, px, pr in placed):
            continue
        placed.append((ly, lx, r))
    for ly, lx, r in placed:
        blob = np.clip(r - np.hypot(yy - ly, xx - lx) + 0.5, 0.0, 1.0)[..., None]
        color = np.array([1.0, 0.92, 0.55]) * rng.uniform(0.85, 1.0)
        img = img * (1 - blob) + blob * color
    img = img + rng.normal(0.0, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def make_synthetic(n_train: int = 600, n_val: int = 150, n_test: int = 150, grades: int = 3,
                   size: int = 64, seed: int = 0) -> LabeledDataset:
    images, labels, splits, names = [], [], [], []
    for split, n in zip(SPLITS, (n_train, n_val, n_test)):
        g_all = np.arange(n) % grades
        g_all = make_rng((seed, SPLITS.index(split), 0x6AD3)).permutation(g_all)
        for i, g in enumerate(g_all):
            rng = make_rng((seed, SPLITS.index(split), i))
            images.append(synth_image(rng, int(g), size))
            labels.append(int(g))
            splits.append(split)
            names.append(f"{split}_{i:05d}_g{g}")
    return LabeledDataset(images, np.array(labels), np.array(splits), names, grades)


def write_dataset(ds: LabeledDataset, root) -> None:
    root = Path(root)
    rows = []
    for img, g, s, name in zip(ds.images, ds.grades, ds.splits, ds.names):
        rel = f"{s}/{name}.png"
        write_image(root / rel, img)
        rows.append((rel, int(g), str(s)))
    with open(root / "labels.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["file", "grade", "split"])
        w.writerows(rows)


def read_dataset(root, num_grades: int | None = None) -> LabeledDataset:
    root = Path(root)
    labels = root / "labels.csv"
    if not labels.exists():
        raise FileNotFoundError(f"{labels} not found")
    images, grades, splits, names = [], [], [], []
    with open(labels, newline="") as f:
        for row in csv.DictReader(f):
            images.append(read_image(root / row["file"]))
            grades.append(int(row["grade"]))
            splits.append(row["split"])
            names.append(Path(row["file"]).stem)
    if splits and not set(splits) <= set(SPLITS):
        raise ValueError(f"unknown split tags in {labels}: {sorted(set(splits) - set(SPLITS))}")
    g = num_grades if num_grades is not None else (max(grades) + 1 if grades else 1)
    return LabeledDataset(images, np.array(grades), np.array(splits), names, g)
