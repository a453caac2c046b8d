"""Evaluation protocols: k-NN, linear probe and fine-tuning, scored by quadratic weighted kappa."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from . import vit
from .augment import make_rng
from .config import ViTConfig
from .numerics import Tensor

log = logging.getLogger(__name__)


# -- metric -----------------------------------------------------------------

def confusion_matrix(y_true, y_pred, num_grades: int) -> np.ndarray:
    """Counts with rows = truth, columns = prediction."""
    cm = np.zeros((num_grades, num_grades), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def quadratic_weighted_kappa(cm) -> float:
    o = np.asarray(cm, dtype=np.float64)
    if o.ndim != 2 or o.shape[0] != o.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {o.shape}")
    if (o < 0).any():
        raise ValueError("confusion matrix counts must be non-negative")
    total = o.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    g = o.shape[0]
    if g < 2:
        log.warning("kappa is degenerate for a single grade; reporting 0")
        return 0.0
    i = np.arange(g)
    w = (i[:, None] - i[None, :]) ** 2 / (g - 1) ** 2
    e = np.outer(o.sum(axis=1), o.sum(axis=0)) / total
    denom = (w * e).sum()
    if denom == 0:
        log.warning("kappa is degenerate (zero expected disagreement); reporting 0")
        return 0.0
    return float(1.0 - (w * o).sum() / denom)


def kappa_score(y_true, y_pred, num_grades: int) -> float:
    return quadratic_weighted_kappa(confusion_matrix(y_true, y_pred, num_grades))


# -- representations --------------------------------------------------------

def extract(params: dict[str, Tensor], cfg: ViTConfig, images, batch_size: int = 128) -> np.ndarray:
    """[class token ‖ mean patch token] for each image -> [n, 2D] float32."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    out = []
    with nx.no_grad():
        for start in range(0, len(arr), batch_size):
            enc = vit.forward(params, cfg, vit.patchify(arr[start:start + batch_size], cfg.patch_size))
            rep = nx.concat([enc.class_repr, enc.patch_reprs.mean(axis=1)], axis=1)
            out.append(rep.data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, 2 * cfg.embed_dim), np.float32)


def representation(enc: vit.EncoderOutput) -> Tensor:
    return nx.concat([enc.class_repr, enc.patch_reprs.mean(axis=1)], axis=1)


# -- k-NN -------------------------------------------------------------------

def knn_classify(train_reprs, train_labels, query_reprs, k: int = 10, num_grades: int | None = None) -> np.ndarray:
    """Cosine-similarity majority vote; vote ties go to the smallest grade, rank ties to dataset order."""
    tr = np.asarray(train_reprs, dtype=np.float64)
    labels = np.asarray(train_labels, dtype=np.int64)
    qr = np.asarray(query_reprs, dtype=np.float64)
    if len(tr) == 0:
        raise ValueError("k-NN needs a non-empty training set")
    if not 1 <= k <= len(tr):
        raise ValueError(f"k must lie in [1, {len(tr)}], got {k}")
    g = int(num_grades if num_grades is not None else labels.max() + 1)

    def unit(x):
        n = np.linalg.norm(x, axis=1, keepdims=True)
        return x / np.where(n > 0, n, 1.0)

    sim = unit(qr) @ unit(tr).T
    order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    preds = np.empty(len(qr), dtype=np.int64)
    for i, nbrs in enumerate(order):
        preds[i] = int(np.argmax(np.bincount(labels[nbrs], minlength=g)))
    return preds


def knn_kappa(train_reprs, train_labels, test_reprs, test_labels, k: int = 10, num_grades: int = 3) -> float:
    preds = knn_classify(train_reprs, train_labels, test_reprs, k, num_grades)
    return kappa_score(test_labels, preds, num_grades)


# -- supervised heads -------------------------------------------------------

@dataclass
class ProbeResult:
    test_kappa: float
    best_val_kappa: float
    best_epoch: int
    head: dict[str, np.ndarray]


def init_head(in_dim: int, num_grades: int, seed: int) -> dict[str, Tensor]:
    rng = make_rng((seed, 0x4EAD))
    return {
        "head.weight": Tensor(vit.trunc_normal(rng, (in_dim, num_grades)), requires_grad=True),
        "head.bias": Tensor(np.zeros(num_grades), requires_grad=True),
    }


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.eye(logits.shape[1], dtype=logits.data.dtype)[labels]
    return -(nx.log_softmax(logits, axis=1) * onehot).sum() * (1.0 / logits.shape[0])


def _check_labels(labels: np.ndarray) -> None:
    if len(np.unique(labels)) < 2:
        raise ValueError("training labels contain a single class; supervised evaluation is degenerate")


def _train_classifier(
    features: Callable[[np.ndarray, bool], Tensor],
    params: dict[str, Tensor],
    train_labels: np.ndarray,
    val_labels: np.ndarray,
    test_labels: np.ndarray,
    num_grades: int,
    epochs: int,
    lr: float,
    batch_size: int,
    weight_decay: float,
    seed: int,
) -> ProbeResult:
    """Shared loop: `features(idx, split)` returns representations; split in {"train","val","test"}."""
    head = {k: v for k, v in params.items() if k.startswith("head.")}
    opt = nx.init_adamw(params, weight_decay=weight_decay)
    n = len(train_labels)

    def predict(split: str, count: int) -> np.ndarray:
        with nx.no_grad():
            logits = vit.linear(features(np.arange(count), split), head, "head")
        return np.argmax(logits.data, axis=1)

    def val_kappa() -> float:
        return kappa_score(val_labels, predict("val", len(val_labels)), num_grades)

    best = (val_kappa(), 0, {k: v.data.copy() for k, v in params.items()})
    for epoch in range(1, epochs + 1):
        order = make_rng((seed, epoch, 0x7EA1)).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            for t in params.values():
                t.zero_grad()
            logits = vit.linear(features(idx, "train"), head, "head")
            loss = cross_entropy(logits, train_labels[idx])
            nx.backward(loss)
            nx.adamw_step(params, opt, lr)
        kv = val_kappa()
        if kv > best[0]:
            best = (kv, epoch, {k: v.data.copy() for k, v in params.items()})
    for k, v in best[2].items():
        params[k].data = v
    test = kappa_score(test_labels, predict("test", len(test_labels)), num_grades)
    return ProbeResult(test, best[0], best[1], {k: v.data.copy() for k, v in params.items()})


def linear_probe(train_reprs, train_labels, val_reprs, val_labels, test_reprs, test_labels,
                 epochs: int = 100, lr: float = 1e-2, num_grades: int = 3, batch_size: int = 64,
                 weight_decay: float = 0.0, seed: int = 0) -> ProbeResult:
    """Train one linear softmax layer on frozen representations; pick the epoch with the best val kappa."""
    tr = np.asarray(train_reprs, dtype=np.float32)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    _check_labels(train_labels)
    feats = {"train": tr, "val": np.asarray(val_reprs, np.float32), "test": np.asarray(test_reprs, np.float32)}
    params = init_head(tr.shape[1], num_grades, seed)
    return _train_classifier(
        lambda idx, split: Tensor(feats[split][idx]),
        params,
        train_labels,
        np.asarray(val_labels, dtype=np.int64),
        np.asarray(test_labels, dtype=np.int64),
        num_grades, epochs, lr, batch_size, weight_decay, seed,
    )


def fine_tune(backbone: dict[str, Tensor], cfg: ViTConfig, train_images, train_labels, val_images, val_labels,
              test_images, test_labels, epochs: int = 10, lr: float = 5e-4, num_grades: int = 3,
              batch_size: int = 32, weight_decay: float = 0.0, seed: int = 0,
              freeze_backbone: bool = False) -> ProbeResult:
    """Supervised training of a classification head on the representation, backbone included unless frozen.

    The caller's backbone tensors are copied, never modified.
    """
    train_labels = np.asarray(train_labels, dtype=np.int64)
    _check_labels(train_labels)
    images = {
        "train": np.asarray(train_images, np.float32),
        "val": np.asarray(val_images, np.float32),
        "test": np.asarray(test_images, np.float32),
    }
    enc = {f"backbone.{k}": Tensor(v.data, requires_grad=not freeze_backbone) for k, v in backbone.items()}
    sub = {k[9:]: v for k, v in enc.items()}

    def features(idx, split):
        if freeze_backbone:
            return Tensor(extract(sub, cfg, images[split][idx]))
        if split != "train":
            return Tensor(extract(sub, cfg, images[split][idx]))
        out = vit.forward(sub, cfg, vit.patchify(images[split][idx], cfg.patch_size))
        return representation(out)

    head = init_head(2 * cfg.embed_dim, num_grades, seed)
    params = dict(head) if freeze_backbone else {**enc, **head}
    return _train_classifier(
        features, params, train_labels,
        np.asarray(val_labels, dtype=np.int64), np.asarray(test_labels, dtype=np.int64),
        num_grades, epochs, lr, batch_size, weight_decay, seed,
    )
