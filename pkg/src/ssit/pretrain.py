"""Saliency-guided momentum contrast with saliency segmentation.

The query encoder (backbone, projection head, prediction head, segmentation
decoder) is trained with AdamW on

    L = lambda_cl * L_cl + lambda_seg * L_seg

while the key encoder (backbone, projection head) tracks it by EMA. The key
encoder sees only the most salient patches of its view; the query encoder
always sees the full sequence.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np

from . import numerics as nx
from . import vit
from .augment import make_rng, make_views
from .config import HeadConfig, RunConfig, ViTConfig
from .numerics import Tensor
from .saliency import binarize, patch_scores, select_salient

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """A loss or parameter became NaN/Inf."""


# -- parameter trees --------------------------------------------------------

def _mlp_shapes(prefix: str, dims: Sequence[int]) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        shapes[f"{prefix}.fc{i + 1}.weight"] = (a, b)
        shapes[f"{prefix}.fc{i + 1}.bias"] = (b,)
    return shapes


def head_shapes(vcfg: ViTConfig, hcfg: HeadConfig) -> dict[str, tuple[int, ...]]:
    d = vcfg.embed_dim
    shapes = _mlp_shapes("proj", (d, hcfg.proj_hidden, hcfg.proj_hidden, hcfg.proj_out))
    shapes.update(_mlp_shapes("pred", (hcfg.proj_out, hcfg.pred_hidden, hcfg.proj_out)))
    shapes["decoder.weight"] = (d, vcfg.patch_size**2)
    shapes["decoder.bias"] = (vcfg.patch_size**2,)
    return shapes


def init_query_encoder(vcfg: ViTConfig, hcfg: HeadConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params = {f"backbone.{k}": v for k, v in vit.init_vit(vcfg, rng).items()}
    for name, shape in head_shapes(vcfg, hcfg).items():
        if not name.endswith(".weight"):
            value = np.zeros(shape)
        elif name.startswith("decoder."):
            value = vit.trunc_normal(rng, shape)
        else:
            value = xavier_uniform(rng, shape)
        params[name] = Tensor(value, requires_grad=True)
    return params


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    # keeps activations O(1) through the un-normalized MLP heads; 0.02-std weights
    # shrink the prediction output to ~1e-6 and make its direction ill-conditioned
    limit = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


def is_key_param(name: str) -> bool:
    return name.startswith("backbone.") or name.startswith("proj.")


def init_key_encoder(query: dict[str, Tensor]) -> dict[str, Tensor]:
    """Key encoder starts as an exact copy of the query backbone and projection head."""
    return {k: Tensor(v.data, requires_grad=False) for k, v in query.items() if is_key_param(k)}


def subtree(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def mlp(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    layers = sorted({k.split(".")[1] for k in params if k.startswith(prefix + ".fc")}, key=lambda s: int(s[2:]))
    for i, layer in enumerate(layers):
        x = vit.linear(x, params, f"{prefix}.{layer}")
        if i < len(layers) - 1:
            x = nx.gelu(x)
    return x


# -- objectives -------------------------------------------------------------

def momentum_update(key: dict[str, Tensor], query: dict[str, Tensor], alpha: float) -> dict[str, Tensor]:
    """theta_k <- alpha * theta_k + (1 - alpha) * theta_q, for every tensor."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"momentum coefficient must lie in [0, 1], got {alpha}")
    if set(key) != set(query):
        missing = sorted(set(key) ^ set(query))
        raise ValueError(f"key/query parameter trees differ: {missing[:5]}")
    for name, k in key.items():
        q = query[name]
        if k.shape != q.shape:
            raise ValueError(f"shape mismatch for {name}: key {k.shape} vs query {q.shape}")
        if alpha == 1.0:
            continue
        k.data = (alpha * k.data.astype(np.float64) + (1.0 - alpha) * q.data.astype(np.float64)).astype(k.data.dtype)
    return key


def contrastive_loss(q: Tensor, k: Tensor, tau: float) -> Tensor:
    """InfoNCE over in-batch negatives; `k` is treated as a constant target."""
    if q.shape[0] < 2:
        raise ValueError(f"contrastive loss needs a batch of at least 2 (got {q.shape[0]}): no negatives")
    if q.shape != k.shape:
        raise nx.ShapeError(f"query features {q.shape} vs key features {k.shape}")
    b = q.shape[0]
    logits = (q @ k.detach().T) * (1.0 / tau)
    logp = nx.log_softmax(logits, axis=1)
    eye = np.eye(b, dtype=logp.data.dtype)
    return -(logp * eye).sum() * (1.0 / b)


SEG_CLAMP = 1e-7


def seg_loss(pred: Tensor, target) -> Tensor:
    """Pixel-mean binary cross-entropy; probabilities clamped to [1e-7, 1 - 1e-7] inside the logs."""
    y = np.asarray(target, dtype=pred.data.dtype)
    if y.shape != pred.shape:
        raise nx.ShapeError(f"prediction {pred.shape} vs target {y.shape}")
    p = nx.clamp(pred, SEG_CLAMP, 1.0 - SEG_CLAMP)
    ll = nx.log(p) * y + nx.log(1.0 - p) * (1.0 - y)
    return -ll.mean()


def decode_segmentation(patch_reprs: Tensor, params: dict[str, Tensor], patch_size: int, grid: tuple[int, int]) -> Tensor:
    """[B, N, D] patch representations -> [B, H, W] per-pixel saliency probabilities."""
    if patch_reprs.ndim == 2:
        patch_reprs = patch_reprs.reshape(1, *patch_reprs.shape)
    b, n, _ = patch_reprs.shape
    gh, gw = grid
    if n != gh * gw:
        raise ValueError(f"{n} patch representations cannot tile a {gh}×{gw} grid")
    p = patch_size
    probs = nx.sigmoid(vit.linear(patch_reprs, params, "decoder"))
    tiles = probs.reshape(b, gh, gw, p, p).transpose(0, 1, 3, 2, 4)
    return tiles.reshape(b, gh * p, gw * p)


# -- schedules --------------------------------------------------------------

def schedules(step: int, total_steps: int, warmup_steps: int, base_lr: float,
              alpha_start: float = 0.99, alpha_end: float = 1.0) -> tuple[float, float]:
    """Linear-warmup + cosine learning rate, and cosine momentum from alpha_start to alpha_end."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    t = min(step, total_steps)
    if t < warmup_steps:
        lr = base_lr * t / warmup_steps
    elif total_steps > warmup_steps:
        frac = (t - warmup_steps) / (total_steps - warmup_steps)
        lr = base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))
    else:
        lr = 0.0 if t >= total_steps else base_lr
    alpha = alpha_end - (alpha_end - alpha_start) * (math.cos(math.pi * t / total_steps) + 1.0) / 2.0
    if t == total_steps:
        lr, alpha = 0.0, alpha_end
    return lr, alpha


# -- state ------------------------------------------------------------------

@dataclass
class TrainState:
    config: RunConfig
    query: dict[str, Tensor]
    key: dict[str, Tensor]
    opt: nx.AdamWState
    steps_per_epoch: int
    step: int = 0

    @property
    def epoch(self) -> int:
        return self.step // self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.config.pretrain.epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.config.pretrain.warmup_epochs * self.steps_per_epoch

    def current_schedule(self) -> tuple[float, float]:
        pc = self.config.pretrain
        return schedules(self.step, self.total_steps, self.warmup_steps, pc.base_lr, pc.alpha_start, pc.alpha_end)

    def backbone(self) -> dict[str, Tensor]:
        return subtree(self.query, "backbone.")


def init_state(config: RunConfig, steps_per_epoch: int) -> TrainState:
    config.validate()
    rng = make_rng((config.seed, 0x5EED))
    query = init_query_encoder(config.vit, config.heads, rng)
    key = init_key_encoder(query)
    opt = nx.init_adamw(query, weight_decay=config.pretrain.weight_decay)
    return TrainState(config, query, key, opt, steps_per_epoch=max(1, steps_per_epoch))


class BatchViews(NamedTuple):
    query: np.ndarray  # [B, S, S, C]
    key: np.ndarray  # [B, S, S, C]
    key_saliency: np.ndarray  # [B, S, S]
    seg_target: np.ndarray  # [B, S, S] binary


def build_batch(images, saliencies, indices, epoch: int, config: RunConfig) -> BatchViews:
    size = config.vit.image_size
    views = [
        make_views(images[i], saliencies[i], config.augment.query, config.augment.key,
                   seed=(config.seed, epoch, int(i)), out_size=size)
        for i in indices
    ]
    return BatchViews(
        query=np.stack([v.query for v in views]),
        key=np.stack([v.key for v in views]),
        key_saliency=np.stack([v.key_saliency for v in views]),
        seg_target=np.stack([binarize(v.query_saliency, config.saliency.threshold) for v in views]),
    )


def key_features(state: TrainState, batch: BatchViews) -> tuple[Tensor, np.ndarray]:
    cfg = state.config
    p = cfg.vit.patch_size
    keep = np.stack([
        select_salient(patch_scores(s, p), cfg.pretrain.masking_ratio).kept_indices
        for s in batch.key_saliency
    ])
    with nx.no_grad():
        out = vit.forward(subtree(state.key, "backbone."), cfg.vit, vit.patchify(batch.key, p), keep=keep)
        k = nx.l2_normalize(mlp(out.class_repr, state.key, "proj"), axis=1)
    return k, keep


def query_forward(state: TrainState, batch: BatchViews):
    cfg = state.config
    out = vit.forward(state.backbone(), cfg.vit, vit.patchify(batch.query, cfg.vit.patch_size))
    q = nx.l2_normalize(mlp(mlp(out.class_repr, state.query, "proj"), state.query, "pred"), axis=1)
    return out, q


def compute_losses(state: TrainState, batch: BatchViews):
    """(L, L_cl, L_seg, keep) for the current parameters, graph attached to the query parameters."""
    cfg = state.config
    pc = cfg.pretrain
    k, keep = key_features(state, batch)
    out, q = query_forward(state, batch)
    l_cl = contrastive_loss(q, k, pc.tau)
    pred = decode_segmentation(out.patch_reprs, state.query, cfg.vit.patch_size, out.grid)
    l_seg = seg_loss(pred, batch.seg_target)
    total = l_cl * pc.lambda_cl + l_seg * pc.lambda_seg
    return total, l_cl, l_seg, keep, out


def train_step(state: TrainState, batch: BatchViews) -> tuple[TrainState, dict]:
    lr, alpha = state.current_schedule()
    for t in state.query.values():
        t.zero_grad()
    total, l_cl, l_seg, keep, out = compute_losses(state, batch)
    metrics = {
        "step": state.step,
        "epoch": state.epoch,
        "lr": lr,
        "alpha": alpha,
        "l_cl": l_cl.item(),
        "l_seg": l_seg.item(),
        "loss": total.item(),
        "keep": int(keep.shape[1]),
        "query_len": int(out.seq_len),
    }
    if not all(math.isfinite(metrics[k]) for k in ("l_cl", "l_seg", "loss")):
        raise NumericalError(f"non-finite loss at step {state.step}: {metrics}")
    nx.backward(total)
    nx.adamw_step(state.query, state.opt, lr)
    momentum_update(state.key, {k: state.query[k] for k in state.key}, alpha)
    state.step += 1
    return state, metrics


# -- checkpoints ------------------------------------------------------------

def state_to_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = {}
    for k, v in state.query.items():
        arrays[f"query.{k}"] = v.data
    for k, v in state.key.items():
        arrays[f"key.{k}"] = v.data
    for k in state.query:
        arrays[f"adamw.m.{k}"] = state.opt.m[k]
        arrays[f"adamw.v.{k}"] = state.opt.v[k]
    return arrays


def save_checkpoint(state: TrainState, path) -> None:
    meta = {
        "kind": "ssit-train-state",
        "step": state.step,
        "epoch": state.epoch,
        "steps_per_epoch": state.steps_per_epoch,
        "config": state.config.to_dict(),
        "adamw": {
            "step": state.opt.step,
            "beta1": state.opt.beta1,
            "beta2": state.opt.beta2,
            "eps": state.opt.eps,
            "weight_decay": state.opt.weight_decay,
        },
    }
    nx.save_checkpoint_file(path, state_to_arrays(state), meta)


def load_checkpoint(path) -> TrainState:
    arrays, meta = nx.load_checkpoint_file(path)
    if meta.get("kind") != "ssit-train-state":
        raise nx.CorruptRecordError(f"{path}: not a training-state checkpoint")
    config = RunConfig.from_dict(meta["config"])
    query = {k[6:]: Tensor(v, requires_grad=True) for k, v in arrays.items() if k.startswith("query.")}
    key = {k[4:]: Tensor(v) for k, v in arrays.items() if k.startswith("key.")}
    a = meta["adamw"]
    opt = nx.AdamWState(
        step=a["step"],
        m={k: arrays[f"adamw.m.{k}"] for k in query},
        v={k: arrays[f"adamw.v.{k}"] for k in query},
        beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], weight_decay=a["weight_decay"],
    )
    return TrainState(config, query, key, opt, steps_per_epoch=meta["steps_per_epoch"], step=meta["step"])


def load_backbone(path) -> tuple[dict[str, Tensor], ViTConfig]:
    """Query-encoder ViT from a training checkpoint, or a plain ViT checkpoint."""
    arrays, meta = nx.load_checkpoint_file(path)
    if meta.get("kind") == "vit":
        return vit.load_vit(path)
    if meta.get("kind") != "ssit-train-state":
        raise nx.CorruptRecordError(f"{path}: unknown checkpoint kind {meta.get('kind')!r}")
    cfg = RunConfig.from_dict(meta["config"]).vit
    params = {k[len("query.backbone."):]: Tensor(v, requires_grad=True)
              for k, v in arrays.items() if k.startswith("query.backbone.")}
    return params, cfg


# -- loop -------------------------------------------------------------------

def format_metrics(m: dict) -> str:
    """One JSON object per line; floats use repr so the stream is exact."""
    return json.dumps(m, sort_keys=True)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return make_rng((seed, epoch, 0xB47C4)).permutation(n)


def steps_per_epoch(n_images: int, batch_size: int) -> int:
    return max(1, n_images // min(batch_size, n_images))


def run_pretraining(
    config: RunConfig,
    images: Sequence[np.ndarray],
    saliencies: Sequence[np.ndarray],
    state: TrainState | None = None,
    metrics_path=None,
    checkpoint_dir=None,
    max_steps: int | None = None,
    on_metrics: Callable[[dict], None] | None = None,
) -> tuple[TrainState, list[dict]]:
    """Train until the configured epochs finish (or `max_steps` more steps). Resumes from `state.step`."""
    n = len(images)
    if n < 2:
        raise ValueError("pretraining needs at least 2 images")
    bs = min(config.pretrain.batch_size, n)
    spe = steps_per_epoch(n, bs)
    if state is None:
        state = init_state(config, spe)
    elif state.steps_per_epoch != spe:
        raise ValueError(f"checkpoint has {state.steps_per_epoch} steps/epoch, dataset gives {spe}")
    history = []
    done = 0
    log_f = open(metrics_path, "a") if metrics_path else None
    try:
        while state.step < state.total_steps and (max_steps is None or done < max_steps):
            epoch, pos = divmod(state.step, spe)
            order = epoch_order(config.seed, epoch, n)
            idx = order[pos * bs:(pos + 1) * bs]
            batch = build_batch(images, saliencies, idx, epoch, config)
            state, metrics = train_step(state, batch)
            history.append(metrics)
            done += 1
            if log_f:
                log_f.write(format_metrics(metrics) + "\n")
                log_f.flush()
            if on_metrics:
                on_metrics(metrics)
            epoch_done = state.step % spe == 0
            every = config.pretrain.checkpoint_every
            if checkpoint_dir and epoch_done and (
                (every and state.epoch % every == 0) or state.step == state.total_steps
            ):
                save_checkpoint(state, Path(checkpoint_dir) / f"ckpt_epoch{state.epoch:04d}.sstc")
    finally:
        if log_f:
            log_f.close()
    return state, history
