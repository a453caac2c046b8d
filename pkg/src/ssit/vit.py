"""Vision Transformer encoder with optional per-sample token subsets.

Parameters live in a flat ``dict[str, Tensor]`` with names such as
``patch_embed.weight``, ``pos_embed``, ``block{i}.attn.qkv.weight`` and
``norm.bias``. Linear weights are stored ``[in, out]`` so a layer is
``x @ W + b``. Blocks are pre-norm::

    z' = MSA(LN(z)) + z
    z  = MLP(LN(z')) + z'
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .config import ViTConfig
from .numerics import Tensor
from .saliency import KeepSet

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) truncated at ±2 std by redrawing."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def param_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.embed_dim
    hidden = int(d * cfg.mlp_ratio)
    patch_dim = cfg.patch_size**2 * cfg.in_chans
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (patch_dim, d),
        "patch_embed.bias": (d,),
        "cls_token": (1, d),
        "pos_embed": (cfg.num_patches + 1, d),
    }
    for i in range(cfg.depth):
        b = f"block{i}"
        shapes.update({
            f"{b}.norm1.weight": (d,),
            f"{b}.norm1.bias": (d,),
            f"{b}.attn.qkv.weight": (d, 3 * d),
            f"{b}.attn.qkv.bias": (3 * d,),
            f"{b}.attn.proj.weight": (d, d),
            f"{b}.attn.proj.bias": (d,),
            f"{b}.norm2.weight": (d,),
            f"{b}.norm2.bias": (d,),
            f"{b}.mlp.fc1.weight": (d, hidden),
            f"{b}.mlp.fc1.bias": (hidden,),
            f"{b}.mlp.fc2.weight": (hidden, d),
            f"{b}.mlp.fc2.bias": (d,),
        })
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    return shapes


def count_params(cfg: ViTConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def init_vit(cfg: ViTConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    cfg.validate()
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".weight") and len(shape) == 2 or name == "pos_embed":
            value = trunc_normal(rng, shape)
        elif name.startswith("block") and ".norm" in name and name.endswith(".weight") or name == "norm.weight":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = Tensor(value, requires_grad=True)
    return params


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """[B,]H,W,C -> [B,]N,P·P·C in row-major patch order, channel-last flattening."""
    x = np.asarray(images)
    single = x.ndim == 3
    if single:
        x = x[None]
    b, h, w, c = x.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}×{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    out = x.reshape(b, gh, p, gw, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, p * p * c)
    return out[0] if single else out


def unpatchify(tokens: np.ndarray, patch_size: int, grid: tuple[int, int], channels: int) -> np.ndarray:
    x = np.asarray(tokens)
    single = x.ndim == 2
    if single:
        x = x[None]
    b = x.shape[0]
    gh, gw = grid
    p = patch_size
    out = x.reshape(b, gh, gw, p, p, channels).transpose(0, 1, 3, 2, 4, 5).reshape(b, gh * p, gw * p, channels)
    return out[0] if single else out


@dataclass
class EncoderOutput:
    class_repr: Tensor
    patch_reprs: Tensor
    attentions: list[np.ndarray] | None = None
    kept: np.ndarray | None = None
    grid: tuple[int, int] = (0, 0)
    seq_len: int = 0


def _as_keep_index(keep, batch: int, n: int) -> np.ndarray | None:
    if keep is None:
        return None
    if isinstance(keep, KeepSet):
        keep = [keep] * batch if batch == 1 else None
        if keep is None:
            raise ValueError("a single KeepSet needs a batch of one; pass one KeepSet per sample")
    if isinstance(keep, (list, tuple)) and keep and isinstance(keep[0], KeepSet):
        keep = [k.kept_indices for k in keep]
    idx = np.asarray(keep, dtype=np.int64)
    if idx.ndim == 1:
        idx = np.broadcast_to(idx, (batch, idx.shape[0]))
    if idx.shape[0] != batch:
        raise ValueError(f"keep index batch {idx.shape[0]} != token batch {batch}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"keep index out of range [0, {n})")
    return idx


def linear(x: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    return x @ params[f"{name}.weight"] + params[f"{name}.bias"]


def _attention(x: Tensor, params, prefix: str, heads: int, record: list | None) -> Tensor:
    b, t, d = x.shape
    dh = d // heads
    qkv = linear(x, params, f"{prefix}.qkv").reshape(b, t, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    attn = nx.softmax(scores, axis=-1)
    if record is not None:
        record.append(attn.data.copy())
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return linear(out, params, f"{prefix}.proj")


def forward(
    params: dict[str, Tensor],
    cfg: ViTConfig,
    tokens,
    keep=None,
    record_attention: bool = False,
) -> EncoderOutput:
    """Encode patch tokens [B, N, P²C]; `keep` optionally selects per-sample patch indices [B, k]."""
    tok = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    if tok.ndim == 2:
        tok = tok.reshape(1, *tok.shape)
    b, n, _ = tok.shape
    if n != cfg.num_patches:
        raise ValueError(f"expected {cfg.num_patches} tokens, got {n}")
    idx = _as_keep_index(keep, b, n)

    x = linear(tok, params, "patch_embed")
    pos = params["pos_embed"]
    x = x + pos[1:]
    if idx is not None:
        x = nx.gather_rows(x, idx)
    cls = nx.broadcast_to((params["cls_token"] + pos[0:1]).reshape(1, 1, cfg.embed_dim), (b, 1, cfg.embed_dim))
    z = nx.concat([cls, x], axis=1)

    record = [] if record_attention else None
    for i in range(cfg.depth):
        pre = f"block{i}"
        h = nx.layer_norm(z, params[f"{pre}.norm1.weight"], params[f"{pre}.norm1.bias"], cfg.ln_eps)
        z = _attention(h, params, f"{pre}.attn", cfg.heads, record) + z
        h = nx.layer_norm(z, params[f"{pre}.norm2.weight"], params[f"{pre}.norm2.bias"], cfg.ln_eps)
        h = linear(nx.gelu(linear(h, params, f"{pre}.mlp.fc1")), params, f"{pre}.mlp.fc2")
        z = h + z
    z = nx.layer_norm(z, params["norm.weight"], params["norm.bias"], cfg.ln_eps)
    return EncoderOutput(
        class_repr=z[:, 0],
        patch_reprs=z[:, 1:],
        attentions=record,
        kept=idx,
        grid=(cfg.grid, cfg.grid),
        seq_len=z.shape[1],
    )


def attention_map(output: EncoderOutput, layer: int = -1) -> np.ndarray:
    """Head-averaged class-token attention over patches, on the patch grid, summing to 1.

    Returns [B, grid_h, grid_w]; patches excluded by a keep set get zero.
    """
    if not output.attentions:
        raise ValueError("attention maps were not recorded; call forward(..., record_attention=True)")
    attn = output.attentions[layer]  # [B, H, T, T]
    cls_row = attn[:, :, 0, 1:].astype(np.float64).mean(axis=1)
    b = cls_row.shape[0]
    gh, gw = output.grid
    grid = np.zeros((b, gh * gw))
    if output.kept is None:
        grid[:] = cls_row
    else:
        grid[np.arange(b)[:, None], output.kept] = cls_row
    total = grid.sum(axis=1, keepdims=True)
    grid = np.divide(grid, total, out=np.zeros_like(grid), where=total > 0)
    return grid.reshape(b, gh, gw)


def state_arrays(params: dict[str, Tensor], prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.data for k, v in params.items()}


def save_vit(path, params: dict[str, Tensor], cfg: ViTConfig) -> None:
    from dataclasses import asdict

    nx.save_checkpoint_file(path, state_arrays(params), {"kind": "vit", "vit": asdict(cfg)})


def load_vit(path) -> tuple[dict[str, Tensor], ViTConfig]:
    arrays, meta = nx.load_checkpoint_file(path)
    cfg = ViTConfig(**meta["vit"])
    expected = param_shapes(cfg)
    if set(arrays) != set(expected):
        raise nx.CorruptRecordError("checkpoint tensor names do not match the ViT configuration")
    params = {k: Tensor(arrays[k], requires_grad=True) for k in expected}
    return params, cfg
