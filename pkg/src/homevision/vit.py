"""Forward-only Vision Transformer encoder.

An image is split into a grid of non-overlapping patches, each patch is
linearly embedded, a learned CLS token is prepended, learned positional
embeddings are added, and the token sequence runs through pre-norm
transformer blocks (multi-head self-attention + MLP, each with a residual
connection). The final-norm CLS row is the image feature.

The block functions are written against the autodiff ops, so they run as
plain numpy for inference and build a gradient tape when handed Var-wrapped
parameters by the trainer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .tensor import NonFiniteError, Rng

Params = Mapping[str, object]  # name -> ndarray or autodiff.Var


@dataclass(frozen=True)
class ViTConfig:
    patch_size: int
    depth: int
    dim: int
    heads: int
    mlp_ratio: float = 4.0
    input_size: int = 224

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.input_size % self.patch_size != 0:
            raise ValueError(
                f"input size {self.input_size} not divisible by patch {self.patch_size}"
            )

    @property
    def grid_size(self) -> int:
        return self.input_size // self.patch_size

    @property
    def token_count(self) -> int:
        return self.grid_size**2 + 1

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def hidden_dim(self) -> int:
        return int(self.mlp_ratio * self.dim)

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size**2


_PRESETS = {
    "vit-s/16": ViTConfig(patch_size=16, depth=12, dim=384, heads=6),
    "vit-s/8": ViTConfig(patch_size=8, depth=12, dim=384, heads=6),
    "vit-b/16": ViTConfig(patch_size=16, depth=12, dim=768, heads=12),
    "vit-b/8": ViTConfig(patch_size=8, depth=12, dim=768, heads=12),
    # small config for trainer tests and quick end-to-end runs
    "mini": ViTConfig(patch_size=8, depth=2, dim=64, heads=4, input_size=32),
}


def preset(name: str) -> ViTConfig:
    try:
        return _PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; known: {sorted(_PRESETS)}") from None


def preset_names() -> list[str]:
    return sorted(_PRESETS)


def param_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    """Exact parameter name -> shape map demanded by a config."""
    d, h = cfg.dim, cfg.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (cfg.patch_dim, d),
        "patch_embed.bias": (d,),
        "cls_token": (1, d),
        "pos_embed": (cfg.token_count, d),
        "norm.gamma": (d,),
        "norm.beta": (d,),
    }
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes[p + "norm1.gamma"] = (d,)
        shapes[p + "norm1.beta"] = (d,)
        shapes[p + "attn.qkv.weight"] = (d, 3 * d)
        shapes[p + "attn.qkv.bias"] = (3 * d,)
        shapes[p + "attn.proj.weight"] = (d, d)
        shapes[p + "attn.proj.bias"] = (d,)
        shapes[p + "norm2.gamma"] = (d,)
        shapes[p + "norm2.beta"] = (d,)
        shapes[p + "mlp.fc1.weight"] = (d, h)
        shapes[p + "mlp.fc1.bias"] = (h,)
        shapes[p + "mlp.fc2.weight"] = (h, d)
        shapes[p + "mlp.fc2.bias"] = (d,)
    return shapes


def validate_weights(weights: Params, cfg: ViTConfig, allow_prefixes: tuple[str, ...] = ()) -> None:
    """Check the store holds exactly the config's parameters with exact shapes.

    Keys starting with one of allow_prefixes (e.g. a projection head) are
    ignored; any other extra key is an error.
    """
    expected = param_shapes(cfg)
    for name, shape in expected.items():
        if name not in weights:
            raise KeyError(f"missing parameter {name!r}")
        got = tuple(ad.value_of(weights[name]).shape)
        if got != shape:
            raise ValueError(f"parameter {name!r} has shape {got}, expected {shape}")
    for name in weights:
        if name not in expected and not any(name.startswith(p) for p in allow_prefixes):
            raise ValueError(f"unexpected parameter {name!r}")


def init_backbone(cfg: ViTConfig, rng: Rng) -> dict[str, np.ndarray]:
    """Truncated-normal(std 0.02) weights, zero biases, unit norm scales."""
    out: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gamma"):
            out[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith((".bias", ".beta")):
            out[name] = np.zeros(shape, dtype=np.float32)
        else:
            out[name] = rng.trunc_normal(shape, std=0.02).astype(np.float32)
    return out


def param_count(weights: Params, exclude_prefix: str = "head.") -> int:
    return sum(
        ad.value_of(v).size for k, v in weights.items() if not k.startswith(exclude_prefix)
    )


def patchify(img: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    """(3, S, S) image -> (grid^2, 3*N^2) rows of channel-major flattened patches."""
    c, hgt, wid = img.shape
    n = cfg.patch_size
    if c != 3 or hgt != wid or hgt % n != 0:
        raise ValueError(f"cannot patchify shape {img.shape} with patch size {n}")
    g = hgt // n
    patches = img.reshape(3, g, n, g, n).transpose(1, 3, 0, 2, 4).reshape(g * g, 3 * n * n)
    return np.ascontiguousarray(patches)


def unpatchify(patches: np.ndarray, cfg: ViTConfig, size: int) -> np.ndarray:
    """Inverse tiling of patchify, for round-trip checks."""
    n = cfg.patch_size
    g = size // n
    return (
        patches.reshape(g, g, 3, n, n).transpose(2, 0, 3, 1, 4).reshape(3, size, size)
    )


def interpolate_pos_embed(pos: np.ndarray, src_grid: int, dst_grid: int) -> np.ndarray:
    """Bilinearly resample the patch-grid positional embeddings; CLS row is kept.

    Half-pixel-center alignment, matching the image resampler. Identity when
    the grids already agree.
    """
    if src_grid == dst_grid:
        return pos
    d = pos.shape[1]
    grid = pos[1:].reshape(src_grid, src_grid, d).astype(np.float64)
    coords = (np.arange(dst_grid) + 0.5) * (src_grid / dst_grid) - 0.5
    coords = np.clip(coords, 0.0, src_grid - 1)
    i0 = np.floor(coords).astype(int)
    i1 = np.minimum(i0 + 1, src_grid - 1)
    w = (coords - i0)[:, None]
    rows = grid[i0] * (1 - w[:, :, None]) + grid[i1] * w[:, :, None]
    cols = rows[:, i0] * (1 - w[None, :, :]) + rows[:, i1] * w[None, :, :]
    out = np.concatenate([pos[:1].astype(np.float64), cols.reshape(dst_grid**2, d)], axis=0)
    return out.astype(pos.dtype)


def embed(patches, weights: Params, cfg: ViTConfig):
    """Project patches, prepend CLS, add positional embeddings.

    Row 0 is cls + pos[0]; row i >= 1 is patch[i-1] @ W + b + pos[i]. When the
    patch count differs from the config grid (smaller augmentation views) the
    positional grid is resampled to match.
    """
    n_patches = ad.value_of(patches).shape[0]
    pos = weights["pos_embed"]
    pos_val = ad.value_of(pos)
    if pos_val.shape[0] != n_patches + 1:
        dst_grid = math.isqrt(n_patches)
        if dst_grid**2 != n_patches:
            raise ValueError(f"patch count {n_patches} is not a square grid")
        pos = interpolate_pos_embed(pos_val, cfg.grid_size, dst_grid)
    projected = ad.add(ad.matmul(patches, weights["patch_embed.weight"]), weights["patch_embed.bias"])
    tokens = ad.concat_rows([weights["cls_token"], projected])
    return ad.add(tokens, pos)


def block_view(weights: Params, index: int) -> dict[str, object]:
    """Parameters of one transformer block, with the block prefix stripped."""
    prefix = f"blocks.{index}."
    return {k[len(prefix) :]: v for k, v in weights.items() if k.startswith(prefix)}


def attention_block(x, block: Params, cfg: ViTConfig, attn_sink: list | None = None):
    """Pre-norm residual multi-head self-attention: x + MHSA(LN(x)).

    Per head, queries/keys/values come from one learned qkv projection;
    scores are q @ k.T / sqrt(head_dim), softmaxed per query row, applied to
    values; heads are concatenated and output-projected. If attn_sink is a
    list, each head's attention weight matrix is appended to it.
    """
    d = cfg.dim
    hd = cfg.head_dim
    normed = ad.layer_norm(x, block["norm1.gamma"], block["norm1.beta"])
    qkv = ad.add(ad.matmul(normed, block["attn.qkv.weight"]), block["attn.qkv.bias"])
    head_outputs = []
    for h in range(cfg.heads):
        q = ad.slice_cols(qkv, h * hd, (h + 1) * hd)
        k = ad.slice_cols(qkv, d + h * hd, d + (h + 1) * hd)
        v = ad.slice_cols(qkv, 2 * d + h * hd, 2 * d + (h + 1) * hd)
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(hd))
        attn = ad.softmax_rows(scores)
        if attn_sink is not None:
            attn_sink.append(np.array(ad.value_of(attn)))
        head_outputs.append(ad.matmul(attn, v))
    merged = ad.concat_cols(head_outputs)
    projected = ad.add(ad.matmul(merged, block["attn.proj.weight"]), block["attn.proj.bias"])
    return ad.add(x, projected)


def mlp_block(x, block: Params, cfg: ViTConfig):
    """Pre-norm residual MLP: x + W2 @ gelu(W1 @ LN(x) + b1) + b2, row-wise."""
    normed = ad.layer_norm(x, block["norm2.gamma"], block["norm2.beta"])
    hidden = ad.gelu(ad.add(ad.matmul(normed, block["mlp.fc1.weight"]), block["mlp.fc1.bias"]))
    out = ad.add(ad.matmul(hidden, block["mlp.fc2.weight"]), block["mlp.fc2.bias"])
    return ad.add(x, out)


def encode_tokens(img: np.ndarray, weights: Params, cfg: ViTConfig, attn_sink: list | None = None):
    """Full encoder stack: embed, depth x (attention, mlp), final layer norm.

    The image is a constant; gradients flow only into Var-wrapped weights.
    """
    patches = patchify(np.asarray(img), cfg)
    x = embed(patches, weights, cfg)
    for i in range(cfg.depth):
        block = block_view(weights, i)
        try:
            x = attention_block(x, block, cfg, attn_sink=attn_sink)
            x = mlp_block(x, block, cfg)
        except NonFiniteError as exc:
            raise NonFiniteError(f"non-finite activation in block {i}: {exc}") from exc
    return ad.layer_norm(x, weights["norm.gamma"], weights["norm.beta"])


def forward(
    img: np.ndarray,
    weights: Params,
    cfg: ViTConfig,
    attn_sink: list | None = None,
) -> np.ndarray:
    """Encode one normalized (3, S, S) image to its CLS feature vector (dim,)."""
    validate_weights(weights, cfg)
    tokens = encode_tokens(img, weights, cfg, attn_sink=attn_sink)
    return np.array(ad.value_of(tokens)[0])
