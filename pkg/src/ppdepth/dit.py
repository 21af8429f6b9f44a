"""Diffusion-transformer building blocks: patch embedding, adaLN-zero blocks,
the coarse-to-fine token expansion and the pixel output head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Attention, LayerNorm, Linear, Mlp, Module, param, sincos_2d


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_blocks: int = 12
    hidden_dim: int = 256
    coarse_patch: int = 8
    fine_patch: int = 4
    n_heads: int = 4
    mlp_ratio: float = 4.0
    expand_factor: int = 4
    # blocks run before semantics are fused; None means n_blocks // 2
    fusion_block_index: Optional[int] = None
    in_channels: int = 2
    cascade: bool = True
    semantic: bool = True
    semantic_dim: int = 128
    time_freq_dim: int = 256
    allow_override: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    @property
    def fusion_index(self) -> int:
        return self.n_blocks // 2 if self.fusion_block_index is None else self.fusion_block_index

    @property
    def input_patch(self) -> int:
        return self.coarse_patch if self.cascade else self.fine_patch

    def validate(self) -> None:
        if self.n_blocks < 2 or self.n_blocks % 2:
            raise ConfigError(f"n_blocks must be even and >= 2, got {self.n_blocks}")
        if self.hidden_dim % self.n_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if self.hidden_dim % 4:
            raise ConfigError("hidden_dim must be divisible by 4 for 2-D positional encoding")
        if self.coarse_patch < 1 or self.fine_patch < 1:
            raise ConfigError("patch sizes must be positive")
        if self.coarse_patch % self.fine_patch:
            raise ConfigError("coarse_patch must be a multiple of fine_patch")
        ratio = self.coarse_patch // self.fine_patch
        if self.expand_factor != ratio * ratio:
            raise ConfigError(
                f"expand_factor {self.expand_factor} must equal (coarse/fine)^2 = {ratio * ratio}")
        if not self.allow_override and (ratio != 2 or self.expand_factor != 4):
            raise ConfigError("coarse_patch must be 2 * fine_patch with expand_factor 4 "
                              "(set allow_override to use other ratios)")
        if not 0 <= self.fusion_index <= self.n_blocks:
            raise ConfigError(f"fusion_block_index {self.fusion_index} outside [0, {self.n_blocks}]")
        if self.cascade and self.fusion_index != self.n_blocks // 2 and not self.allow_override:
            raise ConfigError("with cascade, semantics are fused right after the transition "
                              "(fusion_block_index = n_blocks // 2)")
        if self.in_channels not in (2, 4) and not self.allow_override:
            raise ConfigError("in_channels must be 2 (noise + gray) or 4 (noise + RGB)")

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["fusion_block_index"] is None:
            del d["fusion_block_index"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        """Full-size configuration: 24 blocks at width 1024, patches 16 then 8."""
        return cls(n_blocks=24, hidden_dim=1024, coarse_patch=16, fine_patch=8, n_heads=16,
                   semantic_dim=1024)


@dataclass
class TokenGrid:
    tokens: Tensor  # [B, T, D]
    rows: int
    cols: int
    patch_size: int

    def __post_init__(self) -> None:
        if self.tokens.ndim != 3:
            raise ValueError(f"tokens must be [B, T, D], got {self.tokens.shape}")
        if self.rows * self.cols != self.tokens.shape[1]:
            raise ValueError(f"rows*cols = {self.rows * self.cols} != T = {self.tokens.shape[1]}")

    @property
    def n_tokens(self) -> int:
        return self.rows * self.cols

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]

    @property
    def height(self) -> int:
        return self.rows * self.patch_size

    @property
    def width(self) -> int:
        return self.cols * self.patch_size

    def replace(self, tokens: Tensor) -> "TokenGrid":
        return TokenGrid(tokens, self.rows, self.cols, self.patch_size)


# ---------------------------------------------------------------------------
# patch rearrangement
# ---------------------------------------------------------------------------

def patch_vectors(x, patch: int) -> Tensor:
    """[B, H, W, C] -> [B, (H/p)(W/p), p*p*C], patches in row-major grid order."""
    x = ad.as_tensor(x)
    b, h, w, c = x.shape
    if h % patch or w % patch:
        raise ConfigError(f"extents {h}x{w} not divisible by patch {patch}")
    r, q = h // patch, w // patch
    return x.reshape(b, r, patch, q, patch, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, r * q, patch * patch * c)


def unpatchify(vectors, rows: int, cols: int, patch: int, channels: int) -> Tensor:
    """Inverse of ``patch_vectors``: [B, rows*cols, p*p*C] -> [B, rows*p, cols*p, C]."""
    v = ad.as_tensor(vectors)
    b = v.shape[0]
    return (v.reshape(b, rows, cols, patch, patch, channels)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(b, rows * patch, cols * patch, channels))


class PatchEmbed(Module):
    def __init__(self, rng: np.random.Generator, patch: int, in_channels: int, dim: int):
        self.patch = patch
        self.proj = Linear(rng, patch * patch * in_channels, dim)


def patchify(a_t, patch: int, proj: Optional[PatchEmbed], pos_encoding: bool = True) -> TokenGrid:
    """Embed non-overlapping patches of a channels-last image as a token grid.

    With ``proj=None`` the tokens are the raw patch vectors and no positional
    encoding is added.
    """
    a = ad.as_tensor(a_t)
    squeeze = a.ndim == 3
    if squeeze:
        a = a.reshape((1,) + a.shape)
    h, w = a.shape[1], a.shape[2]
    if h % patch or w % patch:
        raise ConfigError(f"input {h}x{w} not divisible by patch {patch}")
    rows, cols = h // patch, w // patch
    tokens = patch_vectors(a, patch)
    if proj is not None:
        if proj.patch != patch:
            raise ConfigError(f"projection built for patch {proj.patch}, got {patch}")
        tokens = proj.proj(tokens)
        if pos_encoding:
            tokens = tokens + Tensor(sincos_2d(tokens.shape[-1], rows, cols), dtype=tokens.dtype)
    return TokenGrid(tokens, rows, cols, patch)


# ---------------------------------------------------------------------------
# timestep conditioning
# ---------------------------------------------------------------------------

def timestep_features(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of t in [0, 1] (scaled by 1000 to the usual DiT range)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1) * 1000.0
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


class TimeEmbedding(Module):
    """t -> sinusoidal features -> Linear -> SiLU -> Linear, giving [B, D]."""

    def __init__(self, rng: np.random.Generator, dim: int, freq_dim: int = 256):
        self.freq_dim = freq_dim
        self.fc1 = Linear(rng, freq_dim, dim, init="normal")
        self.fc2 = Linear(rng, dim, dim, init="normal")

    def __call__(self, t) -> Tensor:
        feats = Tensor(timestep_features(t, self.freq_dim), dtype=self.fc1.weight.dtype)
        return self.fc2(ad.silu(self.fc1(feats)))


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (scale + 1.0) + shift


class DiTBlock(Module):
    """Pre-norm attention + MLP with adaLN-zero timestep modulation."""

    def __init__(self, rng: np.random.Generator, dim: int, n_heads: int, mlp_ratio: float = 4.0):
        self.dim = dim
        self.norm1 = LayerNorm(dim, affine=False)
        self.attn = Attention(rng, dim, n_heads)
        self.norm2 = LayerNorm(dim, affine=False)
        self.mlp = Mlp(rng, dim, int(dim * mlp_ratio), dim)
        self.ada = Linear(rng, dim, 6 * dim, init="zeros")

    def __call__(self, x: Tensor, c: Tensor) -> Tensor:
        b = x.shape[0]
        mod = self.ada(ad.silu(c)).reshape(b, 1, 6, self.dim)
        shift1, scale1, gate1, shift2, scale2, gate2 = (mod[:, :, i] for i in range(6))
        x = x + gate1 * self.attn(_modulate(self.norm1(x), shift1, scale1))
        x = x + gate2 * self.mlp(_modulate(self.norm2(x), shift2, scale2))
        return x


def dit_block(z: TokenGrid, t_emb: Tensor, block: DiTBlock) -> TokenGrid:
    return z.replace(block(z.tokens, t_emb))


class CascadeTransition(Module):
    """Per-token MLP D -> k*D followed by a split of each token into an s x s block."""

    def __init__(self, rng: np.random.Generator, dim: int, expand_factor: int = 4):
        side = int(round(np.sqrt(expand_factor)))
        if side * side != expand_factor:
            raise ConfigError("expand_factor must be a perfect square")
        self.dim = dim
        self.side = side
        self.mlp = Mlp(rng, dim, expand_factor * dim, expand_factor * dim)


def cascade_transition(z: TokenGrid, trans: CascadeTransition, pos_encoding: bool = True) -> TokenGrid:
    """Coarse grid -> fine grid with ``side``-times more rows and columns.

    The expanded vector of token (r, c) is read as (side, side, D) in row-major
    order; chunk (a, b) becomes fine token (side*r + a, side*c + b).
    """
    s, d = trans.side, trans.dim
    b = z.tokens.shape[0]
    e = trans.mlp(z.tokens)
    fine = (e.reshape(b, z.rows, z.cols, s, s, d)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(b, z.rows * s * z.cols * s, d))
    rows, cols = z.rows * s, z.cols * s
    if pos_encoding:
        fine = fine + Tensor(sincos_2d(d, rows, cols), dtype=fine.dtype)
    if z.patch_size % s:
        raise ConfigError(f"patch {z.patch_size} cannot be split by {s}")
    return TokenGrid(fine, rows, cols, z.patch_size // s)


class OutputHead(Module):
    """Final adaLN modulation and a zero-initialised linear map D -> p*p*out."""

    def __init__(self, rng: np.random.Generator, dim: int, patch: int, out_channels: int = 1):
        self.dim = dim
        self.patch = patch
        self.out_channels = out_channels
        self.norm = LayerNorm(dim, affine=False)
        self.ada = Linear(rng, dim, 2 * dim, init="zeros")
        self.linear = Linear(rng, dim, patch * patch * out_channels, init="zeros")


def output_head(z: TokenGrid, head: OutputHead, c: Optional[Tensor] = None) -> Tensor:
    """Project each token to a p x p pixel block and tile the blocks: [B, H, W, out]."""
    if z.patch_size != head.patch:
        raise ConfigError(f"head expects patch {head.patch}, grid has {z.patch_size}")
    x = head.norm(z.tokens)
    if c is not None:
        b = x.shape[0]
        mod = head.ada(ad.silu(c)).reshape(b, 1, 2, head.dim)
        x = _modulate(x, mod[:, :, 0], mod[:, :, 1])
    v = head.linear(x)
    return unpatchify(v, z.rows, z.cols, head.patch, head.out_channels)
