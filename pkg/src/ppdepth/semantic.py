"""Semantic prompting: frozen encoder features, L2 normalisation, spatial
alignment to the DiT token grid and MLP fusion into the tokens."""
from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .checkpoint import pack_json, unpack_json
from .autodiff import ContractError, Tape, Tensor
from .dit import ConfigError, TokenGrid, patchify, PatchEmbed, unpatchify
from .nn import Attention, LayerNorm, Linear, Mlp, Module
from .optim import AdamWState, adamw_step

log = logging.getLogger(__name__)

L2_EPS = 1e-8


class FeatureFormatError(ValueError):
    pass


@dataclass
class SemanticFeatures:
    tokens: Tensor  # [B, T', D'] (an unbatched [T', D'] input is promoted)
    rows: int
    cols: int
    normalized: bool = False

    def __post_init__(self) -> None:
        if not isinstance(self.tokens, Tensor):
            self.tokens = ad.as_tensor(np.asarray(self.tokens))
        if self.tokens.ndim == 2:
            self.tokens = self.tokens.reshape((1,) + self.tokens.shape)
        if self.tokens.ndim != 3:
            raise ValueError(f"feature tokens must be [B, T', D'], got {self.tokens.shape}")
        if self.rows * self.cols != self.tokens.shape[1]:
            raise ValueError(f"rows*cols = {self.rows * self.cols} != T' = {self.tokens.shape[1]}")

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]

    def scaled(self, k: float) -> "SemanticFeatures":
        return SemanticFeatures(Tensor(self.tokens.data * k, dtype=self.tokens.dtype),
                                self.rows, self.cols, False)


def l2_normalize(e: SemanticFeatures, eps: float = L2_EPS) -> SemanticFeatures:
    """Divide every token by its own L2 norm (clamped below at ``eps``)."""
    x = e.tokens
    norm = ad.sqrt(ad.tsum(ad.square(x), axis=-1, keepdims=True))
    norm = ad.maximum(norm, eps)
    return SemanticFeatures(x / norm, e.rows, e.cols, normalized=True)


class SemanticFusion(Module):
    """z' = z + W2 gelu(W1 [z ; B(e)]), W2 zero at init so fusion starts as a no-op."""

    def __init__(self, rng: np.random.Generator, dim: int, sem_dim: int):
        self.dim = dim
        self.sem_dim = sem_dim
        self.fc1 = Linear(rng, dim + sem_dim, dim)
        self.fc2 = Linear(rng, dim, dim, init="zeros")

    def __call__(self, z: Tensor, e: Tensor) -> Tensor:
        h = ad.concat([z, e], axis=-1)
        return z + self.fc2(ad.gelu(self.fc1(h)))


def resize_features(e: SemanticFeatures, rows: int, cols: int) -> Tensor:
    """Bilinearly resample the feature grid (as a channels-last image) to rows x cols."""
    b, _, d = e.tokens.shape
    grid = e.tokens.reshape(b, e.rows, e.cols, d)
    grid = ad.bilinear_resize(grid, rows, cols)
    return grid.reshape(b, rows * cols, d)


def align_and_fuse(z: TokenGrid, e_hat: SemanticFeatures, fusion: SemanticFusion) -> TokenGrid:
    if not e_hat.normalized:
        raise ContractError("semantic features must be L2-normalised before fusion")
    if e_hat.dim != fusion.sem_dim:
        raise ContractError(f"feature dim {e_hat.dim} != fusion input {fusion.sem_dim}")
    aligned = resize_features(e_hat, z.rows, z.cols)
    if aligned.shape[0] != z.tokens.shape[0]:
        if aligned.shape[0] != 1:
            raise ContractError("feature batch does not match token batch")
        aligned = ad.broadcast_to(aligned, (z.tokens.shape[0],) + aligned.shape[1:])
    return z.replace(fusion(z.tokens, aligned))


# ---------------------------------------------------------------------------
# toy encoder
# ---------------------------------------------------------------------------

@dataclass
class EncoderConfig:
    patch: int = 8
    n_blocks: int = 4
    dim: int = 128
    n_heads: int = 4
    in_channels: int = 1
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown encoder config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.patch < 1 or self.n_blocks < 1 or self.dim < 1:
            raise ConfigError("encoder patch, n_blocks and dim must be positive")
        if self.dim % self.n_heads or self.dim % 4:
            raise ConfigError("encoder dim must be divisible by n_heads and by 4")

    def to_dict(self) -> dict:
        return asdict(self)


class _EncoderBlock(Module):
    def __init__(self, rng, dim, n_heads):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(rng, dim, n_heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(rng, dim, 4 * dim, dim)

    def __call__(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ToyEncoder(Module):
    """Small ViT mapping a [B, H, W, C] image to [B, T', D'] final-layer tokens."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.embed = PatchEmbed(rng, cfg.patch, cfg.in_channels, cfg.dim)
        self.blocks = [_EncoderBlock(rng, cfg.dim, cfg.n_heads) for _ in range(cfg.n_blocks)]
        self.norm = LayerNorm(cfg.dim)

    def tokens(self, image) -> TokenGrid:
        x = ad.as_tensor(image)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        z = patchify(x, self.cfg.patch, self.embed)
        h = z.tokens
        for blk in self.blocks:
            h = blk(h)
        return z.replace(self.norm(h))

    def __call__(self, image) -> SemanticFeatures:
        """Frozen inference: no tape, no gradients into the encoder."""
        with ad.no_grad():
            z = self.tokens(image)
        return SemanticFeatures(Tensor(z.tokens.data, dtype=z.tokens.dtype), z.rows, z.cols, False)

    encode = __call__


class DepthProbeHead(Module):
    """Linear token -> p*p pixel regression used only for the pretext task."""

    def __init__(self, rng, dim: int, patch: int):
        self.patch = patch
        self.linear = Linear(rng, dim, patch * patch)

    def __call__(self, z: TokenGrid) -> Tensor:
        out = unpatchify(self.linear(z.tokens), z.rows, z.cols, self.patch, 1)
        return out.reshape(out.shape[:3])


def scale_shift_invariant_loss(pred: Tensor, target, mask=None) -> Tensor:
    """Per-image least-squares scale/shift alignment of ``pred`` to ``target``, then MSE.

    pred, target: [B, H, W].
    """
    target = ad.as_tensor(np.asarray(target, dtype=pred.dtype))
    b = pred.shape[0]
    p = pred.reshape(b, -1)
    g = target.reshape(b, -1)
    n = float(p.shape[1])
    sp = p.sum(axis=1, keepdims=True)
    sg = g.sum(axis=1, keepdims=True)
    spp = (p * p).sum(axis=1, keepdims=True)
    spg = (p * g).sum(axis=1, keepdims=True)
    det = spp * n - sp * sp + 1e-6
    s = (spg * n - sp * sg) / det
    off = (spp * sg - sp * spg) / det
    return ad.mean(ad.square(p * s + off - g))


def pretrain_encoder(
    images: np.ndarray,
    depths: np.ndarray,
    cfg: EncoderConfig = EncoderConfig(),
    steps: int = 1000,
    batch_size: int = 8,
    lr: float = 3e-4,
    seed: int = 0,
) -> tuple[ToyEncoder, list[float]]:
    """Train the toy encoder on depth regression, then freeze it.

    images: [N, H, W, C] in [0, 1]; depths: [N, H, W] normalised depth.
    """
    encoder = ToyEncoder(cfg)
    head = DepthProbeHead(np.random.default_rng(cfg.seed + 1), cfg.dim, cfg.patch)
    params = {**{f"enc.{k}": v for k, v in encoder.named_parameters()},
              **{f"head.{k}": v for k, v in head.named_parameters()}}
    state = AdamWState()
    history = []
    n = len(images)
    for step in range(steps):
        rng = np.random.default_rng([seed, step])
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        for p in params.values():
            p.grad = None
        with Tape() as tape:
            pred = head(encoder.tokens(images[idx]))
            loss = scale_shift_invariant_loss(pred, depths[idx])
            ad.backward(loss)
        tape.clear()
        adamw_step(params, None, state, lr=lr, weight_decay=0.0)
        history.append(loss.item())
        if step % 100 == 0:
            log.info("encoder pretext step %d loss %.5f", step, history[-1])
    encoder.freeze()
    return encoder, history


def probe_features(encoder: ToyEncoder, images: np.ndarray, chunk: int = 32) -> tuple[np.ndarray, int, int]:
    out = []
    rows = cols = 0
    for i in range(0, len(images), chunk):
        f = encoder(images[i:i + chunk])
        rows, cols = f.rows, f.cols
        out.append(f.tokens.data.astype(np.float64))
    return np.concatenate(out), rows, cols


def fit_linear_probe(feats: np.ndarray, depths: np.ndarray, patch: int, ridge: float = 1e-3) -> np.ndarray:
    """Closed-form ridge regression tokens -> patch pixels. Returns weights [D'+1, p*p]."""
    n, t, d = feats.shape
    h, w = depths.shape[1:]
    targets = depths.reshape(n, h // patch, patch, w // patch, patch).transpose(0, 1, 3, 2, 4)
    targets = targets.reshape(n * t, patch * patch)
    x = np.concatenate([feats.reshape(n * t, d), np.ones((n * t, 1))], axis=1)
    a = x.T @ x + ridge * np.eye(d + 1)
    return np.linalg.solve(a, x.T @ targets)


def apply_linear_probe(feats: np.ndarray, weights: np.ndarray, rows: int, cols: int, patch: int) -> np.ndarray:
    n, t, d = feats.shape
    x = np.concatenate([feats.reshape(n * t, d), np.ones((n * t, 1))], axis=1)
    y = (x @ weights).reshape(n, rows, cols, patch, patch).transpose(0, 1, 3, 2, 4)
    return y.reshape(n, rows * patch, cols * patch)


def encoder_entries(encoder: ToyEncoder, prefix: str = "encoder/") -> dict[str, np.ndarray]:
    out = {prefix + k: v for k, v in encoder.state_dict().items()}
    out[prefix + "config"] = pack_json(encoder.cfg.to_dict())
    return out


def encoder_from_entries(entries: dict[str, np.ndarray], prefix: str = "encoder/") -> Optional[ToyEncoder]:
    """Rebuild a frozen encoder from checkpoint entries, or None if absent."""
    if prefix + "config" not in entries:
        return None
    cfg = EncoderConfig.from_dict(unpack_json(entries[prefix + "config"]))
    enc = ToyEncoder(cfg)
    enc.load_state_dict({k[len(prefix):]: v for k, v in entries.items()
                         if k.startswith(prefix) and k != prefix + "config"})
    enc.freeze()
    return enc


def save_encoder(path: Union[str, Path], encoder: ToyEncoder) -> None:
    ckpt.save(path, encoder_entries(encoder))


def load_encoder(path: Union[str, Path]) -> ToyEncoder:
    enc = encoder_from_entries(ckpt.load(path))
    if enc is None:
        raise ckpt.CheckpointFormatError(f"{path}: no encoder in checkpoint")
    return enc


# ---------------------------------------------------------------------------
# precomputed feature files
# ---------------------------------------------------------------------------

FEATURE_MAGIC = b"PPSF"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIIII")


def save_features(path: Union[str, Path], features: Union[SemanticFeatures, np.ndarray],
                  rows: Optional[int] = None, cols: Optional[int] = None) -> None:
    """Write one image's features: magic, version, rows, cols, D', then f32 row-major."""
    if isinstance(features, SemanticFeatures):
        if features.tokens.shape[0] != 1:
            raise ValueError("feature files hold a single image")
        arr = features.tokens.data[0]
        rows, cols = features.rows, features.cols
    else:
        arr = np.asarray(features)
        if arr.ndim == 3:
            rows, cols = arr.shape[:2]
            arr = arr.reshape(rows * cols, -1)
        if rows is None or cols is None or rows * cols != arr.shape[0]:
            raise ValueError("rows/cols must describe the token count")
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, rows, cols, arr.shape[1])
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_precomputed_features(path: Union[str, Path],
                              grid: Union[None, str, Sequence[int]] = None,
                              dim: Optional[int] = None) -> SemanticFeatures:
    """Read a feature file; ``grid`` may be ``"square"`` or an expected (rows, cols)."""
    blob = Path(path).read_bytes()
    if len(blob) < _FEATURE_HEADER.size:
        raise FeatureFormatError(f"{path}: truncated header")
    magic, version, rows, cols, d = _FEATURE_HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    expected = rows * cols * d * 4
    payload = len(blob) - _FEATURE_HEADER.size
    if payload != expected:
        raise FeatureFormatError(f"{path}: payload {payload} bytes, header implies {expected}")
    if grid == "square" and rows != cols:
        raise FeatureFormatError(f"{path}: manifest expects a square grid, file has {rows}x{cols}")
    if grid not in (None, "square") and tuple(grid) != (rows, cols):
        raise FeatureFormatError(f"{path}: grid {rows}x{cols} != manifest {tuple(grid)}")
    if dim is not None and dim != d:
        raise FeatureFormatError(f"{path}: feature dim {d} != manifest {dim}")
    arr = np.frombuffer(blob, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(rows * cols, d)
    return SemanticFeatures(Tensor(arr.astype(np.float32), dtype=np.float32), rows, cols, False)
