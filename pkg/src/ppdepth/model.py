"""The full velocity network: patchify, coarse blocks, token expansion,
semantic fusion, fine blocks and pixel head."""
from __future__ import annotations

from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dit import (CascadeTransition, ConfigError, DiTBlock, ModelConfig, OutputHead, PatchEmbed,
                  TimeEmbedding, TokenGrid, cascade_transition, dit_block, output_head, patchify)
from .nn import Module
from .semantic import SemanticFeatures, SemanticFusion, align_and_fuse, l2_normalize

ABLATIONS = {
    # (cascade, semantic)
    "vanilla": (False, False),
    "sp": (False, True),
    "sp-cas": (True, True),
}


def ablation_config(name: str, base: ModelConfig) -> ModelConfig:
    try:
        cascade, semantic = ABLATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}") from None
    d = base.to_dict()
    d.update(cascade=cascade, semantic=semantic)
    d.pop("fusion_block_index", None)
    return ModelConfig.from_dict(d)


class CascadeDiT(Module):
    """v_theta(x_t, t, c[, semantics]) on channels-last pixel grids."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        rng = np.random.default_rng(cfg.seed)
        d = cfg.hidden_dim
        self.cfg = cfg
        self.embed = PatchEmbed(rng, cfg.input_patch, cfg.in_channels, d)
        self.time = TimeEmbedding(rng, d, cfg.time_freq_dim)
        self.blocks = [DiTBlock(rng, d, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.n_blocks)]
        self.transition = CascadeTransition(rng, d, cfg.expand_factor) if cfg.cascade else None
        self.fusion = SemanticFusion(rng, d, cfg.semantic_dim) if cfg.semantic else None
        self.head = OutputHead(rng, d, cfg.fine_patch, 1)

    def __call__(self, x_t, c, t, sem: Optional[SemanticFeatures] = None) -> Tensor:
        return self.forward(x_t, c, t, sem)

    def forward(self, x_t, c, t, sem: Optional[SemanticFeatures] = None, return_tokens: bool = False):
        cfg = self.cfg
        x_t, c = ad.as_tensor(x_t), ad.as_tensor(c)
        squeeze = x_t.ndim == 3
        if squeeze:
            x_t = x_t.reshape((1,) + x_t.shape)
            c = c.reshape((1,) + c.shape)
        if x_t.shape[:3] != c.shape[:3]:
            raise ConfigError(f"x_t {x_t.shape} and condition {c.shape} extents differ")
        if x_t.shape[3] + c.shape[3] != cfg.in_channels:
            raise ConfigError(f"{x_t.shape[3]}+{c.shape[3]} channels != in_channels {cfg.in_channels}")
        h, w = x_t.shape[1:3]
        if h % cfg.input_patch or w % cfg.input_patch:
            raise ConfigError(f"input {h}x{w} not divisible by patch {cfg.input_patch}")
        if sem is not None and self.fusion is None:
            raise ConfigError("semantic features given to a model built without fusion")
        b = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (b,))

        a_t = ad.concat([x_t, c], axis=-1)
        z = patchify(a_t, cfg.input_patch, self.embed)
        temb = self.time(t)
        split = cfg.fusion_index
        for blk in self.blocks[:split]:
            z = dit_block(z, temb, blk)
        if self.transition is not None:
            z = cascade_transition(z, self.transition)
        if sem is not None:
            e_hat = sem if sem.normalized else l2_normalize(sem)
            z = align_and_fuse(z, e_hat, self.fusion)
        for blk in self.blocks[split:]:
            z = dit_block(z, temb, blk)
        v = output_head(z, self.head, temb)
        if squeeze:
            v = v.reshape(v.shape[1:])
        return (v, z) if return_tokens else v


def count_tokens(cfg: ModelConfig, h: int, w: int) -> tuple[int, int]:
    """(tokens per coarse-stage block, tokens per fine-stage block)."""
    fine = (h // cfg.fine_patch) * (w // cfg.fine_patch)
    if not cfg.cascade:
        return fine, fine
    return (h // cfg.coarse_patch) * (w // cfg.coarse_patch), fine
