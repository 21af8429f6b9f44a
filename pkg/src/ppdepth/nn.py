"""Parameter containers and the small set of layers the models are built from."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Collects named parameters from attributes, recursively.

    Attributes holding a ``Tensor`` are parameters (constant tables are kept
    as plain arrays or underscore attributes); attributes holding a
    ``Module`` or a list of modules are children.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in params.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> None:
        """Stop gradient flow into this module; parameters stay listed."""
        for p in self.parameters():
            p.requires_grad = False

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())


def param(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    """y = x W + b, weight stored (in, out)."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True,
                 init: str = "xavier"):
        if init == "xavier":
            w = xavier_uniform(rng, d_in, d_out)
        elif init == "zeros":
            w = np.zeros((d_in, d_out))
        elif init == "normal":
            w = rng.normal(0.0, 0.02, size=(d_in, d_out))
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = param(w)
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, affine: bool = True, eps: float = 1e-6):
        self.eps = eps
        self.gamma = param(np.ones(dim)) if affine else None
        self.beta = param(np.zeros(dim)) if affine else None

    def __call__(self, x) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


class Mlp(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int,
                 zero_out: bool = False):
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_out, init="zeros" if zero_out else "xavier")

    def __call__(self, x) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class Attention(Module):
    """Multi-head self-attention over [B, T, D] token sequences."""

    def __init__(self, rng: np.random.Generator, dim: int, n_heads: int):
        if dim % n_heads:
            raise ValueError(f"dim {dim} not divisible by heads {n_heads}")
        self.n_heads = n_heads
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)

    def __call__(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        h = self.n_heads
        qkv = self.qkv(x).reshape(b, t, 3, h, d // h).transpose(2, 0, 3, 1, 4)
        out = ad.softmax_attention(qkv[0], qkv[1], qkv[2])
        out = out.transpose(0, 2, 1, 3).reshape(b, t, d)
        return self.proj(out)


def sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_2d(dim: int, rows: int, cols: int) -> np.ndarray:
    """Fixed 2-D sine/cosine table, shape (rows*cols, dim), row-major grid order."""
    if dim % 4:
        raise ValueError("positional dim must be divisible by 4")
    gy, gx = np.meshgrid(np.arange(rows, dtype=np.float64), np.arange(cols, dtype=np.float64),
                         indexing="ij")
    return np.concatenate([sincos_1d(dim // 2, gy), sincos_1d(dim // 2, gx)], axis=1)
