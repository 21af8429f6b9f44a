"""Flow matching on normalised depth: straight-path interpolation between
depth (t=0) and Gaussian noise (t=1), velocity regression and Euler sampling."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tape, Tensor
from .depth import check_normalized_range
from .dit import ConfigError
from .optim import AdamWState, adamw_step


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class FlowSample:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray  # one time per batch element, broadcastable against x0
    x_t: np.ndarray
    v_target: np.ndarray


@dataclass(frozen=True)
class SamplerSchedule:
    steps: tuple[float, ...]

    def __post_init__(self) -> None:
        s = tuple(float(v) for v in self.steps)
        object.__setattr__(self, "steps", s)
        if len(s) < 2:
            raise ScheduleError("a schedule needs at least two time points")
        if s[0] != 1.0 or s[-1] != 0.0:
            raise ScheduleError(f"schedule must run from 1 to 0, got {s[0]} .. {s[-1]}")
        if any(b >= a for a, b in zip(s, s[1:])):
            raise ScheduleError("schedule must be strictly decreasing")

    @classmethod
    def uniform(cls, count: int = 4) -> "SamplerSchedule":
        if count < 1:
            raise ScheduleError("need at least one step")
        ts = np.linspace(1.0, 0.0, count + 1)
        ts[0], ts[-1] = 1.0, 0.0
        return cls(tuple(ts))

    @property
    def count(self) -> int:
        return len(self.steps) - 1


def _bcast_t(t: np.ndarray, ndim: int) -> np.ndarray:
    return np.asarray(t).reshape((-1,) + (1,) * (ndim - 1))


def interpolate(x0: np.ndarray, x1: np.ndarray, t) -> np.ndarray:
    """x_t = t*x1 + (1-t)*x0, with t per leading (batch) element or scalar."""
    t = np.asarray(t, dtype=x0.dtype)
    if t.ndim:
        t = _bcast_t(t, x0.ndim)
    return t * x1 + (1 - t) * x0


def make_flow_sample(x0, rng: np.random.Generator, t=None, x1=None, check_range: bool = True) -> FlowSample:
    """Draw noise and a time for a batch of normalised depth maps x0 [B, ...].

    t ~ U(0, 1) per batch element unless given; x1 ~ N(0, I) unless given.
    """
    x0 = np.asarray(x0)
    if check_range:
        check_normalized_range(x0)
    if x1 is None:
        x1 = rng.standard_normal(x0.shape).astype(x0.dtype)
    else:
        x1 = np.asarray(x1, dtype=x0.dtype)
        if x1.shape != x0.shape:
            raise ValueError(f"noise shape {x1.shape} != depth shape {x0.shape}")
    if t is None:
        t = rng.uniform(0.0, 1.0, size=x0.shape[0] if x0.ndim else 1)
    t = np.asarray(t, dtype=x0.dtype).reshape(-1)
    if np.any(t < 0) or np.any(t > 1):
        raise ContractError("t must lie in [0, 1]")
    if x0.ndim == 0 or t.size == 1:
        x_t = interpolate(x0, x1, t.reshape(()))
    else:
        x_t = interpolate(x0, x1, t)
    return FlowSample(x0, x1, t, x_t, x1 - x0)


def velocity_loss(pred, target) -> Tensor:
    """Mean squared error over all elements."""
    pred = ad.as_tensor(pred)
    target = ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"velocity_loss shape mismatch: {pred.shape} vs {target.shape}")
    d = pred - target
    return ad.mean(d * d)


def _avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling over the last two axes (odd trailing row/col dropped)."""
    h, w = x.shape[-2] // 2 * 2, x.shape[-1] // 2 * 2
    x = x[..., :h, :w]
    lead = x.shape[:-2]
    x = x.reshape(lead + (h // 2, 2, w // 2, 2))
    n = len(lead)
    return ad.tsum(x, axis=(n + 1, n + 3)) * 0.25


def gradient_matching_loss(pred, target, scales: int = 4) -> Tensor:
    """Multi-scale L1 between forward-difference gradients of pred and target.

    pred, target: [..., H, W]. Per scale: mean |dx(pred - target)| +
    mean |dy(pred - target)|; scales are summed, each one a 2x average-pool
    of the previous.
    """
    pred = ad.as_tensor(pred)
    target = ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"gradient_matching_loss shape mismatch: {pred.shape} vs {target.shape}")
    if scales < 1:
        raise ValueError("scales must be >= 1")
    h, w = pred.shape[-2:]
    if h < 2 ** scales or w < 2 ** scales:
        raise ValueError(f"{h}x{w} image too small for {scales} scales (needs >= {2 ** scales})")
    r = pred - target
    total = None
    for s in range(scales):
        if s:
            r = _avg_pool2(r)
        gx = r[..., :, 1:] - r[..., :, :-1]
        gy = r[..., 1:, :] - r[..., :-1, :]
        term = ad.mean(ad.tabs(gx)) + ad.mean(ad.tabs(gy))
        total = term if total is None else total + term
    return total


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    lambda_g: float = 0.5
    grad_scales: int = 4
    grad_space: str = "velocity"  # or "x0"

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.lambda_g < 0:
            raise ConfigError("lambda_g must be >= 0")
        if self.grad_scales < 1:
            raise ConfigError("grad_scales must be >= 1")
        if self.grad_space not in ("velocity", "x0"):
            raise ConfigError(f"grad_space must be 'velocity' or 'x0', got {self.grad_space!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown training keys: {sorted(extra)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    images: np.ndarray  # [B, H, W, 1] in [0, 1]
    depths: np.ndarray  # [B, H, W] normalised depth
    ids: Sequence[str] = ()
    x1: Optional[np.ndarray] = None  # fixed noise, mainly for overfit tests
    t: Optional[np.ndarray] = None


@dataclass
class StepResult:
    loss: float
    velocity_loss: float
    grad_loss: float


def model_dtype(model) -> np.dtype:
    for _, p in model.named_parameters():
        return p.dtype
    return ad.default_dtype()


def semantic_features(model, encoder, images: np.ndarray):
    """Frozen-encoder prompt for ``images``, or None when the model has no fusion."""
    if getattr(model, "fusion", None) is None:
        return None
    if encoder is None:
        raise ConfigError("model uses semantic fusion but no encoder was given")
    return encoder(images)


def train_step(batch: Batch, model, encoder, opt_state: AdamWState, cfg: TrainConfig,
               rng: np.random.Generator, params: Optional[dict] = None) -> StepResult:
    """One AdamW step on L = MSE(v) + lambda_g * gradient matching."""
    dt = model_dtype(model)
    images = np.asarray(batch.images, dtype=dt)
    if images.ndim == 3:
        images = images[..., None]
    x0 = np.asarray(batch.depths, dtype=dt)
    fs = make_flow_sample(x0, rng, t=batch.t, x1=batch.x1)
    sem = semantic_features(model, encoder, images)
    params = dict(model.named_parameters()) if params is None else params
    for p in params.values():
        p.grad = None
    t = np.broadcast_to(fs.t, (x0.shape[0],))
    with Tape() as tape:
        v = model(fs.x_t[..., None], images, t, sem)
        v = v.reshape(v.shape[:3])
        lv = velocity_loss(v, fs.v_target)
        if cfg.lambda_g > 0:
            if cfg.grad_space == "velocity":
                lg = gradient_matching_loss(v, fs.v_target, cfg.grad_scales)
            else:
                x0_hat = Tensor(fs.x_t, dtype=dt) - v * _bcast_t(t.astype(dt), 3)
                lg = gradient_matching_loss(x0_hat, x0, cfg.grad_scales)
            loss = lv + lg * cfg.lambda_g
        else:
            lg = None
            loss = lv
        ad.backward(loss)
    tape.clear()
    adamw_step(params, None, opt_state, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
               weight_decay=cfg.weight_decay)
    return StepResult(loss.item(), lv.item(), 0.0 if lg is None else lg.item())


def sample(image, model, encoder, schedule: SamplerSchedule = SamplerSchedule.uniform(4),
           rng: Optional[np.random.Generator] = None, x1=None) -> np.ndarray:
    """Integrate dx/dt = v from t=1 (noise) to t=0 with Euler steps.

    image: [H, W, 1] or [B, H, W, 1]. Returns normalised depth of the same
    shape. Never touches ground truth.
    """
    if not isinstance(schedule, SamplerSchedule):
        raise ScheduleError("schedule must be a SamplerSchedule")
    dt = model_dtype(model) if hasattr(model, "named_parameters") else np.float64
    image = np.asarray(image, dtype=dt)
    squeeze = image.ndim == 3
    if squeeze:
        image = image[None]
    shape = image.shape[:3] + (1,)
    if x1 is None:
        rng = np.random.default_rng() if rng is None else rng
        x = rng.standard_normal(shape[:3]).astype(dt)[..., None]
    else:
        x = np.asarray(x1, dtype=dt).reshape(shape)
    sem = semantic_features(model, encoder, image)
    b = shape[0]
    with ad.no_grad():
        for t_cur, t_next in zip(schedule.steps, schedule.steps[1:]):
            v = model(x, image, np.full(b, t_cur), sem)
            v = v.data if isinstance(v, Tensor) else np.asarray(v)
            x = x + v.astype(dt, copy=False) * (t_next - t_cur)
    return x[0] if squeeze else x
