import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from ppdepth import autodiff as ad
from ppdepth.autodiff import ContractError, Tensor
from ppdepth.dit import ConfigError, ModelConfig
from ppdepth.flow import (Batch, SamplerSchedule, ScheduleError, TrainConfig, gradient_matching_loss,
                          interpolate, make_flow_sample, sample, train_step, velocity_loss)
from ppdepth.model import CascadeDiT
from ppdepth.optim import AdamWState

from oracles import check_grads


class ConstantVelocity:
    """Oracle model: returns a fixed field whatever the inputs."""

    def __init__(self, v):
        self.v = v

    def __call__(self, x, c, t, sem=None):
        return np.broadcast_to(self.v, x.shape)


def test_endpoints_and_algebra(rng):
    x0 = rng.uniform(-0.5, 0.5, size=(3, 8, 8))
    x1 = rng.standard_normal((3, 8, 8))
    assert np.array_equal(make_flow_sample(x0, rng, t=np.zeros(3), x1=x1).x_t, x0)
    assert np.array_equal(make_flow_sample(x0, rng, t=np.ones(3), x1=x1).x_t, x1)
    fs = make_flow_sample(x0, rng)
    assert fs.t.shape == (3,) and np.all((fs.t >= 0) & (fs.t <= 1))
    assert np.array_equal(fs.v_target, fs.x1 - x0)
    assert np.allclose(fs.x_t - x0, fs.t[:, None, None] * fs.v_target, atol=1e-12)


def test_make_flow_sample_range_contract(rng):
    with pytest.raises(ContractError):
        make_flow_sample(np.full((1, 4, 4), 3.0), rng)
    with pytest.raises(ContractError):
        make_flow_sample(np.zeros((1, 4, 4)), rng, t=np.array([1.5]))


@given(st.floats(0, 1))
def test_interpolate_invariant(t):
    rng = np.random.default_rng(0)
    x0, x1 = rng.standard_normal((2, 5))
    assert np.allclose(interpolate(x0, x1, t), t * x1 + (1 - t) * x0, rtol=0, atol=1e-15)


@pytest.mark.parametrize("n", [1, 2, 4, 16])
def test_sampler_telescopes_with_oracle(rng, n):
    x0 = rng.uniform(-0.5, 0.5, size=(16, 16, 1))
    x1 = rng.standard_normal((16, 16, 1))
    out = sample(np.zeros((16, 16, 1)), ConstantVelocity(x1 - x0), None, SamplerSchedule.uniform(n), x1=x1)
    assert np.max(np.abs(out - x0)) < 1e-6


@given(hnp.arrays(np.float64, 4, elements=st.floats(0.01, 0.99, allow_subnormal=False), unique=True))
def test_sampler_telescopes_any_schedule(inner):
    steps = (1.0,) + tuple(sorted(inner, reverse=True)) + (0.0,)
    rng = np.random.default_rng(1)
    v = rng.standard_normal((8, 8, 1))
    x1 = rng.standard_normal((8, 8, 1))
    out = sample(np.zeros((8, 8, 1)), ConstantVelocity(v), None, SamplerSchedule(steps), x1=x1)
    assert np.max(np.abs(out - (x1 - v))) < 1e-12


def test_schedule_validation():
    assert SamplerSchedule.uniform(4).steps == (1.0, 0.75, 0.5, 0.25, 0.0)
    assert SamplerSchedule.uniform(4).count == 4
    for bad in [(1.0,), (0.9, 0.0), (1.0, 0.1), (1.0, 0.5, 0.5, 0.0), (1.0, 0.3, 0.6, 0.0)]:
        with pytest.raises(ScheduleError):
            SamplerSchedule(bad)
    with pytest.raises(ScheduleError):
        SamplerSchedule.uniform(0)
    with pytest.raises(ScheduleError):
        sample(np.zeros((8, 8, 1)), ConstantVelocity(0.0), None, schedule=[1.0, 0.0])


# -- losses ----------------------------------------------------------------------

def test_velocity_loss_examples(rng):
    a = rng.standard_normal((2, 5, 5))
    assert velocity_loss(a, a).item() == 0
    assert velocity_loss(a + 1, a).item() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        velocity_loss(a, a[0])


def test_velocity_loss_two_pass_oracle(rng):
    a, b = rng.standard_normal((2, 3, 17, 19)).astype(np.float32)
    total = 0.0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        total += (x - y) ** 2
    assert abs(velocity_loss(a, b).item() - total / a.size) < 1e-6


def _grad_loss_loops(pred, target, scales):
    r = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    total = 0.0
    for s in range(scales):
        if s:
            h, w = r.shape[0] // 2, r.shape[1] // 2
            r = np.array([[(r[2 * i, 2 * j] + r[2 * i + 1, 2 * j] + r[2 * i, 2 * j + 1] + r[2 * i + 1, 2 * j + 1]) / 4
                           for j in range(w)] for i in range(h)])
        h, w = r.shape
        gx = sum(abs(r[i, j + 1] - r[i, j]) for i in range(h) for j in range(w - 1)) / (h * (w - 1))
        gy = sum(abs(r[i + 1, j] - r[i, j]) for i in range(h - 1) for j in range(w)) / ((h - 1) * w)
        total += gx + gy
    return total


def test_gradient_loss_hand_value():
    # dx: |1-0|, |2-3| -> mean 1; dy: |3-0|, |2-1| -> mean 2
    assert gradient_matching_loss(np.array([[0.0, 1.0], [3.0, 2.0]]), np.zeros((2, 2)), 1).item() == 3.0


@pytest.mark.parametrize("shape,scales", [((16, 16), 4), ((13, 18), 3), ((8, 9), 1)])
def test_gradient_loss_loop_oracle(rng, shape, scales):
    p, t = rng.standard_normal((2,) + shape)
    got = gradient_matching_loss(Tensor(p, dtype=np.float64), Tensor(t, dtype=np.float64), scales).item()
    assert got == pytest.approx(_grad_loss_loops(p, t, scales), rel=1e-12)


def test_gradient_loss_invariances(rng):
    a = rng.standard_normal((2, 16, 16))
    assert gradient_matching_loss(a, a).item() == 0
    assert gradient_matching_loss(a + 3.7, a).item() < 1e-5
    with pytest.raises(ValueError):
        gradient_matching_loss(np.zeros((8, 16)), np.zeros((8, 16)), scales=4)


def test_gradient_loss_grad_fd(rng):
    p, t = rng.standard_normal((2, 8, 8))
    assert check_grads(lambda x: gradient_matching_loss(x, t, 2), [p], rng) < 1e-4


@given(hnp.arrays(np.float64, (8, 8), elements=st.floats(-3, 3)),
       hnp.arrays(np.float64, (8, 8), elements=st.floats(-3, 3)))
def test_losses_nonnegative(a, b):
    assert velocity_loss(a, b).item() >= 0
    assert gradient_matching_loss(a, b, 2).item() >= 0


# -- training ------------------------------------------------------------------------

def tiny_model(semantic=False, seed=0):
    return CascadeDiT(ModelConfig(n_blocks=2, hidden_dim=32, coarse_patch=4, fine_patch=2, n_heads=2,
                                  semantic=semantic, time_freq_dim=32, seed=seed))


def _batch(rng, n=2, hw=16):
    depth = np.tile(np.linspace(-0.4, 0.4, hw, dtype=np.float32), (n, hw, 1))
    depth[:, hw // 4: hw // 2, hw // 4: hw // 2] = -0.3
    images = (0.5 + depth)[..., None].astype(np.float32)
    return Batch(images, depth, [f"b{i}" for i in range(n)])


def test_train_config_validation():
    for bad in (dict(lr=0.0), dict(lambda_g=-1.0), dict(grad_scales=0), dict(grad_space="pixel")):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict(bad)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"momentum": 0.9})
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()
    assert TrainConfig().lambda_g == 0.5


def test_lambda_zero_is_pure_velocity_loss(rng):
    b = _batch(rng)
    res = train_step(b, tiny_model(), None, AdamWState(), TrainConfig(lambda_g=0.0), np.random.default_rng(5))
    assert res.grad_loss == 0.0 and res.loss == res.velocity_loss
    res = train_step(b, tiny_model(), None, AdamWState(), TrainConfig(), np.random.default_rng(5))
    assert res.loss == pytest.approx(res.velocity_loss + 0.5 * res.grad_loss, rel=1e-6)


def test_loss_decreases_on_fixed_batch(rng):
    b = _batch(rng)
    b.x1 = rng.standard_normal(b.depths.shape).astype(np.float32)
    b.t = np.array([0.5, 0.5])
    m, st_ = tiny_model(), AdamWState()
    cfg = TrainConfig(lr=1e-3, grad_scales=2)
    losses = [train_step(b, m, None, st_, cfg, np.random.default_rng(i)).loss for i in range(100)]
    assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])


@pytest.mark.parametrize("space", ["velocity", "x0"])
def test_training_deterministic(rng, space):
    b = _batch(rng)
    cfg = TrainConfig(lr=1e-3, grad_scales=2, grad_space=space)

    def run():
        m, st_ = tiny_model(), AdamWState()
        out = [train_step(b, m, None, st_, cfg, np.random.default_rng([7, 0, i])).loss for i in range(5)]
        return out, m.state_dict()

    (la, sa), (lb, sb) = run(), run()
    assert la == lb
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)


def test_semantic_model_needs_encoder(rng):
    with pytest.raises(ConfigError):
        train_step(_batch(rng), tiny_model(semantic=True), None, AdamWState(), TrainConfig(),
                   np.random.default_rng(0))


def test_sample_with_real_model_shape(rng):
    m = tiny_model()
    img = rng.uniform(size=(16, 16, 1))
    out = sample(img, m, None, rng=np.random.default_rng(3))
    assert out.shape == (16, 16, 1) and np.all(np.isfinite(out))
    again = sample(img, m, None, rng=np.random.default_rng(3))
    assert np.array_equal(out, again)
