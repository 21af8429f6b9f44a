"""Independent reference computations shared by the tests."""
import numpy as np

from ppdepth import autodiff as ad

# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list = []


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar f at x (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor: float = 1e-4) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / den))


def check_grads(fn, inputs, rng, floor: float = 1e-4):
    """Max relative error between reverse-mode and finite-difference gradients
    of sum(fn(*inputs) * r) for a fixed random projection r."""
    with ad.precision(np.float64):
        leaves = [ad.Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
        with ad.Tape():
            out = fn(*leaves)
            r = rng.standard_normal(out.shape)
            loss = ad.tsum(out * r)
            ad.backward(loss)
        worst = 0.0
        for i, leaf in enumerate(leaves):
            def f(xi, i=i):
                args = [ad.Tensor(xi if j == i else np.array(inputs[j], dtype=np.float64))
                        for j in range(len(inputs))]
                with ad.no_grad():
                    return float((fn(*args).data * r).sum())
            num = numeric_grad(f, np.array(inputs[i], dtype=np.float64))
            worst = max(worst, rel_err(leaf.grad, num, floor))
    return worst


def bilinear_reference(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Per-output-pixel loop, half-pixel centres, source clamped to the grid."""
    h, w = x.shape[:2]
    out = np.zeros((out_h, out_w) + x.shape[2:])
    for i in range(out_h):
        sy = max((i + 0.5) * h / out_h - 0.5, 0.0)
        y0 = min(int(sy), h - 1)
        y1 = min(y0 + 1, h - 1)
        wy = sy - y0
        for j in range(out_w):
            sx = max((j + 0.5) * w / out_w - 0.5, 0.0)
            x0 = min(int(sx), w - 1)
            x1 = min(x0 + 1, w - 1)
            wx = sx - x0
            out[i, j] = ((1 - wy) * ((1 - wx) * x[y0, x0] + wx * x[y0, x1])
                         + wy * ((1 - wx) * x[y1, x0] + wx * x[y1, x1]))
    return out


def randomize_zero_init(module, rng, scale: float = 0.05) -> None:
    """Give zero-initialised parameters (adaLN, gates, head, fusion W2) random values
    so that every path through the network carries signal."""
    for p in module.parameters():
        if not np.any(p.data):
            p.data = (rng.standard_normal(p.shape) * scale).astype(p.dtype)
