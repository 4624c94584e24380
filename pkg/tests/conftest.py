import numpy as np
import pytest

from fedimpres import nn


@pytest.fixture
def small_layers():
    return [nn.Flatten(), nn.Dense(8, 6), nn.Relu(), nn.Dense(6, 3)]


def finite_diff_loss(fn, x, h=1e-4):
    """Central finite differences of a scalar fn over every entry of x."""
    out = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        out[idx] = (fn(xp) - fn(xm)) / (2.0 * h)
    return out


def rel_err(approx, exact):
    scale = max(np.abs(exact).max(), 1e-12)
    return np.abs(approx - exact).max() / scale


def train_toy_server(n_classes=2, per_class=30, sigma=0.15, seed=0, epochs=40,
                     lr=0.1, hidden=16):
    """Small trained classifier on a blob task, for synthesis tests."""
    from fedimpres.data import ToySpec, make_toy_task

    ds = make_toy_task(ToySpec(n_classes, per_class, shape=(1, 6, 6),
                               sigma=sigma, seed=seed))
    dim = ds.images[0].size
    layers = [nn.Flatten(), nn.Dense(dim, hidden), nn.Relu(),
              nn.Dense(hidden, n_classes)]
    model = nn.init_model(layers, seed)
    rng = np.random.default_rng(seed + 1)
    for _ in range(epochs):
        order = rng.permutation(len(ds))
        for start in range(0, len(ds), 16):
            b = order[start:start + 16]
            grads, _ = nn.backward(model, ds.images[b], ds.labels[b])
            model = nn.sgd_step(model, grads, lr)
    return model, ds
