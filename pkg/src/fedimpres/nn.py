"""Minimal differentiable neural-net core on float64 numpy.

A model is a feature extractor (any mix of dense / relu / flatten /
conv2d layers) followed by a linear classifier head. Reverse-mode
gradients are computed with respect to every parameter *and* the input
pixels, which is what the image-synthesis stage needs.

Models, gradients and layer descriptors are frozen dataclasses; every
operation returns new values, so they are safe to share between worker
threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, InputError, NumericError

# ---------------------------------------------------------------------------
# Layer descriptors


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Conv2d:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    pad: int = 0


# ---------------------------------------------------------------------------
# Model / gradients


@dataclass(frozen=True)
class Model:
    """Layer spec plus parameters; the last layer must be Dense (the head)."""

    layers: tuple
    extractor: tuple  # per extractor layer: tuple of parameter arrays
    clf_weight: np.ndarray  # [n_classes, feat_dim]
    clf_bias: np.ndarray  # [n_classes]

    @property
    def n_classes(self) -> int:
        return self.clf_weight.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.clf_weight.shape[1]


@dataclass(frozen=True)
class GradientSet:
    """Per-parameter gradients, shape-congruent with a Model."""

    extractor: tuple
    clf_weight: np.ndarray
    clf_bias: np.ndarray


def init_model(layers, seed: int) -> Model:
    """He-style seeded initialization. The final layer must be Dense."""
    layers = tuple(layers)
    if not layers or not isinstance(layers[-1], Dense):
        raise ContractError("layer spec must end with a Dense classifier head")
    rng = np.random.default_rng(seed)
    ext = []
    for layer in layers[:-1]:
        if isinstance(layer, Dense):
            w = rng.normal(0.0, np.sqrt(2.0 / layer.in_dim), (layer.out_dim, layer.in_dim))
            ext.append((w, np.zeros(layer.out_dim)))
        elif isinstance(layer, Conv2d):
            fan_in = layer.in_ch * layer.kernel * layer.kernel
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                           (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel))
            ext.append((w, np.zeros(layer.out_ch)))
        else:
            ext.append(())
    head = layers[-1]
    cw = rng.normal(0.0, np.sqrt(1.0 / head.in_dim), (head.out_dim, head.in_dim))
    return Model(layers, tuple(ext), cw, np.zeros(head.out_dim))


def zero_model(layers) -> Model:
    """All-zero parameters with the given layer spec."""
    m = init_model(layers, 0)
    ext = tuple(tuple(np.zeros_like(a) for a in p) for p in m.extractor)
    return Model(m.layers, ext, np.zeros_like(m.clf_weight), np.zeros_like(m.clf_bias))


# ---------------------------------------------------------------------------
# Per-layer forward / backward


def _im2col(x, k, stride, pad):
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = np.empty((b, c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols, (xp.shape, ho, wo)


def _layer_forward(layer, params, x, idx):
    if isinstance(layer, Dense):
        if x.ndim != 2 or x.shape[1] != layer.in_dim:
            raise ContractError(
                f"layer {idx} (dense): expected input [B,{layer.in_dim}], got {x.shape}")
        w, b = params
        return x @ w.T + b, x
    if isinstance(layer, Relu):
        return np.maximum(x, 0.0), x
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1), x.shape
    if isinstance(layer, Conv2d):
        if x.ndim != 4 or x.shape[1] != layer.in_ch:
            raise ContractError(
                f"layer {idx} (conv2d): expected input [B,{layer.in_ch},H,W], got {x.shape}")
        w, b = params
        cols, geom = _im2col(x, layer.kernel, layer.stride, layer.pad)
        out = np.einsum("bcijhw,ocij->bohw", cols, w) + b[None, :, None, None]
        return out, (cols, geom, x.shape)
    raise ContractError(f"layer {idx}: unknown layer type {type(layer).__name__}")


def _layer_backward(layer, params, cache, dout):
    if isinstance(layer, Dense):
        x = cache
        w, _ = params
        return dout @ w, (dout.T @ x, dout.sum(axis=0))
    if isinstance(layer, Relu):
        return dout * (cache > 0.0), ()
    if isinstance(layer, Flatten):
        return dout.reshape(cache), ()
    if isinstance(layer, Conv2d):
        cols, (xp_shape, ho, wo), x_shape = cache
        w, _ = params
        k, s, p = layer.kernel, layer.stride, layer.pad
        dw = np.einsum("bohw,bcijhw->ocij", dout, cols)
        db = dout.sum(axis=(0, 2, 3))
        dcols = np.einsum("bohw,ocij->bcijhw", dout, w)
        dxp = np.zeros(xp_shape)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, i, j]
        h, wdt = x_shape[2], x_shape[3]
        return dxp[:, :, p:p + h, p:p + wdt], (dw, db)
    raise ContractError(f"unknown layer type {type(layer).__name__}")


def _extractor_forward(model: Model, x):
    h = x
    caches = []
    for idx, (layer, params) in enumerate(zip(model.layers[:-1], model.extractor)):
        h, cache = _layer_forward(layer, params, h, idx)
        if not np.all(np.isfinite(h)):
            raise NumericError(f"non-finite output at layer {idx} ({type(layer).__name__})")
        caches.append(cache)
    if h.ndim != 2 or h.shape[1] != model.feat_dim:
        raise ContractError(
            f"classifier head: expected features [B,{model.feat_dim}], got {h.shape}")
    return h, caches


def _extractor_backward(model: Model, caches, dh):
    grads = [None] * len(caches)
    dx = dh
    for idx in range(len(caches) - 1, -1, -1):
        layer = model.layers[idx]
        dx, g = _layer_backward(layer, model.extractor[idx], caches[idx], dx)
        if not np.all(np.isfinite(dx)):
            raise NumericError(f"non-finite gradient at layer {idx} ({type(layer).__name__})")
        grads[idx] = g
    return tuple(grads), dx


# ---------------------------------------------------------------------------
# Public operations


def forward(model: Model, batch: np.ndarray) -> np.ndarray:
    """Logits [B, n_classes] for a batch; pure and deterministic."""
    h, _ = _extractor_forward(model, np.asarray(batch, dtype=np.float64))
    logits = h @ model.clf_weight.T + model.clf_bias
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits at classifier head")
    return logits


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, n_classes, batch):
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != batch:
        raise InputError(f"labels must be [B={batch}], got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InputError(f"label out of range [0,{n_classes})")
    return labels.astype(np.int64)


def ce_loss(logits: np.ndarray, labels) -> float:
    """Mean softmax cross-entropy over the batch."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise InputError(f"logits must be [B,K] with B >= 1, got {logits.shape}")
    labels = _check_labels(labels, logits.shape[1], logits.shape[0])
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def backward(model: Model, batch, labels):
    """Gradients of mean CE wrt all parameters and wrt the input pixels.

    Returns (GradientSet, input_grads) where input_grads has the batch's
    shape.
    """
    x = np.asarray(batch, dtype=np.float64)
    h, caches = _extractor_forward(model, x)
    logits = h @ model.clf_weight.T + model.clf_bias
    labels = _check_labels(labels, model.n_classes, x.shape[0])
    p = softmax(logits)
    d = p.copy()
    d[np.arange(len(labels)), labels] -= 1.0
    d /= len(labels)
    gw = d.T @ h
    gb = d.sum(axis=0)
    ext_grads, dx = _extractor_backward(model, caches, d @ model.clf_weight)
    return GradientSet(ext_grads, gw, gb), dx


def classifier_grad(features: np.ndarray, logits: np.ndarray, labels) -> np.ndarray:
    """Closed-form head gradient of mean CE: [K, F+1] = [dW | db].

    Built from (softmax - onehot) and the features, so it can itself be
    differentiated wrt features/logits without a second-order engine.
    """
    features = np.asarray(features, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if features.shape[0] != logits.shape[0]:
        raise ContractError(
            f"features batch {features.shape[0]} != logits batch {logits.shape[0]}")
    labels = _check_labels(labels, logits.shape[1], logits.shape[0])
    d = softmax(logits)
    d[np.arange(len(labels)), labels] -= 1.0
    d /= len(labels)
    return np.concatenate([d.T @ features, d.sum(axis=0)[:, None]], axis=1)


def sgd_step(model: Model, grads: GradientSet, lr: float) -> Model:
    """One plain SGD step: p' = p - lr * g, returned as a new Model."""
    if lr <= 0.0:
        raise InputError(f"lr must be positive, got {lr}")
    ext = []
    for params, gs in zip(model.extractor, grads.extractor):
        if len(params) != len(gs):
            raise ContractError("gradient set not congruent with model")
        new = []
        for p, g in zip(params, gs):
            if p.shape != g.shape:
                raise ContractError(f"gradient shape {g.shape} != param shape {p.shape}")
            new.append(p - lr * g)
        ext.append(tuple(new))
    if (grads.clf_weight.shape != model.clf_weight.shape
            or grads.clf_bias.shape != model.clf_bias.shape):
        raise ContractError("classifier gradient shape mismatch")
    return Model(model.layers, tuple(ext),
                 model.clf_weight - lr * grads.clf_weight,
                 model.clf_bias - lr * grads.clf_bias)


def add_scaled(a: GradientSet, b: GradientSet, scale: float = 1.0) -> GradientSet:
    """a + scale * b, elementwise over every gradient tensor."""
    ext = tuple(tuple(x + scale * y for x, y in zip(pa, pb))
                for pa, pb in zip(a.extractor, b.extractor))
    return GradientSet(ext, a.clf_weight + scale * b.clf_weight,
                       a.clf_bias + scale * b.clf_bias)


def prox_grads(model: Model, anchor: Model) -> GradientSet:
    """Gradient of (1/2)||w - w_anchor||^2: simply w - w_anchor."""
    ext = tuple(tuple(p - q for p, q in zip(pa, pb))
                for pa, pb in zip(model.extractor, anchor.extractor))
    return GradientSet(ext, model.clf_weight - anchor.clf_weight,
                       model.clf_bias - anchor.clf_bias)


def model_arrays(model: Model) -> list:
    """Flat parameter list: extractor tensors in order, then head W, b."""
    out = []
    for params in model.extractor:
        out.extend(params)
    out.append(model.clf_weight)
    out.append(model.clf_bias)
    return out


def model_from_arrays(layers, arrays) -> Model:
    """Rebuild a Model from a flat array list (inverse of model_arrays)."""
    template = zero_model(layers)
    it = iter(arrays)
    ext = []
    for params in template.extractor:
        group = []
        for p in params:
            a = np.asarray(next(it), dtype=np.float64)
            if a.shape != p.shape:
                raise ContractError(f"array shape {a.shape} != expected {p.shape}")
            group.append(a)
        ext.append(tuple(group))
    cw = np.asarray(next(it), dtype=np.float64)
    cb = np.asarray(next(it), dtype=np.float64)
    if cw.shape != template.clf_weight.shape or cb.shape != template.clf_bias.shape:
        raise ContractError("classifier array shape mismatch")
    return Model(template.layers, tuple(ext), cw, cb)
