"""Server-side impression synthesis.

Pixels of a small batch V are optimized against a frozen server model so
that (a) the model classifies them confidently under its own
pseudo-labels and (b) the classifier-head gradient on them vanishes.
The constrained problem is handled with an augmented Lagrangian:

    sum_i [ CE_i + tr(dual^T g_i) + (rho/2) ||g_i||^2 ]

where g_i is the head gradient on sample i, alternating projected pixel
descent with dual ascent (ADMM). A CE-only variant drops the dual and
penalty terms and serves as the ablation baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import SeedPool
from .errors import ConfigError, InputError, NumericError


@dataclass
class SynthesisConfig:
    admm_epochs: int = 5
    pixel_steps: int = 10  # pixel-descent steps per ADMM epoch
    pixel_lr: float = 0.1
    rho: float = 0.2
    batch_size: int = 16
    init_mode: str = "random"
    ablation_ce_only: bool = False
    rebalance_labels: bool = False  # round-robin reassignment if a class is absent

    def __post_init__(self):
        if self.admm_epochs < 0:
            raise ConfigError(f"admm_epochs must be >= 0, got {self.admm_epochs}")
        if self.pixel_steps < 1:
            raise ConfigError(f"pixel_steps must be >= 1, got {self.pixel_steps}")
        if self.pixel_lr <= 0.0:
            raise ConfigError(f"pixel_lr must be positive, got {self.pixel_lr}")
        if self.rho < 0.0:
            raise ConfigError(f"rho must be >= 0, got {self.rho}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.init_mode not in ("random", "file"):
            raise ConfigError(f"init_mode must be random|file, got {self.init_mode!r}")


@dataclass
class ImpressionBatch:
    images: np.ndarray  # V, [S,C,H,W] clamped to [0,1]
    pseudo_labels: np.ndarray  # [S], fixed for the whole synthesis round
    dual: np.ndarray  # [K, F+1], same shape as the head gradient
    rho: float
    history: list = field(default_factory=list)


def pseudo_label(server: nn.Model, pool: SeedPool, count: int):
    """First `count` pool images plus the server's argmax labels for them.

    Argmax ties break toward the lowest class index.
    """
    if pool.images.shape[0] < count:
        raise InputError(f"pool has {pool.images.shape[0]} images, need {count}")
    v0 = pool.images[:count].copy()
    logits = nn.forward(server, v0)
    return v0, np.argmax(logits, axis=1).astype(np.int64)


def _per_sample_head_grads(d, h):
    # g_i = [d_i h_i^T | d_i], stacked to [S, K, F+1]
    gw = d[:, :, None] * h[:, None, :]
    return np.concatenate([gw, d[:, :, None]], axis=2)


def _objective_and_pixel_grad(server, v, labels, dual, rho, ce_only, want_grad=True):
    """Objective components and (optionally) its gradient wrt pixels.

    The penalty is differentiated through the closed-form head gradient,
    so only first-order reverse mode is needed.
    """
    h, caches = nn._extractor_forward(server, np.asarray(v, dtype=np.float64))
    logits = h @ server.clf_weight.T + server.clf_bias
    p = nn.softmax(logits)
    s = np.arange(len(labels))
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    ce = float(-logp[s, labels].sum())
    d = p.copy()
    d[s, labels] -= 1.0
    pure = ce_only or (rho == 0.0 and not dual.any())
    if pure:
        comps = {"ce": ce, "trace": 0.0, "penalty": 0.0, "objective": ce}
        if not want_grad:
            return comps, None, None
        _, dv = nn._extractor_backward(server, caches, d @ server.clf_weight)
        return comps, dv, None
    g = _per_sample_head_grads(d, h)
    trace = float(np.einsum("skf,kf->", g, dual))
    penalty = float(0.5 * rho * (g * g).sum())
    comps = {"ce": ce, "trace": trace, "penalty": penalty,
             "objective": ce + trace + penalty}
    if not np.isfinite(comps["objective"]):
        raise NumericError("non-finite synthesis objective")
    if not want_grad:
        return comps, None, g
    f = server.feat_dim
    m = dual[None, :, :] + rho * g  # d(extra)/dg per sample
    mw, mb = m[:, :, :f], m[:, :, f]
    u = np.einsum("skf,sf->sk", mw, h) + mb
    ju = p * (u - (p * u).sum(axis=1, keepdims=True))  # softmax Jacobian applied to u
    dz = d + ju
    dh = dz @ server.clf_weight + np.einsum("skf,sk->sf", mw, d)
    _, dv = nn._extractor_backward(server, caches, dh)
    return comps, dv, g


def impression_objective(server: nn.Model, v, labels, dual, rho):
    """Value of the synthesis objective with its ce/trace/penalty split."""
    if rho < 0.0:
        raise InputError(f"rho must be >= 0, got {rho}")
    labels = np.asarray(labels, dtype=np.int64)
    comps, _, _ = _objective_and_pixel_grad(server, v, labels, np.asarray(dual),
                                            rho, ce_only=False, want_grad=False)
    return comps["objective"], comps


def impression_pixel_grad(server: nn.Model, v, labels, dual, rho):
    """Gradient of the synthesis objective wrt the pixels of V."""
    labels = np.asarray(labels, dtype=np.int64)
    _, dv, _ = _objective_and_pixel_grad(server, v, labels, np.asarray(dual),
                                         rho, ce_only=False)
    return dv


def _synthesize(server, pool, cfg: SynthesisConfig, ce_only: bool) -> ImpressionBatch:
    v, yhat = pseudo_label(server, pool, cfg.batch_size)
    if cfg.rebalance_labels and len(np.unique(yhat)) < server.n_classes:
        yhat = np.arange(cfg.batch_size, dtype=np.int64) % server.n_classes
    k, f = server.n_classes, server.feat_dim
    dual = np.zeros((k, f + 1))
    rho = 0.0 if ce_only else cfg.rho
    history = []
    ce0 = None
    for epoch in range(cfg.admm_epochs):
        for step in range(cfg.pixel_steps):
            comps, dv, _ = _objective_and_pixel_grad(server, v, yhat, dual, rho, ce_only)
            if ce0 is None:
                ce0 = comps["ce"]
            if comps["ce"] > 10.0 * max(ce0, 1e-12):
                raise NumericError(
                    f"synthesis diverged at epoch {epoch} step {step}: "
                    f"ce {comps['ce']:.4g} > 10x initial {ce0:.4g}")
            v = np.clip(v - cfg.pixel_lr * dv, 0.0, 1.0)
            history.append({"kind": "pixel", "epoch": epoch, "step": step, **comps})
        if not ce_only:
            # dual ascent on the aggregated head gradient at the post-step V
            _, _, g = _objective_and_pixel_grad(server, v, yhat, dual, rho,
                                               ce_only=False, want_grad=False)
            agg = g.sum(axis=0) if g is not None else np.zeros_like(dual)
            dual = dual + rho * agg
            history.append({"kind": "dual", "epoch": epoch, "images": v.copy(),
                            "dual_norm": float(np.linalg.norm(dual))})
    return ImpressionBatch(v, yhat, dual, rho, history)


def admm_synthesize(server: nn.Model, pool: SeedPool, cfg: SynthesisConfig) -> ImpressionBatch:
    """Full augmented-Lagrangian synthesis (pixel descent + dual ascent)."""
    return _synthesize(server, pool, cfg, ce_only=False)


def ce_only_synthesize(server: nn.Model, pool: SeedPool, cfg: SynthesisConfig) -> ImpressionBatch:
    """Ablation: the same pixel-descent loop driven by plain CE."""
    return _synthesize(server, pool, cfg, ce_only=True)
