"""Federated round orchestration: broadcast, local training (plain,
proximal, or impression-regularized), aggregation and the warm-up
schedule.

Reproducibility: every stochastic choice draws from an explicit stream
derived as SeedSequence([master_seed, STREAM, *key]), so runs are
byte-identical regardless of client scheduling.
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import Dataset, ShardSet
from .errors import ConfigError, ContractError, ProtocolError
from .impression import ImpressionBatch, SynthesisConfig, admm_synthesize, ce_only_synthesize
from .metrics import RoundRecord, cross_matrix, evaluate

# seed-stream tags for SeedSequence fan-out
STREAM_PARTITION = 1
STREAM_INIT = 2
STREAM_SYNTH = 3
STREAM_CLIENT = 4
STREAM_DATA = 5

ALGORITHMS = ("fedavg", "fedprox", "fedimpres")


def stream_rng(master_seed: int, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), *map(int, key)]))


def stream_seed(master_seed: int, *key) -> int:
    return int(np.random.SeedSequence([int(master_seed), *map(int, key)]).generate_state(1)[0])


@dataclass(frozen=True)
class ClientState:
    id: int
    shard: np.ndarray  # index list into the training Dataset

    def __post_init__(self):
        if len(self.shard) == 0:
            raise ConfigError(f"client {self.id}: empty shard")


@dataclass
class RoundConfig:
    algorithm: str = "fedavg"
    total_rounds: int = 8
    local_epochs: int = 5
    local_lr: float = 0.01
    batch_size: int = 16
    beta: float = 1.0  # impression-loss coefficient
    mu: float = 0.0  # FedProx proximal coefficient
    warmup_rounds: int = 0
    aggregate_mode: str = "uniform"

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.total_rounds < 1:
            raise ConfigError("total_rounds must be >= 1")
        if self.local_epochs < 0:
            raise ConfigError("local_epochs must be >= 0")
        if self.local_lr <= 0.0:
            raise ConfigError("local_lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.beta < 0.0:
            raise ConfigError("beta must be >= 0")
        if self.mu < 0.0:
            raise ConfigError("mu must be >= 0")
        if not 0 <= self.warmup_rounds < self.total_rounds:
            raise ConfigError("warmup_rounds must lie in [0, total_rounds)")
        if self.aggregate_mode not in ("uniform", "weighted"):
            raise ConfigError(f"aggregate_mode must be uniform|weighted")


def clients_from_shards(shards: ShardSet) -> list:
    return [ClientState(i, s) for i, s in enumerate(shards.shards)]


# ---------------------------------------------------------------------------
# Local training


def local_train(dataset: Dataset, client: ClientState, global_model: nn.Model,
                cfg: RoundConfig, rng: np.random.Generator,
                impression: ImpressionBatch | None = None, mu: float = 0.0,
                snapshots: bool = False):
    """E epochs of mini-batch SGD starting from the broadcast global model.

    Each step's loss is CE(local batch) + beta * CE(impression batch)
    when an impression is present, plus an optional proximal pull toward
    the global weights. Returns (model, n_samples, per-epoch snapshots).
    """
    idx = client.shard
    model = global_model
    snaps = [model] if snapshots else None
    for _ in range(cfg.local_epochs):
        order = rng.permutation(len(idx))
        for start in range(0, len(idx), cfg.batch_size):
            b = idx[order[start:start + cfg.batch_size]]
            grads, _ = nn.backward(model, dataset.images[b], dataset.labels[b])
            if impression is not None and cfg.beta != 0.0:
                gi, _ = nn.backward(model, impression.images, impression.pseudo_labels)
                grads = nn.add_scaled(grads, gi, cfg.beta)
            if mu != 0.0:
                grads = nn.add_scaled(grads, nn.prox_grads(model, global_model), mu)
            model = nn.sgd_step(model, grads, cfg.local_lr)
        if snapshots:
            snaps.append(model)
    return model, len(idx), snaps


def fedprox_local_train(dataset, client, global_model, cfg, rng, snapshots=False):
    """FedProx local step: adds (mu/2)||w - w_G||^2 to every mini-batch loss."""
    return local_train(dataset, client, global_model, cfg, rng, mu=cfg.mu,
                       snapshots=snapshots)


# ---------------------------------------------------------------------------
# Aggregation


def aggregate(updates, mode: str = "uniform") -> list:
    """Average client updates given as (client_id, weight arrays, n_samples).

    Summation runs in client-id order so the result is bitwise
    independent of the list's ordering.
    """
    if not updates:
        raise ProtocolError("aggregate needs at least one update")
    updates = sorted(updates, key=lambda u: u[0])
    ref = updates[0][1]
    for cid, arrays, _ in updates[1:]:
        if len(arrays) != len(ref) or any(a.shape != r.shape for a, r in zip(arrays, ref)):
            raise ProtocolError(f"client {cid}: update not shape-congruent")
    out = []
    for t in range(len(ref)):
        stack = np.stack([arrays[t] for _, arrays, _ in updates])
        if mode == "uniform":
            out.append(stack.mean(axis=0))
        elif mode == "weighted":
            w = np.array([n for _, _, n in updates], dtype=np.float64)
            out.append(np.tensordot(w, stack, axes=1) / w.sum())
        else:
            raise ConfigError(f"unknown aggregate mode {mode!r}")
    return out


def aggregate_models(updates, layers, mode="uniform") -> nn.Model:
    arrays = aggregate([(cid, nn.model_arrays(m), n) for cid, m, n in updates], mode)
    return nn.model_from_arrays(layers, arrays)


# ---------------------------------------------------------------------------
# Rounds


def _max_workers() -> int:
    try:
        return max(1, int(os.environ.get("FEDIMPRES_THREADS", "1")))
    except ValueError:
        return 1


def run_round(global_model: nn.Model, dataset: Dataset, clients, round_idx: int,
              cfg: RoundConfig, *, master_seed: int = 0,
              synth_cfg: SynthesisConfig | None = None, pool=None,
              test_dataset: Dataset | None = None,
              track_forgetting: bool = False):
    """One communication round; returns (new_global, RoundRecord)."""
    if round_idx >= cfg.total_rounds:
        raise ConfigError(f"round_idx {round_idx} >= total_rounds {cfg.total_rounds}")
    impression = None
    imp_ce = imp_penalty = None
    if cfg.algorithm == "fedimpres" and round_idx >= cfg.warmup_rounds:
        if synth_cfg is None or pool is None:
            raise ConfigError("fedimpres rounds need a SynthesisConfig and a seed pool")
        synth = ce_only_synthesize if synth_cfg.ablation_ce_only else admm_synthesize
        impression = synth(global_model, pool, synth_cfg)
        pixel_steps = [h for h in impression.history if h["kind"] == "pixel"]
        if pixel_steps:
            imp_ce = pixel_steps[-1]["ce"]
            imp_penalty = pixel_steps[-1]["penalty"]

    def train_one(client):
        rng = stream_rng(master_seed, STREAM_CLIENT, client.id, round_idx)
        mu = cfg.mu if cfg.algorithm == "fedprox" else 0.0
        try:
            model, n, snaps = local_train(dataset, client, global_model, cfg, rng,
                                          impression=impression, mu=mu,
                                          snapshots=track_forgetting)
        except Exception as exc:
            raise ProtocolError(f"client {client.id} failed: {exc}") from exc
        return client.id, model, n, snaps

    workers = _max_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool_exec:
            results = list(pool_exec.map(train_one, clients))
    else:
        results = [train_one(c) for c in clients]
    results.sort(key=lambda r: r[0])

    new_global = aggregate_models([(cid, m, n) for cid, m, n, _ in results],
                                  global_model.layers, cfg.aggregate_mode)

    shard_sets = [dataset.subset(c.shard) for c in sorted(clients, key=lambda c: c.id)]
    client_loss, client_acc = [], []
    for (cid, model, _, _), shard_data in zip(results, shard_sets):
        acc, loss = evaluate(model, shard_data)
        client_acc.append(acc)
        client_loss.append(loss)

    matrices = None
    if track_forgetting:
        n_epochs = len(results[0][3])
        matrices = tuple(
            cross_matrix([snaps[e] for _, _, _, snaps in results], shard_sets)
            for e in range(n_epochs))

    global_acc = None
    if test_dataset is not None:
        global_acc, _ = evaluate(new_global, test_dataset)

    record = RoundRecord(round=round_idx, algorithm=cfg.algorithm,
                         client_loss=tuple(client_loss), client_acc=tuple(client_acc),
                         global_acc=global_acc, cross_matrices=matrices,
                         impression_ce=imp_ce, impression_penalty=imp_penalty)
    return new_global, record


def run_experiment(initial_model: nn.Model, dataset: Dataset, clients,
                   cfg: RoundConfig, *, master_seed: int = 0,
                   synth_cfg: SynthesisConfig | None = None, pool=None,
                   test_dataset: Dataset | None = None,
                   track_forgetting: bool = False):
    """Run every round; returns (records, final_global_model)."""
    model = initial_model
    records = []
    for r in range(cfg.total_rounds):
        model, rec = run_round(model, dataset, clients, r, cfg,
                               master_seed=master_seed, synth_cfg=synth_cfg,
                               pool=pool, test_dataset=test_dataset,
                               track_forgetting=track_forgetting)
        records.append(rec)
    return records, model


# ---------------------------------------------------------------------------
# Weight persistence (flat little-endian dump)


def save_weights(model: nn.Model, path) -> None:
    """u32 tensor count, then per tensor: u32 rank | u32 dims | f64 data."""
    arrays = nn.model_arrays(model)
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(arrays)))
        for a in arrays:
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_weights(path) -> list:
    with open(path, "rb") as f:
        raw = f.read()
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise ContractError(f"weight dump truncated at offset {off}")
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    (count,) = take("<I")
    arrays = []
    for _ in range(count):
        (rank,) = take("<I")
        dims = take(f"<{rank}I")
        n = int(np.prod(dims)) if rank else 1
        size = n * 8
        if off + size > len(raw):
            raise ContractError(f"weight dump truncated at offset {off}")
        arrays.append(np.frombuffer(raw, dtype="<f8", count=n, offset=off)
                      .reshape(dims).astype(np.float64))
        off += size
    return arrays


def load_model(path, layers) -> nn.Model:
    return nn.model_from_arrays(layers, load_weights(path))
