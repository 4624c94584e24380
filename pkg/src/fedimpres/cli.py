"""Command-line entry points: run / partition / synthesize / eval.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import engine, metrics, nn
from .config import ExperimentConfig, echo_config, parse_config
from .data import (Dataset, ToySpec, dirichlet_partition, load_dataset,
                   make_toy_task, save_dataset, seed_pool)
from .errors import ConfigError, FedImpresError


def build_layers(cfg: ExperimentConfig, in_shape, n_classes: int) -> list:
    c, h, w = in_shape
    layers = [nn.Flatten()]
    prev = c * h * w
    for dim in cfg.hidden():
        layers.append(nn.Dense(prev, dim))
        layers.append(nn.Relu())
        prev = dim
    layers.append(nn.Dense(prev, n_classes))
    return layers


def build_datasets(cfg: ExperimentConfig):
    """(train, test-or-None); toy train/test share class prototypes."""
    if cfg.dataset:
        train = load_dataset(cfg.dataset)
        test = load_dataset(cfg.test_dataset) if cfg.test_dataset else None
        return train, test
    total = cfg.toy_per_class + cfg.toy_test_per_class
    spec = ToySpec(n_classes=cfg.toy_classes, per_class=total,
                   shape=(cfg.toy_channels, cfg.toy_height, cfg.toy_width),
                   sigma=cfg.toy_sigma,
                   seed=engine.stream_seed(cfg.seed, engine.STREAM_DATA))
    full = make_toy_task(spec)
    train_idx, test_idx = [], []
    for k in range(cfg.toy_classes):
        block = np.flatnonzero(full.labels == k)
        train_idx.extend(block[:cfg.toy_per_class])
        test_idx.extend(block[cfg.toy_per_class:])
    train = full.subset(train_idx)
    test = full.subset(test_idx) if cfg.toy_test_per_class else None
    return train, test


def build_pool(cfg: ExperimentConfig, in_shape):
    if cfg.init_mode == "file":
        return seed_pool("file", count=cfg.synth_batch, path=cfg.pool_path)
    return seed_pool("random", shape=in_shape, count=cfg.synth_batch,
                     seed=engine.stream_seed(cfg.seed, engine.STREAM_SYNTH))


def _partition(cfg: ExperimentConfig, train: Dataset):
    return dirichlet_partition(train, cfg.n_clients, cfg.alpha,
                               engine.stream_seed(cfg.seed, engine.STREAM_PARTITION))


def cmd_run(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train, test = build_datasets(cfg)
    in_shape = train.images.shape[1:]
    shards = _partition(cfg, train)
    clients = engine.clients_from_shards(shards)
    model = nn.init_model(build_layers(cfg, in_shape, train.n_classes),
                          engine.stream_seed(cfg.seed, engine.STREAM_INIT))
    pool = build_pool(cfg, in_shape) if cfg.algorithm == "fedimpres" else None
    records, final = engine.run_experiment(
        model, train, clients, cfg.round_config(), master_seed=cfg.seed,
        synth_cfg=cfg.synth_config(), pool=pool, test_dataset=test,
        track_forgetting=cfg.track_forgetting)
    (out / "config.txt").write_text(echo_config(cfg), encoding="utf-8")
    stem = f"{cfg.run_id}_{cfg.algorithm}"
    metrics.write_records(records, out / f"{stem}.csv", "csv")
    metrics.write_records(records, out / f"{stem}.json", "json")
    engine.save_weights(final, out / "final_model.bin")
    if cfg.track_forgetting:
        metrics.write_curve(metrics.forgetting_curve(records),
                            out / f"forgetting_{cfg.algorithm}.csv")
    if records and records[-1].global_acc is not None:
        print(f"final global accuracy: {records[-1].global_acc:.4f}")
    return 0


def cmd_partition(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train, _ = build_datasets(cfg)
    shards = _partition(cfg, train)
    for i, shard in enumerate(shards.shards):
        (out / f"shard_{i:04d}.txt").write_text(
            "\n".join(str(int(j)) for j in shard) + "\n", encoding="utf-8")
    print(f"wrote {len(shards.shards)} shard files to {out}")
    return 0


def cmd_synthesize(cfg: ExperimentConfig, model_path: str) -> int:
    from .impression import admm_synthesize, ce_only_synthesize
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train, _ = build_datasets(cfg)
    in_shape = train.images.shape[1:]
    layers = build_layers(cfg, in_shape, train.n_classes)
    server = engine.load_model(model_path, layers)
    pool = build_pool(cfg, in_shape)
    synth = ce_only_synthesize if cfg.ce_only else admm_synthesize
    batch = synth(server, pool, cfg.synth_config())
    save_dataset(Dataset(batch.images, batch.pseudo_labels, server.n_classes),
                 out / "impression.fidb")
    pixel = [h for h in batch.history if h["kind"] == "pixel"]
    if pixel:
        print(f"synthesis ce: {pixel[0]['ce']:.4f} -> {pixel[-1]['ce']:.4f}")
    print(f"wrote {out / 'impression.fidb'}")
    return 0


def cmd_eval(cfg: ExperimentConfig, model_path: str, data_path: str) -> int:
    ds = load_dataset(data_path)
    layers = build_layers(cfg, ds.images.shape[1:], ds.n_classes)
    model = engine.load_model(model_path, layers)
    acc, loss = metrics.evaluate(model, ds)
    print(f"accuracy: {acc:.6f}")
    print(f"mean_loss: {loss:.6f}")
    return 0


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--algorithm", choices=engine.ALGORITHMS)
    p.add_argument("--beta", type=float, help="impression-loss coefficient")
    p.add_argument("--rho", type=float, help="ADMM penalty")
    p.add_argument("--alpha", type=float, help="Dirichlet concentration")
    p.add_argument("--clients", type=int, dest="n_clients")
    p.add_argument("--rounds", type=int)
    p.add_argument("--local-epochs", type=int, dest="local_epochs")


def _overrides(args) -> dict:
    keys = ("seed", "out", "algorithm", "beta", "rho", "alpha",
            "n_clients", "rounds", "local_epochs")
    return {k: getattr(args, k, None) for k in keys}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fedimpres",
                                     description="Federated-impression lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "partition", "synthesize", "eval"):
        p = sub.add_parser(name)
        _add_common_flags(p)
        if name in ("synthesize", "eval"):
            p.add_argument("--model", required=True, help="weight dump path")
        if name == "eval":
            p.add_argument("--data", required=True, help="FIDB dataset path")
    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config, _overrides(args))
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "partition":
            return cmd_partition(cfg)
        if args.command == "synthesize":
            return cmd_synthesize(cfg, args.model)
        return cmd_eval(cfg, args.model, args.data)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FedImpresError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
