"""Evaluation and record emission: accuracy, cross-client forgetting
matrices, per-round records, CSV/JSON writers.

CSV output is long-form (round,client,metric,value) so new metrics never
change the schema; both writers are byte-deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import Dataset
from .errors import InputError


@dataclass(frozen=True)
class RoundRecord:
    round: int
    algorithm: str
    client_loss: tuple
    client_acc: tuple
    global_acc: float | None = None
    cross_matrices: tuple | None = None  # per sampled local epoch, [N,N] arrays
    impression_ce: float | None = None
    impression_penalty: float | None = None


def evaluate(model: nn.Model, dataset: Dataset):
    """(accuracy, mean CE loss) of a model on a dataset."""
    if len(dataset) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    logits = nn.forward(model, dataset.images)
    acc = float(np.mean(np.argmax(logits, axis=1) == dataset.labels))
    return acc, nn.ce_loss(logits, dataset.labels)


def cross_matrix(models, eval_sets) -> np.ndarray:
    """A[i][j] = accuracy of client i's model on client j's eval shard."""
    n = len(models)
    if len(eval_sets) != n:
        raise InputError("need one eval shard per client model")
    a = np.empty((n, n))
    for i, model in enumerate(models):
        for j, ds in enumerate(eval_sets):
            a[i, j] = evaluate(model, ds)[0]
    return a


def mean_off_diagonal(matrix: np.ndarray, client: int) -> float:
    """Mean accuracy of one client's model on the other clients' shards."""
    n = matrix.shape[0]
    if n == 1:
        return float(matrix[0, 0])
    mask = np.ones(n, dtype=bool)
    mask[client] = False
    return float(matrix[client, mask].mean())


def forgetting_curve(records) -> list:
    """Per-client mean off-diagonal accuracy by local epoch.

    Returns long-form rows {round, epoch, client, value} for every record
    that carries cross matrices.
    """
    rows = []
    for rec in records:
        if not rec.cross_matrices:
            continue
        for epoch, matrix in enumerate(rec.cross_matrices):
            for client in range(matrix.shape[0]):
                rows.append({"round": rec.round, "epoch": epoch, "client": client,
                             "value": mean_off_diagonal(matrix, client)})
    return rows


def _record_rows(rec: RoundRecord):
    for i, (loss, acc) in enumerate(zip(rec.client_loss, rec.client_acc)):
        yield rec.round, str(i), "local_loss", loss
        yield rec.round, str(i), "local_acc", acc
    if rec.global_acc is not None:
        yield rec.round, "global", "global_acc", rec.global_acc
    if rec.impression_ce is not None:
        yield rec.round, "global", "impression_ce", rec.impression_ce
    if rec.impression_penalty is not None:
        yield rec.round, "global", "impression_penalty", rec.impression_penalty


def _record_dict(rec: RoundRecord) -> dict:
    return {
        "round": rec.round,
        "algorithm": rec.algorithm,
        "client_loss": list(rec.client_loss),
        "client_acc": list(rec.client_acc),
        "global_acc": rec.global_acc,
        "cross_matrices": (None if rec.cross_matrices is None
                           else [m.tolist() for m in rec.cross_matrices]),
        "impression_ce": rec.impression_ce,
        "impression_penalty": rec.impression_penalty,
    }


def record_from_dict(d: dict) -> RoundRecord:
    mats = d.get("cross_matrices")
    return RoundRecord(
        round=d["round"], algorithm=d["algorithm"],
        client_loss=tuple(d["client_loss"]), client_acc=tuple(d["client_acc"]),
        global_acc=d.get("global_acc"),
        cross_matrices=None if mats is None else tuple(np.array(m) for m in mats),
        impression_ce=d.get("impression_ce"),
        impression_penalty=d.get("impression_penalty"),
    )


def write_records(records, path, fmt: str = "csv") -> None:
    """Emit records as long-form CSV or as JSON mirroring RoundRecord."""
    if fmt == "csv":
        lines = ["round,client,metric,value"]
        for rec in records:
            for rnd, client, metric, value in _record_rows(rec):
                lines.append(f"{rnd},{client},{metric},{value!r}")
        text = "\n".join(lines) + "\n"
    elif fmt == "json":
        text = json.dumps([_record_dict(r) for r in records],
                          sort_keys=True, separators=(",", ":")) + "\n"
    else:
        raise InputError(f"format must be csv|json, got {fmt!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def read_records_json(path) -> list:
    with open(path, "r", encoding="utf-8") as f:
        return [record_from_dict(d) for d in json.load(f)]


def write_curve(rows, path) -> None:
    """Forgetting-curve rows as round,epoch,client,value CSV."""
    lines = ["round,epoch,client,value"]
    for r in rows:
        lines.append(f"{r['round']},{r['epoch']},{r['client']},{r['value']!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
