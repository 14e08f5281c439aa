"""Per-iteration training records and their CSV form."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

from .errors import ContractError

BASE_COLUMNS = ["iter", "epoch", "global_loss", "grad_norm", "lr_alpha", "lr_beta",
                "degenerate_batches"]


@dataclass(frozen=True)
class MetricsRecord:
    iteration: int
    epoch: int
    local_losses: dict
    global_loss: float
    grad_norm: float
    lr_alpha: float
    lr_beta: float
    degenerate_batches: int = 0


def _fmt(x: float) -> str:
    # repr is the shortest string that round-trips a float64
    return repr(float(x))


def write_metrics(path, records: Sequence[MetricsRecord]) -> int:
    """Write one CSV row per record; returns the row count (header excluded)."""
    if not records:
        raise ContractError("no metrics records to write")
    sids = sorted(records[0].local_losses)
    header = BASE_COLUMNS + [f"local_loss_{sid}" for sid in sids]
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for r in records:
                if sorted(r.local_losses) != sids:
                    raise ContractError(f"record {r.iteration} covers a different source set")
                writer.writerow([r.iteration, r.epoch, _fmt(r.global_loss), _fmt(r.grad_norm),
                                 _fmt(r.lr_alpha), _fmt(r.lr_beta), r.degenerate_batches]
                                + [_fmt(r.local_losses[sid]) for sid in sids])
    except OSError as exc:
        raise OSError(f"writing metrics to {path}: {exc}") from exc
    return len(records)


def read_metrics(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[:len(BASE_COLUMNS)] != BASE_COLUMNS:
        raise ContractError(f"{path}: unexpected metrics header {header}")
    sids = [int(col.rsplit("_", 1)[1]) for col in header[len(BASE_COLUMNS):]]
    out = []
    for row in body:
        out.append(MetricsRecord(
            iteration=int(row[0]), epoch=int(row[1]), global_loss=float(row[2]),
            grad_norm=float(row[3]), lr_alpha=float(row[4]), lr_beta=float(row[5]),
            degenerate_batches=int(row[6]),
            local_losses={sid: float(v) for sid, v in zip(sids, row[7:])}))
    return out
