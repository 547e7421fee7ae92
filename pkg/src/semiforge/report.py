"""Turn metrics streams into CSV plot data (and optionally PNG figures)."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .trainer import EpochMetrics, metrics_from_json


class MetricsParseError(ValueError):
    def __init__(self, path, index: int, msg: str):
        super().__init__(f"{path}: record {index}: {msg}")
        self.index = index


def read_metrics(path) -> list[EpochMetrics]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for index, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                out.append(metrics_from_json(line))
            except (ValueError, TypeError) as exc:
                raise MetricsParseError(path, index, str(exc)) from None
    if not out:
        raise MetricsParseError(path, 0, "no records")
    return out


def best_epoch(run: list[EpochMetrics]) -> EpochMetrics:
    # test split is class-balanced, so the mean per-class accuracy is the
    # headline accuracy of whichever head the run reported
    return max(run, key=lambda m: float(np.mean(m.acc_per_class)))


def _series(runs, attr):
    n = max(len(r) for r in runs)
    rows = []
    for epoch in range(n):
        vals = [getattr(r[epoch], attr) for r in runs if epoch < len(r)]
        rows.append((epoch, float(np.mean(vals)), float(np.std(vals)), len(vals)))
    return rows


def _write(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def build_report(runs: list[list[EpochMetrics]], out_dir) -> dict[str, Path]:
    """Write the CSV tables and return their paths keyed by table name.

    The confusion table is skipped when no run recorded a confusion matrix.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for attr in ("mask_prob", "used_acc"):
        paths[attr] = out_dir / f"{attr}.csv"
        _write(paths[attr], ["epoch", f"{attr}_mean", f"{attr}_std", "n_runs"], _series(runs, attr))

    bests = [best_epoch(r) for r in runs]
    per_class = np.array([b.acc_per_class for b in bests])
    paths["per_class_acc"] = out_dir / "per_class_acc.csv"
    _write(
        paths["per_class_acc"],
        ["class", "acc_mean", "acc_std", "n_runs"],
        [(k, float(per_class[:, k].mean()), float(per_class[:, k].std()), len(bests))
         for k in range(per_class.shape[1])],
    )

    mats = [np.asarray(b.confusion, dtype=np.float64) for b in bests if b.confusion]
    if not mats:
        return paths
    conf = np.mean(mats, axis=0)
    K = conf.shape[0]
    paths["confusion"] = out_dir / "confusion.csv"
    _write(
        paths["confusion"],
        ["true_class"] + [f"pred_{k}" for k in range(K)],
        [[k] + [_num(v) for v in conf[k]] for k in range(K)],
    )
    return paths


def _num(v: float):
    return int(v) if float(v).is_integer() else float(v)
