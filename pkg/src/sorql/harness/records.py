"""Run records, aggregation, episodes-to-threshold and CSV emission."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence, Union

RECORD_FIELDS = ("experiment", "algorithm", "seed", "index", "metric", "value")


class RunRecord(NamedTuple):
    experiment: str
    algorithm: str
    seed: int
    index: int
    metric: str
    value: float


class SummaryRow(NamedTuple):
    key_names: tuple
    key: tuple
    mean: float
    std: float
    count: int


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def window_means(returns: Sequence[float], window: int) -> list[float]:
    """Trailing-window means; element e-window is the mean of returns[e-window:e]."""
    vals = [float(v) for v in returns]
    return [math.fsum(vals[e - window : e]) / window for e in range(window, len(vals) + 1)]


def episodes_to_threshold(
    returns: Union[Sequence[float], Iterable[RunRecord]], threshold: float, window: int
) -> Optional[int]:
    """Smallest episode count e whose trailing `window` mean return is >= threshold.

    Accepts plain per-episode returns or `episode_return` records of one run.
    """
    items = list(returns)
    if items and isinstance(items[0], RunRecord):
        items = [r.value for r in sorted(items, key=lambda r: r.index) if r.metric == "episode_return"]
    if window < 1:
        raise ValueError("window must be >= 1")
    if window > len(items):
        return None
    for k, mean in enumerate(window_means(items, window)):
        if mean >= threshold:
            return k + window
    return None


def aggregate(
    records: Iterable[RunRecord],
    keys: Sequence[str] = ("experiment", "algorithm", "metric", "index"),
) -> list[SummaryRow]:
    """Mean, sample standard deviation (n - 1) and count per group, sorted by key."""
    records = list(records)
    if not records:
        raise ValueError("cannot aggregate an empty record set")
    for k in keys:
        if k not in RECORD_FIELDS or k == "value":
            raise ValueError(f"unknown group key {k!r}")
    groups: dict[tuple, list[float]] = {}
    for r in records:
        groups.setdefault(tuple(getattr(r, k) for k in keys), []).append(float(r.value))
    rows = []
    for key in sorted(groups):
        vals = groups[key]
        n = len(vals)
        mean = math.fsum(vals) / n
        std = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / (n - 1)) if n > 1 else 0.0
        rows.append(SummaryRow(tuple(keys), key, mean, std, n))
    return rows


def emit_csv(rows: Iterable[Union[RunRecord, SummaryRow]], path) -> int:
    """Write records or summary rows as LF-terminated CSV; returns data rows written."""
    rows = list(rows)
    if rows and isinstance(rows[0], SummaryRow):
        header = list(rows[0].key_names) + ["mean", "std", "count"]
        lines = [
            [_cell(v) for v in r.key] + [fmt(r.mean), fmt(r.std), str(r.count)] for r in rows
        ]
    else:
        header = list(RECORD_FIELDS)
        lines = [
            [r.experiment, r.algorithm, str(r.seed), str(r.index), r.metric, fmt(r.value)]
            for r in rows
        ]
    with open(Path(path), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(lines)
    return len(lines)


def _cell(v) -> str:
    return fmt(v) if isinstance(v, float) else str(v)


def read_csv(path) -> list[RunRecord]:
    with open(Path(path), encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            RunRecord(row["experiment"], row["algorithm"], int(row["seed"]),
                      int(row["index"]), row["metric"], float(row["value"]))
            for row in reader
        ]
