"""Device partitioning between the DiT and VAE stages.

The search space is every DiT device count that divides the head count, so
exhaustive enumeration is both the algorithm and its own oracle.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from . import perfmodel
from .errors import InvalidArgument, NoFeasibleSplit
from .perfmodel import Bottleneck, Modes

DEFAULT_MIN_DIT = 2
CSV_COLUMNS = ("config", "split", "dit_ms", "vae_interval_ms", "fps", "bottleneck", "table_label")


@dataclass(frozen=True)
class AllocationPlan:
    n_dit: int
    n_vae: int
    predicted_fps: float
    bottleneck: Bottleneck
    feasible_set: tuple

    @property
    def n_total(self):
        return self.n_dit + self.n_vae


@dataclass(frozen=True)
class SweepRow:
    n_dit: int
    n_vae: int
    h_heads: int
    t_dit_ms: float
    t_vae_ms: float
    fps: float
    bottleneck: Bottleneck
    table_label: str

    @property
    def config(self):
        return f"{self.n_dit} DiT + {self.n_vae} VAE"

    @property
    def split(self):
        # Same notation as the allocation table: H over the per-device head count.
        return f"H/{self.h_heads // self.n_dit}"

    def as_csv_row(self):
        return {
            "config": self.config,
            "split": self.split,
            "dit_ms": f"{self.t_dit_ms:.1f}",
            "vae_interval_ms": f"{self.t_vae_ms:.2f}",
            "fps": f"{self.fps:.1f}",
            "bottleneck": self.bottleneck.value,
            "table_label": self.table_label,
        }


def feasible_splits(h_heads: int, n_total: int, min_dit: int = DEFAULT_MIN_DIT) -> list[int]:
    if n_total < 2:
        raise InvalidArgument(f"n_total must be >= 2, got {n_total}")
    if min_dit < 1:
        raise InvalidArgument(f"min_dit must be >= 1, got {min_dit}")
    splits = [n for n in range(min_dit, n_total) if h_heads % n == 0]
    if not splits:
        raise NoFeasibleSplit(
            f"no DiT device count in [{min_dit}, {n_total - 1}] divides H={h_heads}"
        )
    return splits


def _table_labels(results):
    """Stage labels as the allocation table prints them.

    The table calls the crossover split "Balanced": the best split whose
    neighbours on either side are bottlenecked by different stages.
    """
    labels = [r.table_label for r in results]
    best = max(range(len(results)), key=lambda i: (results[i].fps, -i))
    on_dit = lambda r: r.bottleneck in (Bottleneck.DIT_COMPUTE, Bottleneck.DIT_COMM)
    left = results[best - 1] if best > 0 else None
    right = results[best + 1] if best + 1 < len(results) else None
    if left is not None and right is not None and on_dit(left) and not on_dit(right):
        labels[best] = perfmodel.TABLE_LABELS[Bottleneck.BALANCED]
    return labels


def sweep(hw, wl, n_total: int, min_dit: int = DEFAULT_MIN_DIT,
          modes: Modes = Modes()) -> list[SweepRow]:
    splits = feasible_splits(wl.h_heads, n_total, min_dit)
    results = [perfmodel.fps(wl, hw, n_d, n_total - n_d, modes) for n_d in splits]
    labels = _table_labels(results)
    return [
        SweepRow(n_d, n_total - n_d, wl.h_heads, r.t_dit_ms, r.t_vae_ms, r.fps, r.bottleneck, label)
        for n_d, r, label in zip(splits, results, labels)
    ]


def optimize(hw, wl, n_total: int, min_dit: int = DEFAULT_MIN_DIT,
             modes: Modes = Modes()) -> AllocationPlan:
    rows = sweep(hw, wl, n_total, min_dit, modes)
    # Ties go to the split with more decode workers.
    best = max(rows, key=lambda r: (r.fps, r.n_vae))
    return AllocationPlan(
        n_dit=best.n_dit,
        n_vae=best.n_vae,
        predicted_fps=best.fps,
        bottleneck=best.bottleneck,
        feasible_set=tuple(r.n_dit for r in rows),
    )


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row.as_csv_row())
    return buf.getvalue()
