"""Ablation sweeps over the Sinkhorn iteration count and the entropic weight.

Every setting trains a fresh model from the same base configuration and
seed, so rows differ only in the swept value. Runs may execute on a thread
pool whose size is capped by ``OTALIGN_THREADS``.
"""

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

from ..exceptions import RejectedInputError
from .train import HISTORY_COLUMNS, AlignmentConfig, train_alignment

__all__ = ["SWEEP_COLUMNS", "SweepTable", "sweep_iters", "sweep_epsilon", "max_workers"]

SWEEP_COLUMNS = HISTORY_COLUMNS + ("linear_term",)


def max_workers(default=1):
    """Thread cap from ``OTALIGN_THREADS``; ``default`` when unset."""
    raw = os.environ.get("OTALIGN_THREADS", "").strip()
    if not raw:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise RejectedInputError(f"OTALIGN_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise RejectedInputError("OTALIGN_THREADS must be >= 1")
    return n


@dataclass
class SweepTable:
    """One row per setting: the swept value then the final-epoch record."""

    param: str
    rows: list = field(default_factory=list)

    @property
    def columns(self):
        return (self.param,) + SWEEP_COLUMNS

    def column(self, name):
        return [r[name] for r in self.rows]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.columns)
            for r in self.rows:
                writer.writerow([repr(r[self.param]), r["epoch"]]
                                + [repr(float(r[c])) for c in SWEEP_COLUMNS[1:]])


def _final_row(param, value, history):
    row = {param: value, "epoch": history.epoch[-1] if len(history) else 0}
    for c in SWEEP_COLUMNS[1:]:
        series = getattr(history, c)
        if series:
            row[c] = series[-1]
        else:
            row[c] = history.initial.get(c, float("nan"))
    return row


def _sweep(data, param, values, overrides, base, workers):
    values = list(values)
    if not values:
        raise RejectedInputError(f"{param} list must not be empty")
    base = base or AlignmentConfig()
    cfgs = [replace(base, **overrides(v)) for v in values]
    workers = min(workers or max_workers(), len(cfgs))

    def run(cfg):
        return train_alignment(data, cfg)[1]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            histories = list(pool.map(run, cfgs))
    else:
        histories = [run(c) for c in cfgs]
    return SweepTable(param, [_final_row(param, v, h) for v, h in zip(values, histories)])


def sweep_iters(data, iters_list, base=None, workers=None):
    """Train once per Sinkhorn iteration budget.

    The tolerance is set to zero so every solve runs exactly the given
    number of iterations.
    """
    for t in iters_list:
        if int(t) != t or t < 1:
            raise RejectedInputError(f"iteration counts must be positive integers, got {t!r}")
    return _sweep(data, "iters", [int(t) for t in iters_list],
                  lambda t: {"ot_iters": t, "ot_tol": 0.0}, base, workers)


def sweep_epsilon(data, eps_list, base=None, workers=None):
    """Train once per entropic weight."""
    for e in eps_list:
        if not e > 0:
            raise RejectedInputError(f"epsilon values must be positive, got {e!r}")
    return _sweep(data, "epsilon", [float(e) for e in eps_list],
                  lambda e: {"epsilon": e}, base, workers)
