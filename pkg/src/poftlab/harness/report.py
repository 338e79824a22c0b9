"""Summaries over finished runs.

For every run directory (one arm) and metric the summary holds the last-epoch
value and the mean and sample standard deviation over epochs 2..N; epoch 1 is
left out as unstable. If a run has a single epoch the window falls back to
that epoch. The standard deviation needs two values: when the window holds
fewer it is written as an empty cell (``STD_SENTINEL``), which also happens
for two-epoch runs. ``diff_last`` and ``diff_mean`` compare each arm with the
baseline arm (the first run directory unless named).
"""

from __future__ import annotations

import csv
import math
import statistics
from pathlib import Path
from typing import Sequence

from .train import read_metrics

REPORT_METRICS = ("train_loss", "mean_tau", "mean_tau_clean", "mean_tau_noise", "eval_nll", "eval_exact_match",
                  "pair_loss")
SUMMARY_COLUMNS = ("arm", "metric", "last", "mean", "std", "n_window", "baseline", "diff_last", "diff_mean")
STD_SENTINEL = ""
HEADER_NOTE = ("# held-out NLL per token and exact-match accuracy on synthetic tasks are small-scale proxies "
               "for instruction-following benchmarks")


class ReportError(ValueError):
    pass


def arm_name(run_dir) -> str:
    cfg = Path(run_dir) / "config.ini"
    if cfg.exists():
        from .config import load_config

        return load_config(cfg).name
    return Path(run_dir).name


def summarize_run(rows: list[dict], metric: str) -> dict | None:
    """``{last, mean, std, n_window}`` for one metric, or ``None`` if the
    metric was never recorded."""
    series = [(r["epoch"], r[metric]) for r in rows if r.get(metric) is not None]
    if not series:
        return None
    window = [v for e, v in series if e >= 2] or [series[0][1]]
    std = statistics.stdev(window) if len(window) >= 2 else None
    return {"last": series[-1][1], "mean": math.fsum(window) / len(window), "std": std, "n_window": len(window)}


def _load_run(run_dir: Path) -> list[dict]:
    metrics = run_dir / "metrics.csv"
    if not (run_dir / "final" / "manifest.json").exists() or not metrics.exists():
        raise ReportError(f"{run_dir}: run is incomplete (missing final checkpoint or metrics.csv)")
    rows = read_metrics(metrics)
    if not rows:
        raise ReportError(f"{run_dir}: metrics.csv has no epochs")
    return rows


def emit_report(run_dirs: Sequence, out_path, baseline: str | None = None) -> Path:
    """Write the summary CSV for ``run_dirs`` and return its path."""
    if not run_dirs:
        raise ReportError("need at least one run directory")
    arms: dict[str, list[dict]] = {}
    for d in run_dirs:
        d = Path(d)
        name = arm_name(d)
        if name in arms:
            raise ReportError(f"duplicate arm name {name!r}")
        arms[name] = _load_run(d)
    base = baseline or next(iter(arms))
    if base not in arms:
        raise ReportError(f"baseline arm {base!r} not among the runs")
    base_summary = {m: summarize_run(arms[base], m) for m in REPORT_METRICS}

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        fh.write(HEADER_NOTE + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for name, rows in arms.items():
            for metric in REPORT_METRICS:
                s = summarize_run(rows, metric)
                if s is None:
                    continue
                b = base_summary[metric]
                diff_last = repr(s["last"] - b["last"]) if b else ""
                diff_mean = repr(s["mean"] - b["mean"]) if b else ""
                w.writerow([name, metric, repr(s["last"]), repr(s["mean"]),
                            STD_SENTINEL if s["std"] is None else repr(s["std"]), s["n_window"], base,
                            diff_last, diff_mean])
    return out_path


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))
