"""Static figures for metrics logs, ablation tables and eval reports."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import DataError  # noqa: E402

PLOT_KINDS = ("loss-curve", "ablation-bars", "joint-vs-separate")
LOSS_KEYS = ("loss_total", "loss_align", "loss_l1", "loss_giou")


def _read_jsonl(path) -> list[dict]:
    try:
        with open(path, encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read metrics {path}: {exc}") from exc


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _save(fig, out: Path) -> Path:
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return out


def loss_curve(metrics_paths: Sequence, out) -> Path:
    """Loss components against step; one line style per run."""
    runs = [(Path(p), _read_jsonl(p)) for p in metrics_paths]
    if not runs or not any(rows for _, rows in runs):
        raise DataError("loss-curve needs at least one non-empty metrics log")
    fig, ax = plt.subplots(figsize=(6, 4))
    styles = ["-", "--", ":", "-."]
    for i, (path, rows) in enumerate(runs):
        steps = [r["step"] for r in rows]
        for key in LOSS_KEYS:
            if all(key in r for r in rows):
                label = key if len(runs) == 1 else f"{path.parent.name}:{key}"
                ax.plot(steps, [r[key] for r in rows], styles[i % len(styles)], label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    return _save(fig, Path(out))


def ablation_bars(table_path, out) -> Path:
    """One bar per table row, height = mean AP of the row."""
    table = _read_json(table_path)
    rows = table.get("rows", [])
    if not rows:
        raise DataError(f"{table_path}: ablation table has no rows")
    key = "mean_AP" if "mean_AP" in table["columns"] else "mean_AP_joint"
    labels = [f"{r['row']}\n{r['datasets']}" if len({x['datasets'] for x in rows}) > 1 else r["row"]
              for r in rows]
    heights = [r.get(key) or 0.0 for r in rows]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(rows)), 4))
    bars = ax.bar(range(len(rows)), heights, color="0.4")
    for bar, r in zip(bars, rows):
        if r.get("status") != "ok":
            bar.set_hatch("//")
    ax.set_xticks(range(len(rows)), labels, fontsize=8)
    ax.set_ylabel("AP (x100)")
    ax.set_title(table.get("grid", ""))
    return _save(fig, Path(out))


def joint_vs_separate(report_paths: Sequence, out, labels: Sequence[str] | None = None) -> Path:
    """Grouped bars of AP per dataset, one group member per report set.

    ``report_paths`` are EvalReport JSON files; a file whose parent directory
    (or explicit label) differs forms a separate bar series.
    """
    if not report_paths:
        raise DataError("joint-vs-separate needs at least one eval report")
    reports = [_read_json(p) for p in report_paths]
    series = list(labels) if labels else [Path(p).parent.name or Path(p).stem for p in report_paths]
    if len(series) != len(reports):
        raise DataError("one label per report is required")
    datasets = sorted({r["dataset"] for r in reports})
    names = list(dict.fromkeys(series))
    width = 0.8 / len(names)
    fig, ax = plt.subplots(figsize=(max(4, 1.5 * len(datasets)), 4))
    x = np.arange(len(datasets))
    for i, name in enumerate(names):
        vals = []
        for ds in datasets:
            hits = [r["AP"] for r, s in zip(reports, series) if s == name and r["dataset"] == ds]
            vals.append(100.0 * hits[0] if hits else 0.0)
        ax.bar(x + (i - (len(names) - 1) / 2) * width, vals, width, label=name)
    ax.set_xticks(x, datasets)
    ax.set_ylabel("AP (x100)")
    ax.legend(fontsize=8)
    return _save(fig, Path(out))


def joint_bars(result_path, out) -> Path:
    """Median AP per dataset for each training setting of a joint experiment."""
    medians = _read_json(result_path).get("median", {})
    if not medians:
        raise DataError(f"{result_path}: no medians to plot")
    datasets = sorted({n for per in medians.values() for n in per})
    width = 0.8 / len(medians)
    fig, ax = plt.subplots(figsize=(max(4, 1.5 * len(datasets)), 4))
    x = np.arange(len(datasets))
    for i, (name, per) in enumerate(medians.items()):
        ax.bar(x + (i - (len(medians) - 1) / 2) * width, [per.get(d, 0.0) for d in datasets],
               width, label=name)
    ax.set_xticks(x, datasets)
    ax.set_ylabel("AP (x100)")
    ax.legend(fontsize=8)
    return _save(fig, Path(out))


def plot(kind: str, inputs: Sequence, out, labels: Sequence[str] | None = None) -> Path:
    if kind == "loss-curve":
        return loss_curve(inputs, out)
    if kind == "ablation-bars":
        if len(inputs) != 1:
            raise DataError("ablation-bars takes exactly one table")
        return ablation_bars(inputs[0], out)
    if kind == "joint-vs-separate":
        return joint_vs_separate(inputs, out, labels)
    raise DataError(f"unknown plot kind {kind!r}; choose from {PLOT_KINDS}")
