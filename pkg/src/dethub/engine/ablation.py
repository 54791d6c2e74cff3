"""Toy-scale ablation grids: one training run per cell, tables as CSV/JSON."""

from __future__ import annotations

import csv
import json
import logging
import statistics
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import torch

from ..config import TrainConfig, copy_config
from ..data import SynthSpec, synth_conflict_datasets
from ..errors import ConfigError, DethubError
from .evaluate import evaluate
from .runtime import DatasetBundle, bundle_from_synth
from .train import train

logger = logging.getLogger(__name__)

# Small enough that every preset grid trains on one CPU core in minutes.
TOY_OVERRIDES: dict = {
    "model.hidden_dim": 32,
    "model.feature_channels": 32,
    "model.backbone_width": 16,
    "model.backbone_depth": 1,
    "model.heads": 4,
    "model.stages": 2,
    "queries.count": 16,
    "prompt.max_length": 16,
    "embedder.embed_dim": 32,
    "optimizer.lr": 2e-3,
    "train.batch_size": 2,
    "train.image_size": 64,
    "train.log_every": 10,
}


@dataclass(frozen=True)
class GridRow:
    label: str
    overrides: Mapping = field(default_factory=dict)


@dataclass(frozen=True)
class ToyScale:
    train_images: int = 16
    val_images: int = 4
    steps_per_dataset: int = 30
    data_seed: int = 0


@dataclass(frozen=True)
class GridSpec:
    """Rows of config overrides trained on each dataset combination.

    Joint runs get ``steps_per_dataset`` times the number of datasets, so each
    dataset sees the same budget as its separately trained model.
    """

    name: str
    rows: tuple[GridRow, ...]
    combinations: tuple[tuple[str, ...], ...] = (("A", "B"),)
    separate: bool = False
    seeds: tuple[int, ...] = (0,)
    base: Mapping = field(default_factory=lambda: dict(TOY_OVERRIDES))
    scale: ToyScale = field(default_factory=ToyScale)


def _rows(key: str, values: Sequence) -> tuple[GridRow, ...]:
    return tuple(GridRow(str(v), {key: v}) for v in values)


PRESETS: dict[str, GridSpec] = {
    "modes": GridSpec("modes", _rows("adaptation.mode",
                                     ("instance-embedding", "global-embedding", "query-adaptation"))),
    "queries": GridSpec("queries", _rows("queries.count", (100, 300))),
    "components": GridSpec("components", (
        GridRow("none", {"adaptation.rpn": False, "adaptation.decoder": False}),
        GridRow("rpn", {"adaptation.rpn": True, "adaptation.decoder": False}),
        GridRow("decoder", {"adaptation.rpn": False, "adaptation.decoder": True}),
        GridRow("rpn+decoder", {"adaptation.rpn": True, "adaptation.decoder": True}),
    )),
    "layers": GridSpec("layers", _rows("model.stages", (2, 4, 6, 8))),
    "kernels": GridSpec("kernels", _rows("dyconv.kernel_size", (1, 3, 5))),
    "lengths": GridSpec("lengths", _rows("prompt.max_length", (128, 256, 512))),
    "combinations": GridSpec("combinations", (GridRow("joint"),),
                             combinations=(("A", "B"), ("A", "C"), ("B", "C"), ("A", "B", "C")),
                             separate=True),
}


def preset(name: str, **changes) -> GridSpec:
    if name not in PRESETS:
        raise ConfigError(f"unknown ablation grid {name!r}; choose from {sorted(PRESETS)}")
    spec = PRESETS[name]
    return GridSpec(**{**asdict_shallow(spec), **changes})


def asdict_shallow(spec: GridSpec) -> dict:
    return {f: getattr(spec, f) for f in spec.__dataclass_fields__}


def synth_bundles(cfg: TrainConfig, names: Sequence[str], scale: ToyScale):
    """Train and validation bundles for the named synthetic datasets."""
    def build(num, seed, offset):
        spec = SynthSpec.with_datasets(3, num_images=num)
        made = synth_conflict_datasets(spec, seed, max_length=cfg.prompt.max_length,
                                       image_offset=offset)
        by_name = {d.descriptor.name: d for d in made}
        return [bundle_from_synth(by_name[n], cfg) for n in names]
    return (build(scale.train_images, scale.data_seed, 0),
            build(scale.val_images, scale.data_seed + 1000, 100_000))


def fit_and_evaluate(cfg: TrainConfig, train_bundles: Sequence[DatasetBundle],
                     val_bundles: Sequence[DatasetBundle], out_dir) -> tuple[dict[str, float], float]:
    """Train one model on ``train_bundles``.

    Returns the final checkpoint's AP per validation dataset and the last
    training loss.
    """
    result = train(cfg, out_dir, train_bundles)
    return {b.name: evaluate(result.checkpoint, b).AP for b in val_bundles}, result.final_loss


@dataclass(frozen=True)
class CellJob:
    grid: str
    row: str
    combination: tuple[str, ...]
    setting: str  # "joint" or "separate"
    seed: int
    overrides: dict
    scale: ToyScale
    out_dir: str


def run_cell(job: CellJob) -> dict:
    torch.set_num_threads(1)
    record = {"grid": job.grid, "row": job.row, "datasets": "+".join(job.combination),
              "setting": job.setting, "seed": job.seed}
    try:
        cfg = copy_config(TrainConfig(), job.overrides)
        train_b, val_b = synth_bundles(cfg, job.combination, job.scale)
        aps: dict[str, float] = {}
        losses: list[float] = []
        if job.setting == "joint":
            cfg = copy_config(cfg, {"train.steps": job.scale.steps_per_dataset * len(train_b)})
            aps, loss = fit_and_evaluate(cfg, train_b, val_b, job.out_dir)
            losses.append(loss)
        else:
            cfg = copy_config(cfg, {"train.steps": job.scale.steps_per_dataset})
            for tb, vb in zip(train_b, val_b):
                ap, loss = fit_and_evaluate(cfg, [tb], [vb], Path(job.out_dir) / tb.name)
                aps.update(ap)
                losses.append(loss)
        record.update(status="ok", ap=aps, final_loss=sum(losses) / len(losses), error="")
    except (DethubError, RuntimeError, ValueError) as exc:
        logger.warning("cell %s/%s failed: %s", job.grid, job.row, exc)
        record.update(status="failed", ap={}, error=f"{type(exc).__name__}: {exc}",
                      trace=traceback.format_exc(limit=3))
    return record


@dataclass
class AblationTable:
    grid: str
    columns: list[str]
    rows: list[dict]

    def to_json(self) -> dict:
        return {"grid": self.grid, "columns": self.columns, "rows": self.rows}

    def write(self, out_dir) -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out_dir / f"{self.grid}.csv", "json": out_dir / f"{self.grid}.json"}
        with open(paths["csv"], "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=self.columns)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({c: _cell(row.get(c)) for c in self.columns})
        paths["json"].write_text(json.dumps(self.to_json(), indent=2), encoding="utf-8")
        return paths


def _cell(value):
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else value


def _jobs(spec: GridSpec, out_dir: Path) -> list[CellJob]:
    jobs = []
    settings = ("separate", "joint") if spec.separate else ("joint",)
    for row in spec.rows:
        for combo in spec.combinations:
            for setting in settings:
                for seed in spec.seeds:
                    overrides = {**spec.base, **row.overrides, "train.seed": seed, "sampler.seed": seed}
                    cell_dir = out_dir / "cells" / spec.name / row.label / "+".join(combo) / setting / f"seed{seed}"
                    jobs.append(CellJob(spec.name, row.label, tuple(combo), setting, seed,
                                        overrides, spec.scale, str(cell_dir)))
    return jobs


def _assemble(spec: GridSpec, records: list[dict]) -> AblationTable:
    settings = ("separate", "joint") if spec.separate else ("joint",)
    names: list[str] = []
    for combo in spec.combinations:
        names.extend(n for n in combo if n not in names)
    rows = []
    for row in spec.rows:
        for combo in spec.combinations:
            out = {"row": row.label, "datasets": "+".join(combo)}
            failed = []
            for setting in settings:
                cells = [r for r in records if r["row"] == row.label and r["setting"] == setting
                         and r["datasets"] == "+".join(combo)]
                failed.extend(r["error"] for r in cells if r["status"] != "ok")
                ok = [r for r in cells if r["status"] == "ok"]
                suffix = "" if not spec.separate else f"_{setting}"
                aps = []
                for n in combo:
                    vals = [r["ap"][n] for r in ok if n in r["ap"]]
                    value = 100.0 * statistics.median(vals) if vals else None
                    out[f"AP_{n}{suffix}"] = value
                    if value is not None:
                        aps.append(value)
                out[f"mean_AP{suffix}"] = sum(aps) / len(aps) if len(aps) == len(combo) else None
                losses = [r["final_loss"] for r in ok]
                out[f"final_loss{suffix}"] = statistics.median(losses) if losses else None
            out["status"] = "failed" if failed else "ok"
            out["error"] = "; ".join(sorted(set(failed)))
            rows.append(out)
    columns = ["row", "datasets"]
    for setting in settings:
        suffix = "" if not spec.separate else f"_{setting}"
        columns += [f"AP_{n}{suffix}" for n in names] + [f"mean_AP{suffix}", f"final_loss{suffix}"]
    columns += ["status", "error"]
    return AblationTable(spec.name, columns, rows)


def run_ablation(grid: GridSpec | str, out_dir, workers: int = 1, figure: bool = True) -> AblationTable:
    """Train every cell of ``grid`` and write ``<grid>.csv``, ``<grid>.json`` and ``<grid>.png``.

    Failed cells are marked in the table and the run continues. With
    ``workers > 1`` cells run in a bounded process pool; results do not
    depend on the worker count.
    """
    spec = preset(grid) if isinstance(grid, str) else grid
    out_dir = Path(out_dir)
    jobs = _jobs(spec, out_dir)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(run_cell, jobs))
    else:
        records = [run_cell(j) for j in jobs]
    table = _assemble(spec, records)
    paths = table.write(out_dir)
    if figure:
        from ..plotting import ablation_bars
        ablation_bars(paths["json"], out_dir / f"{spec.name}.png")
    (out_dir / "cells" / spec.name).mkdir(parents=True, exist_ok=True)
    (out_dir / "cells" / spec.name / "records.json").write_text(
        json.dumps(records, indent=2, default=str), encoding="utf-8")
    return table


def read_table(path) -> AblationTable:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return AblationTable(data["grid"], data["columns"], data["rows"])


JOINT_SETTINGS = (
    ("separate", "separate", "query-adaptation"),
    ("joint-adapt", "joint", "query-adaptation"),
    ("joint-global", "joint", "global-embedding"),
)


def joint_experiment(out_dir, seeds: Sequence[int] = (0, 1, 2), scale: ToyScale | None = None,
                     datasets: Sequence[str] = ("A", "B"), base: Mapping | None = None,
                     workers: int = 1) -> dict:
    """Separate models vs one joint model with and without query adaptation.

    Returns ``{"runs": {setting: {dataset: [AP per seed]}}, "median": ...}``
    with APs in points (x100), and writes ``joint.json`` plus ``joint.png``.
    """
    scale = scale or ToyScale(train_images=200, val_images=50, steps_per_dataset=1000)
    base = dict(TOY_OVERRIDES if base is None else base)
    out_dir = Path(out_dir)
    jobs = []
    for label, setting, mode in JOINT_SETTINGS:
        for seed in seeds:
            overrides = {**base, "adaptation.mode": mode, "train.seed": seed, "sampler.seed": seed}
            jobs.append(CellJob("joint", label, tuple(datasets), setting, seed, overrides, scale,
                                str(out_dir / "cells" / label / f"seed{seed}")))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(run_cell, jobs))
    else:
        records = [run_cell(j) for j in jobs]
    failed = [r["error"] for r in records if r["status"] != "ok"]
    if failed:
        raise DethubError(f"joint experiment cells failed: {failed}")
    runs = {label: {n: [100.0 * r["ap"][n] for r in records if r["row"] == label] for n in datasets}
            for label, _, _ in JOINT_SETTINGS}
    result = {"runs": runs,
              "median": {k: {n: statistics.median(v) for n, v in per.items()} for k, per in runs.items()},
              "seeds": list(seeds), "scale": asdict_shallow(scale)}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "joint.json").write_text(json.dumps(result, indent=2), encoding="utf-8")
    from ..plotting import joint_bars
    joint_bars(out_dir / "joint.json", out_dir / "joint.png")
    return result
