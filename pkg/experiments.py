"""
Experiment plans and the resumable sweep harness.

A sweep trains one network per (model, size, resolution, injection, embed
width, seed) point it needs, stores each result as rows/<key>.json, and
aggregates the rows into table files. Tables are registered with
@register_table and only request the points they read.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

import evaluation
import training
from errors import ConfigError, DetailerError
from mini_psp import InjectionPoint, NetworkConfig
from synth_data import CoarsenSpec, SampleTriplet, SceneSpec, generate_dataset

logger = logging.getLogger(__name__)

BASE_RESOLUTION = 48
VALIDATION_SEED_OFFSET = 1_000_003
RUN_COLUMNS = ("key", "model", "size", "resolution", "injection", "embed_width", "seed",
               "status", "miou", "composite_miou", "coarse_miou", "error")
STAT_COLUMNS = ("mean_miou", "std_miou", "n_seeds")
SWEEP_AXES = ("out_dir", "sizes", "resolutions", "injections", "embed_widths", "seeds", "tables",
              "composite_size", "ablation_size", "default_injection")


@dataclass
class ExperimentPlan:
    """
    Axes of a sweep. The first resolution is the base resolution used by
    every table except the resolution study.
    """

    sizes: tuple[int, ...] = (10, 25, 50)
    resolutions: tuple[int, ...] = (48, 96)
    injections: tuple[str, ...] = ("before-pool", "after-pool", "after-final")
    embed_widths: tuple[int, ...] = (16, 64, 128)
    seeds: tuple[int, ...] = (0, 1, 2)
    out_dir: str = "runs/sweep"
    tables: tuple[str, ...] = ("table1", "table2", "table3", "table4", "table5")
    val_size: int = 50
    composite_size: int | None = None
    ablation_size: int | None = None
    crop: int | None = None
    default_injection: str = "after-final"
    train: training.TrainConfig = field(default_factory=lambda: training.TrainConfig(eval_every=0))
    network: NetworkConfig = field(default_factory=NetworkConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    coarsen: CoarsenSpec = field(default_factory=CoarsenSpec)

    def __post_init__(self):
        for name in ("sizes", "resolutions", "injections", "embed_widths", "seeds", "tables"):
            values = tuple(getattr(self, name))
            if not values:
                raise ConfigError(f"experiment plan axis '{name}' is empty")
            setattr(self, name, values)
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be distinct, got {self.seeds}")
        if min(self.sizes) < 1 or self.val_size < 1:
            raise ConfigError("dataset sizes and val_size must be >= 1")
        for injection in self.injections + (self.default_injection,):
            if injection not in {i.value for i in InjectionPoint}:
                raise ConfigError(f"unknown injection point {injection!r}")
            if InjectionPoint(injection) is InjectionPoint.NONE:
                raise ConfigError("ablation injection points cannot include 'none'")
        unknown = set(self.tables) - set(TABLES)
        if unknown:
            raise ConfigError(f"unknown tables {sorted(unknown)}, expected some of {sorted(TABLES)}")
        for resolution in self.resolutions:
            self.network.check_crop(self.crop_for(resolution))
        if self.composite_size is None:
            self.composite_size = max(self.sizes)
        if self.ablation_size is None:
            self.ablation_size = max(self.sizes)

    @property
    def base_resolution(self) -> int:
        return self.resolutions[0]

    def crop_for(self, resolution: int) -> int:
        return resolution if self.crop is None else min(self.crop, resolution)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["network"] = self.network.to_dict()
        return out

    def fingerprint(self) -> str:
        """ Digest of every setting that changes the result of a single sweep point. """
        settings = {k: v for k, v in self.to_dict().items() if k not in SWEEP_AXES}
        # run_point sets these per key
        for name in ("injection", "seed"):
            settings["network"].pop(name)
        for name in ("crop", "seed"):
            settings["train"].pop(name)
        return hashlib.sha256(json.dumps(settings, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class RunKey:
    model: str
    size: int
    resolution: int
    injection: str
    embed_width: int
    seed: int

    @property
    def name(self) -> str:
        return f"{self.model}-n{self.size}-r{self.resolution}-{self.injection}-w{self.embed_width}-s{self.seed}"


def classifier_key(size: int, resolution: int, seed: int) -> RunKey:
    return RunKey("classifier", size, resolution, InjectionPoint.NONE.value, 0, seed)


def detailer_key(plan: ExperimentPlan, size: int, resolution: int, seed: int,
                 injection: str | None = None, embed_width: int | None = None) -> RunKey:
    injection = plan.default_injection if injection is None else injection
    embed_width = plan.network.embed_width if embed_width is None else embed_width
    return RunKey("detailer", size, resolution, InjectionPoint(injection).value, embed_width, seed)


@dataclass
class TableGroup:
    """ One output row: its label columns and the (run, metric) cell read per seed. """

    labels: dict
    cells: list[tuple[RunKey, str]]


@dataclass
class Table:
    name: str
    label_columns: tuple[str, ...]
    groups: Callable[[ExperimentPlan], list[TableGroup]]

    @property
    def columns(self) -> tuple[str, ...]:
        return self.label_columns + STAT_COLUMNS


TABLES: dict[str, Table] = {}


def register_table(name: str, label_columns: tuple[str, ...]):
    """
    Table registration decorator.

    Usage:  @register_table("table1", ("size", "model"))
            def dataset_size_table(plan): ...
    """
    def wrap(func):
        TABLES[name] = Table(name, label_columns, func)
        return func
    return wrap


@register_table("table1", ("size", "model"))
def dataset_size_table(plan: ExperimentPlan) -> list[TableGroup]:
    groups = []
    res = plan.base_resolution
    for size in plan.sizes:
        groups.append(TableGroup({"size": size, "model": "classifier"},
                                 [(classifier_key(size, res, s), "miou") for s in plan.seeds]))
        groups.append(TableGroup({"size": size, "model": "detailer"},
                                 [(detailer_key(plan, size, res, s), "miou") for s in plan.seeds]))
    return groups


@register_table("table2", ("size", "model"))
def composite_table(plan: ExperimentPlan) -> list[TableGroup]:
    size, res = plan.composite_size, plan.base_resolution
    rows = [
        ("coarse", "detailer", "coarse_miou"),
        ("classifier", "classifier", "miou"),
        ("detailer", "detailer", "miou"),
        ("classifier-composite", "classifier", "composite_miou"),
        ("detailer-composite", "detailer", "composite_miou"),
    ]
    groups = []
    for label, model, metric in rows:
        keys = [classifier_key(size, res, s) if model == "classifier" else detailer_key(plan, size, res, s)
                for s in plan.seeds]
        groups.append(TableGroup({"size": size, "model": label}, [(k, metric) for k in keys]))
    return groups


@register_table("table3", ("size", "resolution"))
def resolution_table(plan: ExperimentPlan) -> list[TableGroup]:
    return [
        TableGroup({"size": size, "resolution": res}, [(detailer_key(plan, size, res, s), "miou") for s in plan.seeds])
        for size in plan.sizes
        for res in plan.resolutions
    ]


@register_table("table4", ("size", "location"))
def injection_table(plan: ExperimentPlan) -> list[TableGroup]:
    size, res = plan.ablation_size, plan.base_resolution
    return [
        TableGroup({"size": size, "location": injection},
                   [(detailer_key(plan, size, res, s, injection=injection), "miou") for s in plan.seeds])
        for injection in plan.injections
    ]


@register_table("table5", ("size", "embed_width"))
def embed_width_table(plan: ExperimentPlan) -> list[TableGroup]:
    size, res = plan.ablation_size, plan.base_resolution
    return [
        TableGroup({"size": size, "embed_width": width},
                   [(detailer_key(plan, size, res, s, embed_width=width), "miou") for s in plan.seeds])
        for width in plan.embed_widths
    ]


def scene_for(plan: ExperimentPlan, resolution: int) -> SceneSpec:
    return replace(plan.scene, height=resolution, width=resolution, num_classes=plan.network.num_classes,
                   class_colors=plan.scene.class_colors if plan.scene.num_classes == plan.network.num_classes else None)


def coarsen_for(plan: ExperimentPlan, resolution: int) -> CoarsenSpec:
    """ Erosion and bleed scale with the canvas so coverage stays comparable across resolutions. """
    factor = resolution / BASE_RESOLUTION
    return replace(plan.coarsen,
                   erosion_radius=int(round(plan.coarsen.erosion_radius * factor)),
                   bleed_width=int(round(plan.coarsen.bleed_width * factor)))


def benchmark(plan: ExperimentPlan, resolution: int, seed: int) -> tuple[list[SampleTriplet], list[SampleTriplet]]:
    """ (training pool of max(sizes) triplets, validation set) for one seed and resolution. """
    scene, coarse_spec = scene_for(plan, resolution), coarsen_for(plan, resolution)
    pool = generate_dataset(scene, coarse_spec, max(plan.sizes), seed)
    val = generate_dataset(scene, coarse_spec, plan.val_size, seed + VALIDATION_SEED_OFFSET)
    return pool, val


def run_point(plan: ExperimentPlan, key: RunKey, data: tuple[list[SampleTriplet], list[SampleTriplet]]) -> dict:
    """ Train and score one sweep point. """
    pool, val = data
    train_set = pool[:key.size]
    net_cfg = replace(plan.network, injection=key.injection, seed=key.seed,
                      embed_width=key.embed_width if key.model == "detailer" else plan.network.embed_width)
    train_cfg = replace(plan.train, seed=key.seed, crop=plan.crop_for(key.resolution))
    state, _ = training.train(key.model, train_set, train_cfg, net_cfg)
    detailer = key.model == "detailer"
    return {
        "miou": evaluation.evaluate_model(state.network, val, use_coarse_input=detailer).miou,
        "composite_miou": evaluation.evaluate_model(state.network, val, use_coarse_input=True,
                                                    composite_mode=True).miou,
        "coarse_miou": evaluation.coarse_baseline(val, net_cfg.num_classes).miou,
    }


def write_atomic(path: Path, text: str) -> None:
    """ Write then rename so readers never see a partial file. """
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _csv_text(header, rows) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def _row_path(out_dir: Path, key: RunKey) -> Path:
    return out_dir / "rows" / f"{key.name}.json"


def load_row(out_dir: Path, key: RunKey) -> dict | None:
    path = _row_path(out_dir, key)
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError:
        logger.warning("discarding unreadable row %s", path)
        return None


def required_keys(plan: ExperimentPlan) -> list[RunKey]:
    keys = []
    for name in plan.tables:
        for group in TABLES[name].groups(plan):
            for key, _ in group.cells:
                if key not in keys:
                    keys.append(key)
    return keys


def aggregate(values: list[float]) -> tuple[str, str, str]:
    if not values:
        return "", "", "0"
    std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return repr(float(np.mean(values))), repr(std), str(len(values))


def run_sweep(plan: ExperimentPlan) -> dict[str, Path]:
    """
    Run every missing point of the plan and (re)write runs.csv and the table files.

    Finished rows are reused only when they carry the plan's fingerprint;
    rows from a different configuration are rerun. Failed points are recorded
    with status 'error' and the sweep continues.

    Returns:
        - mapping of table name (and 'runs') to the written file
    """
    out_dir = Path(plan.out_dir)
    fingerprint = plan.fingerprint()
    write_atomic(out_dir / "plan.json",
                 json.dumps({**plan.to_dict(), "fingerprint": fingerprint}, indent=2, sort_keys=True))
    keys = required_keys(plan)
    datasets: dict[tuple[int, int], tuple[list[SampleTriplet], list[SampleTriplet]]] = {}
    rows: dict[RunKey, dict] = {}

    for i, key in enumerate(keys):
        row = load_row(out_dir, key)
        if row is not None and row.get("status") == "ok" and row.get("fingerprint") == fingerprint:
            logger.info("[%d/%d] %s already finished", i + 1, len(keys), key.name)
            rows[key] = row
            continue
        logger.info("[%d/%d] running %s", i + 1, len(keys), key.name)
        row = {"key": key.name, **asdict(key), "status": "ok", "miou": None,
               "composite_miou": None, "coarse_miou": None, "error": "", "fingerprint": fingerprint}
        try:
            data_key = (key.resolution, key.seed)
            if data_key not in datasets:
                datasets[data_key] = benchmark(plan, key.resolution, key.seed)
            row.update(run_point(plan, key, datasets[data_key]))
        except (DetailerError, ArithmeticError, ValueError) as err:
            logger.error("%s failed: %s", key.name, err)
            row.update(status="error", error=str(err))
        write_atomic(_row_path(out_dir, key), json.dumps(row, indent=2, sort_keys=True))
        rows[key] = row

    written = {}
    run_rows = [["" if rows[k][c] is None else (repr(rows[k][c]) if isinstance(rows[k][c], float) else rows[k][c])
                 for c in RUN_COLUMNS] for k in keys]
    written["runs"] = out_dir / "runs.csv"
    write_atomic(written["runs"], _csv_text(RUN_COLUMNS, run_rows))

    for name in plan.tables:
        table = TABLES[name]
        body = []
        for group in table.groups(plan):
            values = [rows[key][metric] for key, metric in group.cells
                      if rows[key]["status"] == "ok" and rows[key][metric] is not None]
            body.append([group.labels[c] for c in table.label_columns] + list(aggregate(values)))
        written[name] = out_dir / f"{name}.csv"
        write_atomic(written[name], _csv_text(table.columns, body))
        logger.info("wrote %s (%d rows)", written[name], len(body))
    return written


def describe_tables() -> str:
    """ Column sets of every table, for --help. """
    lines = [f"  runs.csv: {', '.join(RUN_COLUMNS)}"]
    lines += [f"  {t.name}.csv: {', '.join(t.columns)}" for t in TABLES.values()]
    return "\n".join(lines)
