"""Metrics capture and byte-deterministic emission, plus the sweep runner.

Emitted files (UTF-8, LF line endings, numbers printed with 6 significant
digits, fixed column order):

* ``accuracy_curves.csv`` — batch,epoch,group,accuracy
* ``detections.csv``      — batch,flagged_new,total_new,flagged_old,cost
* ``confusion.csv``       — rows are predicted classes, columns true classes
* ``summary.json``        — final accuracies, detection ratios, cost, fingerprint
* ``sweep.csv``           — one row per grid point (sweep runs only)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, LabelError, ShapeError


def _fmt(x) -> str:
    return format(float(x), ".6g")


@dataclass
class EpochRecord:
    batch_id: int
    epoch: int
    group: str
    accuracy: float


@dataclass
class DetectionRecord:
    batch_id: int
    flagged_new: int
    total_new: int
    flagged_old: int
    cost: int


@dataclass
class MetricsLog:
    """Everything a run reports: accuracy curves, detections, confusion, cost."""

    config_fingerprint: str = ""
    epoch_records: list[EpochRecord] = field(default_factory=list)
    detection_records: list[DetectionRecord] = field(default_factory=list)
    confusion: np.ndarray | None = None
    confusion_classes: tuple[int, ...] = ()
    inspection_cost: int = 0

    def record_epoch(self, batch_id, epoch, group, accuracy) -> None:
        self.epoch_records.append(EpochRecord(batch_id, epoch, group, accuracy))

    def record_detection(self, batch_id, *, flagged_new, total_new, flagged_old, cost):
        self.detection_records.append(
            DetectionRecord(batch_id, flagged_new, total_new, flagged_old, cost)
        )

    def set_confusion(self, matrix: np.ndarray, classes) -> None:
        self.confusion = matrix
        self.confusion_classes = tuple(classes)

    def final_group_accuracies(self) -> dict[str, float]:
        """Accuracy per group at the final recorded epoch of the last batch."""
        if not self.epoch_records:
            return {}
        last_batch = max(r.batch_id for r in self.epoch_records)
        last_epoch = max(
            r.epoch for r in self.epoch_records if r.batch_id == last_batch
        )
        return {
            r.group: r.accuracy
            for r in self.epoch_records
            if r.batch_id == last_batch and r.epoch == last_epoch
        }

    def group_accuracy_at(self, batch_id: int) -> dict[str, float]:
        """Accuracy per group at the final epoch of the given batch."""
        records = [r for r in self.epoch_records if r.batch_id == batch_id]
        if not records:
            return {}
        last_epoch = max(r.epoch for r in records)
        return {r.group: r.accuracy for r in records if r.epoch == last_epoch}


def confusion_matrix(preds, truths, classes) -> np.ndarray:
    """Counts with rows = predicted class, columns = true class."""
    preds = np.asarray(preds, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if preds.shape != truths.shape:
        raise ShapeError("predictions and truths must have equal length")
    classes = tuple(classes)
    index = {c: i for i, c in enumerate(classes)}
    matrix = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for p, t in zip(preds, truths):
        if int(p) not in index or int(t) not in index:
            raise LabelError(f"class {p if int(p) not in index else t} not declared")
        matrix[index[int(p)], index[int(t)]] += 1
    return matrix


def record_and_emit(log: MetricsLog, out_dir, extra_summary: dict | None = None):
    """Write the four report files; emission is byte-deterministic."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    path = out / "accuracy_curves.csv"
    with open(path, "w", newline="\n") as f:
        f.write("batch,epoch,group,accuracy\n")
        for r in log.epoch_records:
            f.write(f"{r.batch_id},{r.epoch},{r.group},{_fmt(r.accuracy)}\n")
    paths.append(path)

    path = out / "detections.csv"
    with open(path, "w", newline="\n") as f:
        f.write("batch,flagged_new,total_new,flagged_old,cost\n")
        for r in log.detection_records:
            f.write(
                f"{r.batch_id},{r.flagged_new},{r.total_new},"
                f"{r.flagged_old},{r.cost}\n"
            )
    paths.append(path)

    path = out / "confusion.csv"
    with open(path, "w", newline="\n") as f:
        cols = ",".join(f"true_{c}" for c in log.confusion_classes)
        f.write(f"predicted{',' if cols else ''}{cols}\n")
        if log.confusion is not None:
            for c, row in zip(log.confusion_classes, log.confusion):
                f.write(f"{c}," + ",".join(str(int(v)) for v in row) + "\n")
    paths.append(path)

    detection = [
        {
            "batch": r.batch_id,
            "flagged_new": r.flagged_new,
            "total_new": r.total_new,
            "flagged_old": r.flagged_old,
            "cost": r.cost,
            "tpr": float(_fmt(r.flagged_new / r.total_new)) if r.total_new else None,
        }
        for r in log.detection_records
    ]
    summary = {
        "final_accuracy": {
            g: float(_fmt(a)) for g, a in sorted(log.final_group_accuracies().items())
        },
        "detection": detection,
        "inspection_cost": log.inspection_cost,
        "config_fingerprint": log.config_fingerprint,
    }
    if extra_summary:
        summary.update(extra_summary)
    path = out / "summary.json"
    with open(path, "w", newline="\n") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    paths.append(path)
    return paths


SWEEP_AXES = ("log10_lambda_ood", "log10_lambda_prior", "m")


@dataclass(frozen=True)
class SweepPoint:
    index: int
    values: dict[str, float]
    group_accuracies: dict[str, float] | None
    average: float | None
    status: str  # "ok" | "failed"


@dataclass(frozen=True)
class SweepResult:
    axes: tuple[str, ...]
    points: tuple[SweepPoint, ...]
    best: SweepPoint | None


def apply_axis(cfg, name: str, value: float):
    """Return a config with one sweep axis applied."""
    if name == "log10_lambda_ood":
        return replace(
            cfg, continual=replace(cfg.continual, lambda_ood=float(10.0 ** value))
        )
    if name == "log10_lambda_prior":
        return replace(
            cfg, continual=replace(cfg.continual, lambda_prior=float(10.0 ** value))
        )
    if name == "m":
        return replace(cfg, continual=replace(cfg.continual, replay_cap=int(value)))
    raise ConfigError(f"unknown sweep axis {name!r}; valid axes: {SWEEP_AXES}")


def _tie_key(cfg, point: SweepPoint):
    applied = cfg
    for name, value in point.values.items():
        applied = apply_axis(applied, name, value)
    return (
        -(point.average if point.average is not None else -np.inf),
        applied.continual.lambda_prior,
        applied.continual.lambda_ood,
        applied.continual.replay_cap,
    )


def _sweep_combos(grid) -> list[tuple[float, ...]]:
    if not grid:
        raise ConfigError("sweep grid is empty")
    for name, values in grid:
        if name not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {name!r}; valid axes: {SWEEP_AXES}")
        if not values:
            raise ConfigError(f"sweep axis {name!r} has no values")
    combos: list[tuple[float, ...]] = [()]
    for _, values in grid:
        combos = [(*c, float(v)) for c in combos for v in values]
    return combos


def sweep_point_configs(base_cfg, grid) -> list:
    """The exact per-point configs a sweep will run, in row-major axis order.

    Point ``i`` gets seed ``base_seed XOR i`` so every point is an isolated,
    reproducible run.
    """
    axes = tuple(name for name, _ in grid)
    configs = []
    for index, combo in enumerate(_sweep_combos(grid)):
        cfg = base_cfg
        for name, value in zip(axes, combo):
            cfg = apply_axis(cfg, name, value)
        cfg = replace(cfg, train=replace(cfg.train, seed=int(cfg.train.seed) ^ index))
        configs.append(cfg)
    return configs


def run_sweep(base_cfg, grid, runner) -> SweepResult:
    """One full run per grid point, in row-major axis order.

    ``grid`` is an ordered list of (axis_name, values). Each point gets a
    fresh seed (base seed XOR point index). ``runner(cfg)`` must return an
    object with ``final_group_accuracies()``; a raising run is recorded as a
    failed row and the sweep continues.
    """
    axes = tuple(name for name, _ in grid)
    combos = _sweep_combos(grid)
    configs = sweep_point_configs(base_cfg, grid)
    points: list[SweepPoint] = []
    for index, (combo, cfg) in enumerate(zip(combos, configs)):
        values = dict(zip(axes, combo))
        try:
            log = runner(cfg)
            accs = log.final_group_accuracies()
            average = float(np.mean(list(accs.values()))) if accs else None
            points.append(SweepPoint(index, values, accs, average, "ok"))
        except Exception:
            points.append(SweepPoint(index, values, None, None, "failed"))

    ok = [p for p in points if p.status == "ok" and p.average is not None]
    best = min(ok, key=lambda p: _tie_key(base_cfg, p)) if ok else None
    return SweepResult(axes, tuple(points), best)


def write_sweep_csv(result: SweepResult, path) -> Path:
    path = Path(path)
    groups = sorted(
        {g for p in result.points if p.group_accuracies for g in p.group_accuracies}
    )
    with open(path, "w", newline="\n") as f:
        head = ["index", *result.axes, *(f"acc_{g}" for g in groups), "average", "status"]
        f.write(",".join(head) + "\n")
        for p in result.points:
            cells = [str(p.index)]
            cells += [_fmt(p.values[a]) for a in result.axes]
            for g in groups:
                acc = (p.group_accuracies or {}).get(g)
                cells.append(_fmt(acc) if acc is not None else "")
            cells.append(_fmt(p.average) if p.average is not None else "")
            cells.append(p.status)
            f.write(",".join(cells) + "\n")
    return path
