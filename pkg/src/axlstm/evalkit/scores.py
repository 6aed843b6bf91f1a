"""Score tables, the aggregated normalized score, and task manifests."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

CSV_HEADER = ["model", "task", "metric", "value", "ci95"]


class ScoreTableError(ValueError):
    pass


class IncompleteTableError(ScoreTableError):
    def __init__(self, missing: list[tuple[str, str]]):
        self.missing = missing
        shown = ", ".join(f"({m}, {t})" for m, t in missing[:10])
        more = f" and {len(missing) - 10} more" if len(missing) > 10 else ""
        super().__init__(f"score table is missing {len(missing)} cells: {shown}{more}")


class DegenerateTaskError(ScoreTableError):
    def __init__(self, task: str, value: float):
        self.task = task
        super().__init__(f"task {task!r}: every model scores {value}, so max == min and the task cannot be normalized")


@dataclass
class ScoreTable:
    models: list[str]
    tasks: list[str]
    values: dict[tuple[str, str], float]
    metrics: dict[str, str] = field(default_factory=dict)
    ci95: dict[tuple[str, str], float] = field(default_factory=dict)

    def __post_init__(self):
        missing = [(m, t) for m in self.models for t in self.tasks if (m, t) not in self.values]
        if missing:
            raise IncompleteTableError(missing)

    def x(self, model: str, task: str) -> float:
        return self.values[(model, task)]

    def column(self, task: str) -> list[float]:
        return [self.values[(m, task)] for m in self.models]


def aggregate_score(table: ScoreTable, model: str) -> float:
    """s(m) = mean over tasks of 100 * (x_t(m) - min_t) / (max_t - min_t)."""
    if model not in table.models:
        raise KeyError(f"model {model!r} is not in the table")
    total = 0.0
    for task in table.tasks:
        col = table.column(task)
        lo, hi = min(col), max(col)
        if hi == lo:
            raise DegenerateTaskError(task, hi)
        total += (table.x(model, task) - lo) / (hi - lo) * 100.0
    return total / len(table.tasks)


def all_scores(table: ScoreTable) -> dict[str, float]:
    return {m: aggregate_score(table, m) for m in table.models}


def write_results(path: str | os.PathLike, table: ScoreTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for m in table.models:
            for t in table.tasks:
                ci = table.ci95.get((m, t))
                w.writerow([m, t, table.metrics.get(t, "accuracy"), repr(table.x(m, t)),
                            "" if ci is None else repr(ci)])


def read_results(path: str | os.PathLike) -> ScoreTable:
    """Parse a results CSV; model and task order follow first appearance."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ScoreTableError(f"{path}: header {reader.fieldnames} != {CSV_HEADER}")
        rows = list(reader)
    models, tasks, values, metrics, ci = [], [], {}, {}, {}
    for lineno, r in enumerate(rows, start=2):
        m, t = r["model"], r["task"]
        if (m, t) in values:
            raise ScoreTableError(f"{path}:{lineno}: duplicate cell ({m}, {t})")
        if m not in models:
            models.append(m)
        if t not in tasks:
            tasks.append(t)
        try:
            values[(m, t)] = float(r["value"])
            if r["ci95"]:
                ci[(m, t)] = float(r["ci95"])
        except ValueError as err:
            raise ScoreTableError(f"{path}:{lineno}: {err}") from err
        if metrics.setdefault(t, r["metric"]) != r["metric"]:
            raise ScoreTableError(f"{path}:{lineno}: task {t!r} mixes metrics {metrics[t]!r} and {r['metric']!r}")
    return ScoreTable(models, tasks, values, metrics, ci)


@dataclass
class TaskSpec:
    name: str
    audio_dir: Path
    label_csv: Path
    metric: str = "accuracy"


def load_task_manifest(path: str | os.PathLike) -> list[TaskSpec]:
    """JSON list of {name, audio_dir, label_csv, metric}; relative paths resolve against the manifest."""
    base = Path(path).parent
    with open(path) as fh:
        raw = json.load(fh)
    if isinstance(raw, dict):
        raw = raw.get("tasks", [])
    specs = []
    for i, entry in enumerate(raw):
        missing = {"name", "audio_dir", "label_csv"} - set(entry)
        if missing:
            raise ValueError(f"{path}: task #{i} lacks {sorted(missing)}")
        metric = entry.get("metric", "accuracy")
        if metric not in ("accuracy", "mAP"):
            raise ValueError(f"{path}: task {entry['name']!r} has unknown metric {metric!r}")
        specs.append(TaskSpec(entry["name"], base / entry["audio_dir"], base / entry["label_csv"], metric))
    return specs


def read_labels(path: str | os.PathLike, multilabel: bool = False) -> dict[str, object]:
    """Label CSV with columns ``clip_id,label``; multilabel labels are ';'-separated."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and not {"clip_id", "label"} <= set(rows[0]):
        raise ValueError(f"{path}: expected columns clip_id,label")
    if multilabel:
        return {r["clip_id"]: tuple(x for x in r["label"].split(";") if x) for r in rows}
    return {r["clip_id"]: r["label"] for r in rows}
