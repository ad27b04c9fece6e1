"""Ablation sweeps and result files (CSV tables, JSON summaries, JSONL records)."""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, ScenarioConfig
from .engine import VARIANTS, get_source_model, load_source_model, register_source_model, run_experiment
from .metrics import MetricSummary, accuracy, h_score, summarize  # noqa: F401  (metric ops live in metrics)
from .model import atomic_write

AXES = ("batch_size", "alpha", "delta", "delta_l_u", "loss_combo")

# Name -> (use_contrastive, use_entropy).
LOSS_COMBOS = {"lc": (True, False), "le": (False, True), "lc+le": (True, True)}

TABLE_COLUMNS = ("variant", "axis", "value", "seed", "metric", "score", "accuracy_known", "accuracy_unknown")


def parse_axis_values(axis: str, text: str) -> list:
    """Parse a comma-separated value list for ``axis``.

    ``delta_l_u`` pairs are written ``low:high``; ``loss_combo`` takes names
    from ``LOSS_COMBOS``.
    """
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {', '.join(AXES)}")
    items = [item.strip() for item in text.split(",") if item.strip()]
    if not items:
        raise ConfigError("empty value list")
    try:
        if axis == "batch_size":
            return [int(v) for v in items]
        if axis == "delta_l_u":
            pairs = [tuple(float(p) for p in v.split(":")) for v in items]
            if any(len(p) != 2 for p in pairs):
                raise ValueError("delta_l_u values must look like low:high")
            return pairs
        if axis == "loss_combo":
            bad = [v for v in items if v not in LOSS_COMBOS]
            if bad:
                raise ValueError(f"unknown loss combo(s) {bad}; expected {', '.join(LOSS_COMBOS)}")
            return items
        return [float(v) for v in items]
    except ValueError as exc:
        raise ConfigError(f"bad value for axis {axis}: {exc}") from None


def format_value(value) -> str:
    if isinstance(value, tuple):
        return ":".join(format_value(v) for v in value)
    return str(value)


def apply_axis(scenario: ScenarioConfig, axis: str, value) -> ScenarioConfig:
    if axis == "batch_size":
        return scenario.with_hyper(batch_size=int(value))
    if axis in ("alpha", "delta"):
        return scenario.with_hyper(**{axis: float(value)})
    if axis == "delta_l_u":
        low, high = value
        return scenario.with_hyper(delta_l=float(low), delta_u=float(high))
    if axis == "loss_combo":
        use_c, use_e = LOSS_COMBOS[value]
        return scenario.with_hyper(use_contrastive=use_c, use_entropy=use_e)
    raise ConfigError(f"unknown sweep axis {axis!r}")


def _row(variant, axis, value, seed, summary) -> dict:
    return {
        "variant": variant,
        "axis": axis,
        "value": format_value(value),
        "seed": seed,
        "metric": summary["metric"],
        "score": summary["value"],
        "accuracy_known": summary["accuracy_known"],
        "accuracy_unknown": summary["accuracy_unknown"],
    }


def checkpoint_path(directory, seed: int) -> Path:
    return Path(directory) / f"source_seed{seed}.npz"


def _use_checkpoint(scenario: ScenarioConfig, seed: int, directory) -> None:
    if directory is not None:
        register_source_model(load_source_model(checkpoint_path(directory, seed), scenario, seed), scenario, seed)


def _sweep_point(task) -> dict:
    scenario, axis, value, variant, seed, checkpoint_dir = task
    _use_checkpoint(scenario, seed, checkpoint_dir)
    summary = run_experiment(apply_axis(scenario, axis, value), variant, seed).summary
    return _row(variant, axis, value, seed, summary)


@dataclass
class SweepResult:
    axis: str
    values: list
    seeds: list[int]
    variants: list[str]
    rows: list[dict]

    def means(self) -> dict[str, dict[str, float]]:
        """variant -> {value: mean score over seeds}."""
        out: dict[str, dict[str, float]] = {}
        for variant in self.variants:
            out[variant] = {}
            for value in self.values:
                key = format_value(value)
                scores = [r["score"] for r in self.rows if r["variant"] == variant and r["value"] == key]
                out[variant][key] = float(np.mean(scores))
        return out

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "values": [format_value(v) for v in self.values],
            "seeds": list(self.seeds),
            "variants": list(self.variants),
            "mean_score": self.means(),
        }


def run_sweep(scenario: ScenarioConfig, axis: str, values, seeds, variants=VARIANTS, jobs: int = 1, checkpoint_dir=None) -> SweepResult:
    """One experiment per (variant, value, seed).

    The ``loss_combo`` axis only changes adaptation, so it skips the
    source-only variant. With ``jobs > 1`` points run in separate worker
    processes; row order is the same either way. ``checkpoint_dir`` holds
    ``source_seed<N>.npz`` files written by the ``pretrain`` command.
    """
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {', '.join(AXES)}")
    values, seeds = list(values), [int(s) for s in seeds]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variant(s) {unknown}")
    variants = [v for v in variants if not (axis == "loss_combo" and v == "source-only")]
    # Validate every point before any work starts.
    for value in values:
        apply_axis(scenario, axis, value)
    tasks = [
        (scenario, axis, value, variant, seed, checkpoint_dir) for variant in variants for value in values for seed in seeds
    ]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_point, tasks))
    else:
        for seed in seeds:
            _use_checkpoint(scenario, seed, checkpoint_dir)
            get_source_model(scenario, seed)
        rows = [_sweep_point(t) for t in tasks]
    return SweepResult(axis, values, seeds, variants, rows)


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_text(path, text: str) -> None:
    atomic_write(Path(path), lambda fh: fh.write(text.encode()))


def table_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row[k] is None else row[k]) for k in TABLE_COLUMNS})
    return buf.getvalue()


def records_jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def format_means(result: SweepResult) -> str:
    """Plain-text table: one row per variant, one column per axis value."""
    means = result.means()
    keys = [format_value(v) for v in result.values]
    width = max(12, *(len(k) + 2 for k in keys))
    lines = [f"{result.axis:<14}" + "".join(f"{k:>{width}}" for k in keys)]
    for variant, row in means.items():
        lines.append(f"{variant:<14}" + "".join(f"{row[k]:>{width}.4f}" for k in keys))
    return "\n".join(lines)
