"""Config-driven runs and sweeps: JSON config in, metrics.csv / summary.json / checkpoints out."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .aggregation import STRATEGIES
from .data import CLASS_NAMES
from .metrics import MetricsRow, pixel_accuracy
from .model import ArchConfig, ConfigError, save_checkpoint
from .protocol import DESK_COUNTS, RunConfig, run_simulation

FORMAT_VERSION = 1
OUTPUT_ENV = "SPLITFED_OUT"

CSV_COLUMNS = (["format_version", "global_epoch", "client_id", "strategy", "sigma_noise",
                "train_loss", "val_loss", "r_weight", "indicator", "best_local_epoch",
                "test_loss", "test_accuracy_percent"]
               + [f"iou_{c}" for c in CLASS_NAMES] + ["diverged"])

_SECTIONS = {"format_version", "architecture", "data", "protocol", "channel", "strategy",
             "seeds", "output_dir", "grid"}


@dataclass
class ExperimentConfig:
    run: RunConfig
    output_dir: Path
    sigmas: Optional[list] = None
    strategies: Optional[list] = None

    @property
    def is_grid(self) -> bool:
        return self.sigmas is not None


@dataclass
class CellResult:
    sigma_noise: float
    strategy: str
    rows: list
    predictions: np.ndarray
    truth: np.ndarray
    diverged: bool
    background_fraction: float
    checkpoint: dict = field(default_factory=dict)


# ------------------------------------------------------------------ config

def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"{name}: expected an object")
    return sec


def _take(sec: dict, path: str, key: str, kind, default):
    if key not in sec:
        return default
    value = sec[key]
    ok = isinstance(value, kind) and not (kind in (int, (int, float)) and isinstance(value, bool))
    if not ok:
        raise ConfigError(f"{path}.{key}: expected {getattr(kind, '__name__', 'number')}, got {value!r}")
    return value


def _unknown(sec: dict, path: str, allowed: set) -> None:
    extra = sorted(set(sec) - allowed)
    if extra:
        raise ConfigError(f"{path}: unknown field(s) {extra}")


def parse_config(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be a JSON object")
    _unknown(doc, "config", _SECTIONS)
    version = doc.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ConfigError(f"format_version: unsupported value {version!r} (expected {FORMAT_VERSION})")
    num = (int, float)

    a = _section(doc, "architecture")
    _unknown(a, "architecture", {"input_size", "num_classes", "in_channels", "down_filters",
                                 "bottleneck_filters", "up_filters", "kernel_size"})
    arch = ArchConfig(
        input_size=_take(a, "architecture", "input_size", int, 32),
        num_classes=_take(a, "architecture", "num_classes", int, 5),
        in_channels=_take(a, "architecture", "in_channels", int, 1),
        down_filters=tuple(_take(a, "architecture", "down_filters", list, [8, 16])),
        bottleneck_filters=_take(a, "architecture", "bottleneck_filters", int, 32),
        up_filters=tuple(_take(a, "architecture", "up_filters", list, [16, 8])),
        kernel_size=_take(a, "architecture", "kernel_size", int, 3))
    if arch.num_classes != len(CLASS_NAMES):
        raise ConfigError(f"architecture.num_classes: the synthetic data has {len(CLASS_NAMES)} classes")
    if arch.in_channels != 1:
        raise ConfigError("architecture.in_channels: the synthetic data is single-channel")

    d = _section(doc, "data")
    _unknown(d, "data", {"sample_counts", "test_samples", "augment"})
    counts = _take(d, "data", "sample_counts", list, list(DESK_COUNTS))
    if not all(isinstance(c, int) and not isinstance(c, bool) for c in counts):
        raise ConfigError("data.sample_counts: expected a list of integers")

    p = _section(doc, "protocol")
    _unknown(p, "protocol", {"local_epochs", "global_epochs", "batch_size", "learning_rate", "server_lineage"})

    c = _section(doc, "channel")
    _unknown(c, "channel", {"sigma_noise", "clients"})
    onsets, overrides = {}, {}
    clients = _take(c, "channel", "clients", dict, None)
    if clients is None:
        onsets = {3: 5, 4: 4, 5: 3}
    else:
        for key, entry in clients.items():
            path = f"channel.clients.{key}"
            try:
                cid = int(key)
            except ValueError:
                raise ConfigError(f"{path}: client ids must be integers") from None
            if not isinstance(entry, dict):
                raise ConfigError(f"{path}: expected an object")
            _unknown(entry, path, {"sigma_noise", "onset_global_epoch"})
            if "onset_global_epoch" in entry:
                onsets[cid] = _take(entry, path, "onset_global_epoch", int, None)
            if "sigma_noise" in entry:
                overrides[cid] = float(_take(entry, path, "sigma_noise", num, None))

    s = _section(doc, "strategy")
    _unknown(s, "strategy", {"name", "alpha"})
    seeds = _section(doc, "seeds")
    _unknown(seeds, "seeds", {"model", "data", "channel"})

    run = RunConfig(
        arch=arch,
        sample_counts=tuple(counts),
        test_samples=_take(d, "data", "test_samples", int, 20),
        augment=_take(d, "data", "augment", bool, True),
        local_epochs=_take(p, "protocol", "local_epochs", int, 12),
        global_epochs=_take(p, "protocol", "global_epochs", int, 10),
        batch_size=_take(p, "protocol", "batch_size", int, 4),
        learning_rate=float(_take(p, "protocol", "learning_rate", num, 1e-3)),
        server_lineage=_take(p, "protocol", "server_lineage", str, "common"),
        sigma_noise=float(_take(c, "channel", "sigma_noise", num, 0.0)),
        noise_onsets=onsets,
        sigma_overrides=overrides,
        strategy=_take(s, "strategy", "name", str, "smart"),
        alpha=float(_take(s, "strategy", "alpha", num, 10.0)),
        model_seed=_take(seeds, "seeds", "model", int, 0),
        data_seed=_take(seeds, "seeds", "data", int, 0),
        channel_seed=_take(seeds, "seeds", "channel", int, 0))
    run.validate()
    if not math.isfinite(run.alpha) or run.alpha <= 0:
        raise ConfigError("strategy.alpha: must be finite and > 0")
    for cid, sig in overrides.items():
        if not (sig >= 0) or not math.isfinite(sig):
            raise ConfigError(f"channel.clients.{cid}.sigma_noise: must be finite and >= 0")

    out = doc.get("output_dir", "runs/default")
    if not isinstance(out, str) or not out:
        raise ConfigError("output_dir: expected a non-empty string")

    sigmas = strategies = None
    if "grid" in doc:
        g = _section(doc, "grid")
        _unknown(g, "grid", {"sigmas", "strategies"})
        sigmas = [float(v) for v in _take(g, "grid", "sigmas", list, [run.sigma_noise])]
        if not sigmas or any(not (v >= 0) or not math.isfinite(v) for v in sigmas):
            raise ConfigError("grid.sigmas: expected a non-empty list of finite values >= 0")
        strategies = list(_take(g, "grid", "strategies", list, list(STRATEGIES)))
        bad = [v for v in strategies if v not in STRATEGIES]
        if not strategies or bad:
            raise ConfigError(f"grid.strategies: unknown strategies {bad}; expected a subset of {STRATEGIES}")
    return ExperimentConfig(run=run, output_dir=Path(out), sigmas=sigmas, strategies=strategies)


def resolved_config(exp: ExperimentConfig) -> dict:
    """The fully defaulted config that produced a run, in the input schema."""
    r = exp.run
    clients = {str(cid): {} for cid in sorted(set(r.noise_onsets) | set(r.sigma_overrides))}
    for cid, onset in r.noise_onsets.items():
        clients[str(cid)]["onset_global_epoch"] = onset
    for cid, sig in r.sigma_overrides.items():
        clients[str(cid)]["sigma_noise"] = sig
    doc = {"format_version": FORMAT_VERSION,
           "architecture": {"input_size": r.arch.input_size, "num_classes": r.arch.num_classes,
                            "in_channels": r.arch.in_channels, "down_filters": list(r.arch.down_filters),
                            "bottleneck_filters": r.arch.bottleneck_filters,
                            "up_filters": list(r.arch.up_filters), "kernel_size": r.arch.kernel_size},
           "data": {"sample_counts": list(r.sample_counts), "test_samples": r.test_samples, "augment": r.augment},
           "protocol": {"local_epochs": r.local_epochs, "global_epochs": r.global_epochs,
                        "batch_size": r.batch_size, "learning_rate": r.learning_rate,
                        "server_lineage": r.server_lineage},
           "channel": {"sigma_noise": r.sigma_noise, "clients": clients},
           "strategy": {"name": r.strategy, "alpha": r.alpha},
           "seeds": {"model": r.model_seed, "data": r.data_seed, "channel": r.channel_seed},
           "output_dir": str(exp.output_dir)}
    if exp.is_grid:
        doc["grid"] = {"sigmas": list(exp.sigmas), "strategies": list(exp.strategies)}
    return doc


def load_config(path, seed: Optional[int] = None, out: Optional[str] = None) -> ExperimentConfig:
    """Read and validate; ``seed`` overrides all three seeds, ``out`` (or $SPLITFED_OUT) the output dir."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config: file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON in {path}: {exc}") from None
    cfg = parse_config(doc)
    if seed is not None:
        cfg.run.model_seed = cfg.run.data_seed = cfg.run.channel_seed = int(seed)
    override = out or os.environ.get(OUTPUT_ENV)
    if override:
        cfg.output_dir = Path(override)
    return cfg


# ----------------------------------------------------------------- records

def format_number(v) -> str:
    """Shortest round-trip text for floats; 'nan' for NaN; '' for not-applicable."""
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


def _row_cells(row: MetricsRow) -> list:
    is_global = row.client_id == "global"
    client = None if is_global else row
    glob = row if is_global else None
    cells = [FORMAT_VERSION, row.global_epoch, row.client_id, row.strategy, row.sigma_noise,
             client and client.train_loss, client and client.val_loss, client and client.r_weight,
             client and client.indicator, client and client.best_local_epoch,
             glob and glob.test_loss, glob and glob.test_accuracy_percent]
    cells += [glob and v for v in row.iou] if glob else [None] * len(CLASS_NAMES)
    cells.append(row.diverged)
    return [c if isinstance(c, str) else format_number(c) for c in cells]


def metrics_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in rows:
        w.writerow(_row_cells(row))
    return buf.getvalue()


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _json_number(v: float):
    return "nan" if math.isnan(v) else v


def summary_cell(cell: CellResult) -> dict:
    final = [r for r in cell.rows if r.client_id == "global"][-1]
    return {"sigma_noise": cell.sigma_noise,
            "strategy": cell.strategy,
            "global_epoch": final.global_epoch,
            "loss": _json_number(final.test_loss),
            "accuracy": final.test_accuracy_percent,
            "iou": dict(zip(CLASS_NAMES, final.iou)),
            "diverged": final.diverged,
            "background_fraction": 100.0 * cell.background_fraction}


def emit_summary(cells: list) -> str:
    doc = {"format_version": FORMAT_VERSION, "cells": [summary_cell(c) for c in cells]}
    return json.dumps(doc, indent=2) + "\n"


def render_table(summary: dict) -> str:
    head = f"{'sigma':>10} {'method':>7} {'loss':>8} {'acc':>7} " + " ".join(f"{c:>5}" for c in CLASS_NAMES)
    lines = [head, "-" * len(head)]
    for cell in summary["cells"]:
        loss = cell["loss"]
        loss_txt = "nan" if loss == "nan" else f"{loss:.3f}"
        ious = " ".join(f"{cell['iou'][c]:5.2f}" for c in CLASS_NAMES)
        lines.append(f"{cell['sigma_noise']:>10g} {cell['strategy']:>7} {loss_txt:>8} "
                     f"{cell['accuracy']:7.2f} {ious}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------- running

def run_cell(run: RunConfig, sigma: float, strategy: str) -> CellResult:
    cfg = RunConfig(**{**run.__dict__, "sigma_noise": float(sigma), "strategy": strategy,
                       "noise_onsets": dict(run.noise_onsets), "sigma_overrides": dict(run.sigma_overrides)})
    res = run_simulation(cfg)
    return CellResult(sigma_noise=float(sigma), strategy=strategy, rows=res.rows,
                      predictions=res.predictions, truth=res.test_masks, diverged=res.diverged,
                      background_fraction=res.background_fraction,
                      checkpoint={"model": res.final_model})


def _cell_star(args):
    return run_cell(*args)


def cell_dir_name(sigma: float, strategy: str) -> str:
    return f"sigma={format_number(float(sigma))}_{strategy}"


def run_experiment(exp: ExperimentConfig, jobs: int = 1, grid: Optional[bool] = None) -> dict:
    """Execute a single run or the configured sweep and write every artifact.

    Grid cells are ordered sigma-outer, strategy-inner. With ``jobs > 1`` the
    cells run in worker processes; this process is the only writer.
    """
    grid = exp.is_grid if grid is None else grid
    if grid:
        sigmas = exp.sigmas if exp.sigmas is not None else [exp.run.sigma_noise]
        strategies = exp.strategies if exp.strategies is not None else list(STRATEGIES)
        cells = [(exp.run, s, st) for s in sigmas for st in strategies]
    else:
        cells = [(exp.run, exp.run.sigma_noise, exp.run.strategy)]

    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_cell_star, cells))
    else:
        results = [run_cell(*c) for c in cells]
    return write_outputs(exp, results)


def write_outputs(exp: ExperimentConfig, results: list) -> dict:
    out = exp.output_dir
    out.mkdir(parents=True, exist_ok=True)
    all_rows = []
    for cell in results:
        all_rows.extend(cell.rows)
        sub = out / "cells" / cell_dir_name(cell.sigma_noise, cell.strategy)
        sub.mkdir(parents=True, exist_ok=True)
        (sub / "metrics.csv").write_text(metrics_csv(cell.rows))
        save_checkpoint(cell.checkpoint["model"], exp.run.arch, sub / "global_model")
        np.savez_compressed(sub / "predictions.npz", predictions=cell.predictions, truth=cell.truth)
    (out / "metrics.csv").write_text(metrics_csv(all_rows))
    (out / "config.json").write_text(json.dumps(resolved_config(exp), indent=2) + "\n")
    text = emit_summary(results)
    (out / "summary.json").write_text(text)
    summary = json.loads(text)
    (out / "summary.txt").write_text(render_table(summary))
    return summary


def recompute_accuracy(cell_dir) -> float:
    """Pixel accuracy straight from the dumped final prediction maps."""
    with np.load(Path(cell_dir) / "predictions.npz") as z:
        return pixel_accuracy(z["predictions"], z["truth"])
