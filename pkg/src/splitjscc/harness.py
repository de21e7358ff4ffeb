"""Experiment configuration, the resumable run/sweep orchestration and result emission.

A run trains one configuration through the four phases and evaluates it at
every SNR in ``snr_db_list``.  Every phase ends with a checkpoint named by a
hash of the configuration fields that phase depends on, so

* the phase-1 checkpoint is shared by all sweep cells with the same data,
  backbone, seed and pretraining schedule, and
* a resumed run picks up at the last finished phase and, because all
  randomness is keyed by (seed, phase, epoch), reproduces the rows of an
  uninterrupted run exactly.

Rows are appended to ``<output_dir>/results.csv`` as soon as they are
computed and are keyed by (config hash, snr_db), so resuming never writes
duplicates.
"""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

from . import checkpoint as ckpt_io
from .channel import digital_bits
from .complexity import device_flops, flops_vs_bandwidth_frontier
from .data import Dataset, channel_stats, load_cifar100, load_spwd, synthetic_dataset
from .errors import ConfigError
from .models import INPUT_SHAPE, BackboneConfig, SplitModel, bandwidth, build_split_model, propagate_shape
from .pipeline import (
    PipelineConfig,
    phase1_pretrain,
    phase2_prune,
    phase3_codec_pretrain,
    phase4_end_to_end,
)
from .pruning import device_filter_count
from .results import CSV_COLUMNS, EXTRA_COLUMNS, ResultRow, append_csv, read_csv, write_csv, write_json
from .tensor import make_rng
from .training import evaluate

log = logging.getLogger(__name__)

RESULTS_FILE = "results.csv"
STAGES = ("phase1", "phase2", "phase3", "phase4", "eval")
GRID_KEYS = ("split", "pruning_ratio", "c_enc", "seed")


@dataclass
class ExperimentConfig:
    """One cell of an experiment.

    ``dataset`` is ``{"kind": "synthetic", "class_count", "n_train_per_class",
    "n_test_per_class", "seed"}``, ``{"kind": "cifar100", "path"}`` or
    ``{"kind": "spwd", "train", "test"}``.  ``c_enc=0`` means no codec: the
    split feature reaches the server uncompressed and noiselessly.
    The training SNR is ``pipeline.snr_db``; ``snr_db_list`` only affects
    evaluation.
    """

    dataset: dict = field(
        default_factory=lambda: {"kind": "synthetic", "class_count": 4, "n_train_per_class": 500, "n_test_per_class": 100}
    )
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    split: int = 2
    pruning_ratio: float = 0.0
    c_enc: int = 8
    snr_db_list: list = field(default_factory=lambda: [20.0])
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    seed: int = 0
    output_dir: str = "runs"
    reference_symbols: int = 3 * 32 * 32

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig.from_dict(self.backbone)
        if isinstance(self.pipeline, dict):
            self.pipeline = PipelineConfig.from_dict(self.pipeline)
        self.snr_db_list = [float(s) for s in self.snr_db_list]
        if not self.snr_db_list:
            raise ConfigError("snr_db_list must not be empty")
        if not 1 <= self.split <= len(self.backbone.block_widths):
            raise ConfigError(f"split must lie in [1, {len(self.backbone.block_widths)}], got {self.split}")
        if not 0 <= self.pruning_ratio < 1:
            raise ConfigError(f"pruning_ratio must lie in [0, 1), got {self.pruning_ratio}")
        if self.c_enc < 0:
            raise ConfigError(f"c_enc must be >= 0, got {self.c_enc}")
        kind = self.dataset.get("kind")
        if kind not in ("synthetic", "cifar100", "spwd"):
            raise ConfigError(f"unknown dataset kind {kind!r}")
        # the cell's own fields drive the pipeline
        self.pipeline = replace(
            self.pipeline,
            seed=self.seed,
            phase2=replace(self.pipeline.phase2, target_ratio=self.pruning_ratio),
        )

    def check_paths(self) -> None:
        paths = {"cifar100": ["path"], "spwd": ["train", "test"]}.get(self.dataset["kind"], [])
        for key in paths:
            if key not in self.dataset or not os.path.exists(self.dataset[key]):
                raise ConfigError(f"dataset {key} {self.dataset.get(key)!r} does not exist")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snr_db_list"] = [_json_float(s) for s in self.snr_db_list]
        d["pipeline"]["snr_db"] = _json_float(self.pipeline.snr_db)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"grid"}
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        d = {k: v for k, v in d.items() if k in known}
        if "snr_db_list" in d:
            d["snr_db_list"] = [float(s) for s in d["snr_db_list"]]
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def config_hash(self) -> str:
        """Identity of the trained model: everything except evaluation SNRs and paths."""
        d = self.to_dict()
        d.pop("snr_db_list")
        d.pop("output_dir")
        return _digest(d)

    def pretrain_hash(self) -> str:
        p = self.pipeline
        return _digest(
            {
                "dataset": self.dataset,
                "backbone": asdict(self.backbone),
                "seed": self.seed,
                "phase1": asdict(p.phase1),
                "shared": [p.momentum, p.weight_decay, p.batch_size, p.augment],
            }
        )


def _json_float(x: float):
    return x if math.isfinite(x) else repr(x)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | os.PathLike | None = None, overrides: dict | None = None) -> tuple[ExperimentConfig, dict]:
    """Build a config with precedence overrides > file > defaults.

    Returns the config and the (possibly empty) sweep grid from the file.
    """
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    grid = raw.pop("grid", {}) or {}
    merged = _merge(raw, {k: v for k, v in (overrides or {}).items() if v is not None})
    for key in set(grid) & set(overrides or {}):
        if overrides[key] is not None:
            grid.pop(key)
    bad = set(grid) - set(GRID_KEYS)
    if bad:
        raise ConfigError(f"grid keys must be among {GRID_KEYS}, got {sorted(bad)}")
    return ExperimentConfig.from_dict(merged), grid


# -- data ---------------------------------------------------------------------------


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Train/test datasets with train-split normalization statistics attached to both."""
    d = cfg.dataset
    if d["kind"] == "synthetic":
        seed = d.get("seed", cfg.seed)
        seed = cfg.seed if seed is None else seed
        train = synthetic_dataset(d["class_count"], d["n_train_per_class"], seed, "train")
        test = synthetic_dataset(d["class_count"], d["n_test_per_class"], seed, "test")
    elif d["kind"] == "cifar100":
        return load_cifar100(d["path"])
    else:
        train, test = load_spwd(d["train"], "train"), load_spwd(d["test"], "test")
    stats = channel_stats(train)
    return train.with_stats(stats), test.with_stats(stats)


# -- run ------------------------------------------------------------------------------


@dataclass
class RunStats:
    pretrain_runs: int = 0
    phases_run: list = field(default_factory=list)


def _ckpt_dir(cfg: ExperimentConfig) -> Path:
    d = Path(cfg.output_dir) / "checkpoints"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _cell_ckpt(cfg: ExperimentConfig, phase: str) -> Path:
    return _ckpt_dir(cfg) / f"{cfg.config_hash()}-{phase}.ckpt"


def _pretrain_ckpt(cfg: ExperimentConfig) -> Path:
    return _ckpt_dir(cfg) / f"pretrain-{cfg.pretrain_hash()}.ckpt"


def _save(model: SplitModel, path: Path, extra: dict) -> None:
    ckpt_io.save(ckpt_io.Checkpoint(model, extra=extra), path)


def _pretrain(cfg: ExperimentConfig, train: Dataset, test: Dataset, stats: RunStats) -> tuple[SplitModel, dict]:
    path = _pretrain_ckpt(cfg)
    if path.exists():
        c = ckpt_io.load(path, cfg.backbone)
        log.info("reusing pretrained backbone %s", path.name)
        return c.model, c.extra
    model = build_split_model(cfg.backbone, None, rng=make_rng(cfg.seed, "init"))
    t0 = time.perf_counter()
    phase1_pretrain(model, train, None, cfg.pipeline)
    extra = {"baseline_accuracy": evaluate(model, test), "timings": {"phase1": time.perf_counter() - t0}}
    _save(model, path, extra)
    stats.pretrain_runs += 1
    stats.phases_run.append("phase1")
    return model, extra


def _latest_cell_checkpoint(cfg: ExperimentConfig):
    for phase in ("phase4", "phase3", "phase2"):
        path = _cell_ckpt(cfg, phase)
        if path.exists():
            return phase, ckpt_io.load(path, cfg.backbone)
    return None, None


def run(
    cfg: ExperimentConfig,
    resume: bool = False,
    until: str = "eval",
    on_phase: Callable[[ExperimentConfig, str], None] | None = None,
    stats: RunStats | None = None,
    datasets: tuple[Dataset, Dataset] | None = None,
) -> list[ResultRow]:
    """Train ``cfg`` through the pipeline and evaluate it at every SNR of ``snr_db_list``.

    ``until`` stops after the named stage (phase1..phase4 or eval).  With
    ``resume`` the latest cell checkpoint and the rows already in the results
    file are reused; the shared phase-1 checkpoint is always reused.
    ``on_phase(cfg, stage)`` is called after every stage's checkpoint is on
    disk (an exception raised there interrupts the run cleanly).
    """
    if until not in STAGES:
        raise ValueError(f"until must be one of {STAGES}")
    cfg.check_paths()
    stats = stats if stats is not None else RunStats()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    results_path = out / RESULTS_FILE
    chash = cfg.config_hash()
    if not resume:
        _drop_rows(results_path, chash)
    train, test = datasets if datasets is not None else load_datasets(cfg)
    notify = on_phase or (lambda c, s: None)
    p = cfg.pipeline

    done_phase, c = _latest_cell_checkpoint(cfg) if resume else (None, None)
    if c is not None:
        model, extra = c.model, c.extra
        log.info("resuming %s after %s", chash, done_phase)
    else:
        base, pre_extra = _pretrain(cfg, train, test, stats)
        notify(cfg, "phase1")
        if until == "phase1":
            return []
        model = copy.deepcopy(base)
        model.split = cfg.split
        model.meta.original_device_filters = device_filter_count(model)
        extra = {"baseline_accuracy": pre_extra["baseline_accuracy"], "timings": dict(pre_extra["timings"])}
        t0 = time.perf_counter()
        if cfg.pruning_ratio > 0:
            model, _ = phase2_prune(model, train, None, cfg.split, p)
            stats.phases_run.append("phase2")
        extra["timings"]["phase2"] = time.perf_counter() - t0
        extra["split_accuracy"] = evaluate(model, test)
        _save(model, _cell_ckpt(cfg, "phase2"), extra)
        done_phase = "phase2"
        notify(cfg, "phase2")
    if until == "phase2":
        return []

    if cfg.c_enc > 0 and done_phase == "phase2":
        model.attach_codec(cfg.c_enc, make_rng(cfg.seed, "init", 3))
        t0 = time.perf_counter()
        phase3_codec_pretrain(model, train, p)
        stats.phases_run.append("phase3")
        extra["timings"]["phase3"] = time.perf_counter() - t0
        _save(model, _cell_ckpt(cfg, "phase3"), extra)
        done_phase = "phase3"
        notify(cfg, "phase3")
    if until == "phase3":
        return []

    if cfg.c_enc > 0 and done_phase == "phase3":
        ckpt_io.require_phase(model, "phase4")
        t0 = time.perf_counter()
        phase4_end_to_end(model, train, None, p)
        stats.phases_run.append("phase4")
        extra["timings"]["phase4"] = time.perf_counter() - t0
        _save(model, _cell_ckpt(cfg, "phase4"), extra)
        notify(cfg, "phase4")
    if until == "phase4":
        return []
    return evaluate_rows(cfg, model, test, extra, results_path, notify)


def row_bandwidth(model: SplitModel) -> int:
    if model.has_codec:
        return model.bandwidth
    return int(math.prod(propagate_shape(model.prefix.layers, INPUT_SHAPE)))


def evaluate_rows(cfg, model: SplitModel, test: Dataset, extra: dict, results_path: Path, notify=None) -> list[ResultRow]:
    """Evaluate at each SNR, appending rows not already present in ``results_path``."""
    chash = cfg.config_hash()
    existing = {r.key: r for r in read_csv(results_path)} if results_path.exists() else {}
    flops = device_flops(model).device_total
    bw = row_bandwidth(model)
    if model.has_codec and bw != bandwidth(model.split_feature_shape, cfg.c_enc):
        raise ConfigError("row bandwidth disagrees with the codec law")
    rows = []
    for snr in cfg.snr_db_list:
        key = (chash, float(snr))
        if key in existing:
            rows.append(existing[key])
            continue
        t0 = time.perf_counter()
        acc = evaluate(model, test, snr, cfg.pipeline.eval_noise_draws, cfg.seed)
        timings = dict(extra.get("timings", {}), eval=time.perf_counter() - t0)
        row = ResultRow(
            split=cfg.split,
            ratio=cfg.pruning_ratio,
            c_enc=cfg.c_enc,
            bandwidth=bw,
            snr_db=float(snr),
            accuracy=acc,
            device_flops=flops,
            baseline_accuracy=extra["baseline_accuracy"],
            seed=cfg.seed,
            split_accuracy=extra.get("split_accuracy", math.nan),
            digital_bits=digital_bits(snr, bw),
            bandwidth_reduction=cfg.reference_symbols / bw,
            config_hash=chash,
            timings=timings,
        )
        append_csv(row, results_path)
        rows.append(row)
    if notify is not None:
        notify(cfg, "eval")
    return rows


def _drop_rows(path: Path, chash: str) -> None:
    if not path.exists():
        return
    kept = [r for r in read_csv(path) if r.config_hash != chash]
    write_csv(kept, path)


# -- sweep ---------------------------------------------------------------------------------


def expand_grid(base: ExperimentConfig, grid: dict) -> list[ExperimentConfig]:
    """Cartesian product of ``grid`` (keys among split, pruning_ratio, c_enc, seed) over ``base``."""
    bad = set(grid) - set(GRID_KEYS)
    if bad:
        raise ConfigError(f"grid keys must be among {GRID_KEYS}, got {sorted(bad)}")
    keys = [k for k in GRID_KEYS if k in grid]
    cells = []
    for values in itertools.product(*(grid[k] for k in keys)):
        d = base.to_dict()
        d.update(dict(zip(keys, values)))
        cells.append(ExperimentConfig.from_dict(d))
    return cells


@dataclass
class SweepResult:
    rows: list
    failures: list
    stats: RunStats

    @property
    def partial(self) -> bool:
        return bool(self.failures)


def sweep(
    cells: list[ExperimentConfig],
    resume: bool = False,
    on_phase: Callable[[ExperimentConfig, str], None] | None = None,
) -> SweepResult:
    """Run every cell into the shared results file; a failing cell is logged and skipped."""
    stats = RunStats()
    rows, failures = [], []
    data_cache: dict[str, tuple[Dataset, Dataset]] = {}
    if not resume:
        for path in {Path(c.output_dir) / RESULTS_FILE for c in cells}:
            path.unlink(missing_ok=True)
    for i, cfg in enumerate(cells):
        dkey = json.dumps([cfg.dataset, cfg.seed], sort_keys=True)
        try:
            if dkey not in data_cache:
                data_cache[dkey] = load_datasets(cfg)
            rows += run(cfg, resume=resume, on_phase=on_phase, stats=stats, datasets=data_cache[dkey])
        except Exception as exc:  # cells are isolated by design
            log.error("sweep cell %d (%s) failed: %s", i, cfg.config_hash(), exc)
            failures.append((i, cfg, repr(exc)))
    return SweepResult(rows, failures, stats)


# -- emission ------------------------------------------------------------------------------

FRONTIER_COLUMNS = ["x", "y", "series", "split", "ratio", "c_enc", "accuracy", "baseline_accuracy", "seed"]


def frontier_rows(rows: list[ResultRow], accuracy_floor: float = 0.02) -> list[dict]:
    """Plot-ready frontier: x = device FLOPs, y = bandwidth, one series per SNR."""
    out = []
    for snr in sorted({r.snr_db for r in rows}):
        for r in flops_vs_bandwidth_frontier([r for r in rows if r.snr_db == snr], accuracy_floor):
            out.append(
                {
                    "x": r.device_flops,
                    "y": r.bandwidth,
                    "series": f"snr={snr:g}dB",
                    "split": r.split,
                    "ratio": r.ratio,
                    "c_enc": r.c_enc,
                    "accuracy": r.accuracy,
                    "baseline_accuracy": r.baseline_accuracy,
                    "seed": r.seed,
                }
            )
    return out


def emit(rows: list[ResultRow], out_dir: str | os.PathLike, fmt: str = "csv", frontier_floor: float | None = None) -> list[Path]:
    """Write the results table (csv or json) and optionally ``frontier.csv``; returns the paths written."""
    import csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        path = out / "table.csv"
        write_csv(rows, path)
    elif fmt == "json":
        path = out / "table.json"
        if not rows:
            log.warning("no result rows; writing an empty table to %s", path)
        write_json(rows, path)
    else:
        raise ConfigError(f"format must be csv or json, got {fmt!r}")
    written = [path]
    if frontier_floor is not None:
        fpath = out / "frontier.csv"
        with open(fpath, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=FRONTIER_COLUMNS)
            writer.writeheader()
            writer.writerows(frontier_rows(rows, frontier_floor))
        written.append(fpath)
    return written


__all__ = [
    "CSV_COLUMNS",
    "EXTRA_COLUMNS",
    "ExperimentConfig",
    "RunStats",
    "SweepResult",
    "emit",
    "expand_grid",
    "frontier_rows",
    "load_config",
    "load_datasets",
    "run",
    "sweep",
]
