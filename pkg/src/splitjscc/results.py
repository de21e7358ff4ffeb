"""Result rows and their CSV/JSON serialization."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields

log = logging.getLogger(__name__)

CSV_COLUMNS = ["split", "ratio", "c_enc", "bandwidth", "snr_db", "accuracy", "device_flops", "baseline_accuracy", "seed"]
EXTRA_COLUMNS = ["split_accuracy", "digital_bits", "bandwidth_reduction", "config_hash"]


@dataclass
class ResultRow:
    split: int
    ratio: float
    c_enc: int
    bandwidth: int
    snr_db: float
    accuracy: float
    device_flops: int
    baseline_accuracy: float
    seed: int
    split_accuracy: float = float("nan")
    digital_bits: float = 0.0
    bandwidth_reduction: float = 0.0
    config_hash: str = ""
    timings: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy must lie in [0, 1], got {self.accuracy}")

    @property
    def key(self) -> tuple[str, float]:
        return self.config_hash, float(self.snr_db)

    def to_csv_dict(self) -> dict:
        d = asdict(self)
        d.pop("timings")
        return d

    @classmethod
    def from_csv_dict(cls, d: dict) -> "ResultRow":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for name in CSV_COLUMNS + EXTRA_COLUMNS:
            if name not in d:
                continue
            raw = d[name]
            t = types[name]
            kwargs[name] = int(raw) if t == "int" else float(raw) if t == "float" else raw
        return cls(**kwargs)


def write_csv(rows: list[ResultRow], path: str | os.PathLike) -> None:
    if not rows:
        log.warning("no result rows; writing header only to %s", path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS + EXTRA_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row.to_csv_dict())


def append_csv(row: ResultRow, path: str | os.PathLike) -> None:
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS + EXTRA_COLUMNS)
        if new:
            writer.writeheader()
        writer.writerow(row.to_csv_dict())
        fh.flush()
        os.fsync(fh.fileno())


def read_csv(path: str | os.PathLike) -> list[ResultRow]:
    with open(path, newline="") as fh:
        return [ResultRow.from_csv_dict(r) for r in csv.DictReader(fh)]


def write_json(rows: list[ResultRow], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        json.dump([asdict(r) for r in rows], fh, indent=2)
