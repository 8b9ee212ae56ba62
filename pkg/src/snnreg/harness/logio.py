"""JSON-lines metric logs and per-figure CSV emission."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

LOG_SCHEMA = 1


class LogParseError(ValueError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


@dataclass
class TrainRecord:
    epoch: int
    step: int
    split: str  # train | val | test | sweep
    loss: float
    accuracy: float
    per_layer_rates: list = field(default_factory=list)
    per_layer_scales: list = field(default_factory=list)
    global_gain: float = 1.0
    energy_E: float | None = None
    progress_p: float | None = None
    wall_ms: float = 0.0
    flags: list = field(default_factory=list)


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)  # "nan" / "inf": JSON has no literal for these
    if isinstance(v, list):
        return [_jsonable(x) for x in v]
    return v


def _unjson(v):
    if isinstance(v, str) and v in ("nan", "inf", "-inf"):
        return float(v)
    if isinstance(v, list):
        return [_unjson(x) for x in v]
    return v


def record_line(rec: TrainRecord) -> str:
    d = {"v": LOG_SCHEMA}
    d.update({k: _jsonable(v) for k, v in asdict(rec).items()})
    return json.dumps(d, separators=(",", ":"))


def append_record(path, rec: TrainRecord) -> None:
    with open(path, "a") as fh:
        fh.write(record_line(rec) + "\n")


def read_log(path) -> list[TrainRecord]:
    names = {f.name for f in fields(TrainRecord)}
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LogParseError(path, lineno, f"invalid JSON at column {exc.colno}") from exc
            if not isinstance(d, dict) or d.pop("v", None) != LOG_SCHEMA:
                raise LogParseError(path, lineno, "missing or unsupported schema version")
            if set(d) != names:
                raise LogParseError(path, lineno, f"fields {sorted(set(d) ^ names)} do not match schema")
            out.append(TrainRecord(**{k: _unjson(v) for k, v in d.items()}))
    return out


def strip_wall(lines):
    """Log lines with ``wall_ms`` zeroed, for determinism comparisons."""
    out = []
    for line in lines:
        d = json.loads(line)
        d["wall_ms"] = 0
        out.append(json.dumps(d, separators=(",", ":")))
    return out


FIGURES = ("sweep", "rates", "scales", "gain")


def emit_plot_csv(log_path, figure: str, out_path) -> int:
    """Write the CSV behind one figure; returns the number of data rows."""
    if figure not in FIGURES:
        raise ValueError(f"unknown figure {figure!r}; choose from {FIGURES}")
    recs = read_log(log_path)
    rows: list[list] = []
    if figure == "sweep":
        header = ["s", "final_acc", "final_loss"]
        for r in recs:
            if r.split == "sweep":
                rows.append([r.per_layer_scales[0], r.accuracy, r.loss])
    elif figure in ("rates", "scales"):
        train = [r for r in recs if r.split == "train"]
        key = "per_layer_rates" if figure == "rates" else "per_layer_scales"
        width = max((len(getattr(r, key)) for r in train), default=0)
        header = ["epoch", "step"] + [f"unit{u}" for u in range(width)]
        rows = [[r.epoch, r.step] + list(getattr(r, key)) for r in train]
    else:
        header = ["epoch", "global_gain", "energy_E", "progress_p", "val_loss"]
        rows = [[r.epoch, r.global_gain, r.energy_E, r.progress_p, r.loss]
                for r in recs if r.split == "val"]
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return len(rows)


def write_csv(path, header, rows) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
