"""Line-oriented report emission.

A report is a ``#``-prefixed header block followed by comma-separated records.
The first field of every record names its type; the remaining columns follow
the fixed order in :data:`RECORD_COLUMNS`.
"""
from __future__ import annotations

import datetime as _dt
import io
from dataclasses import dataclass, field

from . import __version__

RECORD_COLUMNS: dict[str, tuple[str, ...]] = {
    "prune": ("step", "source", "axis", "host_dim", "indices", "saliency", "quad_objective"),
    "train": ("seed", "step", "loss", "rank", "alpha", "event"),
    "summary": ("strategy", "seeds", "final_loss_median", "final_loss_min", "final_loss_max", "final_rank"),
    "seed_result": ("strategy", "seed", "final_loss", "final_rank"),
    "bound": ("trial", "criterion", "measured", "bound", "ok"),
    "oracle": ("instance", "m", "n", "k", "check", "value", "ok"),
    "metric": ("name", "value"),
}

TIMESTAMP_PREFIX = "# timestamp: "


@dataclass(frozen=True)
class PruneReportEntry:
    step: int
    indices: tuple[int, ...]
    saliency: float
    quad_objective: float
    axis: str = "column"
    host_dim: int = 0
    source: str = "pruner"

    def record(self) -> list:
        return [self.step, self.source, self.axis, self.host_dim,
                " ".join(str(i) for i in self.indices), self.saliency, self.quad_objective]


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.17g}"
    text = str(value)
    if "," in text or "\n" in text:
        raise ValueError(f"field contains a separator: {text!r}")
    return text


@dataclass
class Report:
    command: str
    config: dict
    records: list[tuple[str, list]] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def add(self, kind: str, values) -> None:
        values = list(values)
        if kind not in RECORD_COLUMNS:
            raise KeyError(f"unknown record type {kind}")
        if len(values) != len(RECORD_COLUMNS[kind]):
            raise ValueError(f"{kind} record needs {len(RECORD_COLUMNS[kind])} fields, got {len(values)}")
        self.records.append((kind, values))

    def add_prune(self, entry: PruneReportEntry) -> None:
        self.add("prune", entry.record())

    def render(self, timestamp: str | None = None) -> str:
        if timestamp is None:
            timestamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        out = io.StringIO()
        out.write(f"# obsprune {__version__}\n")
        out.write(f"# command: {self.command}\n")
        out.write(f"{TIMESTAMP_PREFIX}{timestamp}\n")
        for key in sorted(self.config):
            out.write(f"# config.{key}: {self.config[key]}\n")
        for note in self.notes:
            out.write(f"# note: {note}\n")
        kinds = []
        for kind, _ in self.records:
            if kind not in kinds:
                kinds.append(kind)
        for kind in kinds:
            out.write(f"# columns.{kind}: record," + ",".join(RECORD_COLUMNS[kind]) + "\n")
        for kind, values in self.records:
            out.write(",".join([kind] + [_fmt(v) for v in values]) + "\n")
        return out.getvalue()


def strip_timestamp(text: str) -> str:
    return "".join(ln for ln in text.splitlines(keepends=True) if not ln.startswith(TIMESTAMP_PREFIX))


def parse_records(text: str, kind: str | None = None) -> list[dict]:
    """Read records back as dicts keyed by column name (values left as strings)."""
    rows = []
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        fields = line.split(",")
        if kind is not None and fields[0] != kind:
            continue
        cols = RECORD_COLUMNS[fields[0]]
        rows.append({"record": fields[0], **dict(zip(cols, fields[1:]))})
    return rows
