"""Experiment reports: per-round rows, CSV persistence and cross-repetition summaries.

CSV layout (schema ``maser-report/1``)::

    # maser-report/1
    # config experiment.m=5          <- one line per accepted setting
    # status ok                      <- or "aborted: <reason>"
    rep,seed,round,test_accuracy,...  <- header, columns = COLUMNS
    0,0,0,0.1034,...

Wall-clock columns are those starting with ``ms_``.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

from .errors import FormatError
from .protocol.messages import CIPHERTEXT_KINDS, KEY_KINDS, MASK_KINDS, MODEL_KINDS, Kind
from .protocol.roles import Phase

SCHEMA = "maser-report/1"

_PHASES = [p.name for p in Phase]
_KINDS = [k for k in Kind if k != Kind.HELLO]

COLUMNS = (
    ["rep", "seed", "round", "test_accuracy", "kept_count", "slice_count"]
    + [f"ms_{p}" for p in _PHASES]
    + [f"bytes_{k.name}" for k in _KINDS]
    + [f"msgs_{k.name}" for k in _KINDS]
    + ["key_bytes", "model_bytes", "mask_bytes", "ciphertext_bytes", "overhead_bytes", "total_bytes"]
)
WALL_CLOCK = tuple(c for c in COLUMNS if c.startswith("ms_"))


@dataclass
class RoundRow:
    rep: int
    seed: int
    round: int
    test_accuracy: float | None
    kept_count: int = 0
    slice_count: int = 0
    timings_ms: dict = field(default_factory=dict)
    bytes_by_kind: dict = field(default_factory=dict)  # Kind -> content bytes
    msgs_by_kind: dict = field(default_factory=dict)
    overhead_bytes: int = 0

    def _sum(self, kinds) -> int:
        return sum(v for k, v in self.bytes_by_kind.items() if k in kinds)

    @property
    def key_bytes(self) -> int:
        return self._sum(KEY_KINDS)

    @property
    def model_bytes(self) -> int:
        return self._sum(MODEL_KINDS)

    @property
    def mask_bytes(self) -> int:
        return self._sum(MASK_KINDS)

    @property
    def ciphertext_bytes(self) -> int:
        return self._sum(CIPHERTEXT_KINDS)

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes_by_kind.values())

    def as_dict(self) -> dict[str, object]:
        acc = "" if self.test_accuracy is None else f"{self.test_accuracy:.6f}"
        row = {
            "rep": self.rep,
            "seed": self.seed,
            "round": self.round,
            "test_accuracy": acc,
            "kept_count": self.kept_count,
            "slice_count": self.slice_count,
        }
        for p in _PHASES:
            row[f"ms_{p}"] = f"{self.timings_ms.get(p, 0.0):.3f}"
        for k in _KINDS:
            row[f"bytes_{k.name}"] = self.bytes_by_kind.get(k, 0)
            row[f"msgs_{k.name}"] = self.msgs_by_kind.get(k, 0)
        row.update(
            key_bytes=self.key_bytes,
            model_bytes=self.model_bytes,
            mask_bytes=self.mask_bytes,
            ciphertext_bytes=self.ciphertext_bytes,
            overhead_bytes=self.overhead_bytes,
            total_bytes=self.total_bytes,
        )
        return row


@dataclass
class ExperimentReport:
    config: list  # (dotted key, value) pairs
    rows: list = field(default_factory=list)
    status: str = "ok"
    final_model: object = field(default=None, repr=False, compare=False)

    @property
    def aborted(self) -> bool:
        return self.status != "ok"

    def final_accuracy(self, rep: int | None = None) -> float | None:
        rows = [r for r in self.rows if rep is None or r.rep == rep]
        return rows[-1].test_accuracy if rows else None

    def accuracies(self, rep: int = 0) -> list[float]:
        return [r.test_accuracy for r in self.rows if r.rep == rep and r.round > 0]

    def total(self, attr: str, rep: int | None = None) -> int:
        return sum(getattr(r, attr) for r in self.rows if rep is None or r.rep == rep)

    def extend(self, other: "ExperimentReport") -> None:
        self.rows.extend(other.rows)
        if other.aborted and not self.aborted:
            self.status = other.status

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# {SCHEMA}\n")
        for key, value in self.config:
            buf.write(f"# config {key}={value}\n")
        buf.write(f"# status {self.status}\n")
        writer = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow(row.as_dict())
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def strip_wall_clock(csv_text: str) -> str:
    """CSV text with wall-clock columns blanked, for determinism comparisons."""
    lines = csv_text.splitlines()
    body = [ln for ln in lines if not ln.startswith("#")]
    head = [ln for ln in lines if ln.startswith("#")]
    reader = csv.DictReader(body)
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=reader.fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in reader:
        writer.writerow({k: ("" if k in WALL_CLOCK else v) for k, v in row.items()})
    return "\n".join(head) + "\n" + out.getvalue()


# --------------------------------------------------------------------------
# Summaries
# --------------------------------------------------------------------------

# per-repetition reduction: accuracy -> final round, everything else -> total over rounds
SUMMARY_METRICS = ["test_accuracy"] + [c for c in COLUMNS if c.startswith(("ms_", "bytes_"))] + [
    "key_bytes",
    "model_bytes",
    "mask_bytes",
    "ciphertext_bytes",
    "overhead_bytes",
    "total_bytes",
]


def parse_csv_text(text: str, name: str = "<csv>") -> list[dict[str, str]]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != f"# {SCHEMA}":
        raise FormatError(f"{name}: not a {SCHEMA} file")
    reader = csv.DictReader(ln for ln in lines if not ln.startswith("#"))
    if reader.fieldnames is None or list(reader.fieldnames) != COLUMNS:
        raise FormatError(f"{name}: column header does not match schema {SCHEMA}")
    return list(reader)


def read_csv_rows(path) -> list[dict[str, str]]:
    return parse_csv_text(Path(path).read_text(), str(path))


def per_repetition(sources) -> list[dict[str, float]]:
    """One dict of reduced metrics per (file, rep) block.

    ``sources`` holds paths or ``(name, csv text)`` pairs.
    """
    blocks: dict[tuple, list[dict[str, str]]] = {}
    for src in sources:
        if isinstance(src, tuple):
            name, rows = src[0], parse_csv_text(src[1], src[0])
        else:
            name, rows = str(src), read_csv_rows(src)
        for row in rows:
            blocks.setdefault((name, row["rep"]), []).append(row)
    out = []
    for key, rows in blocks.items():
        rows.sort(key=lambda r: int(r["round"]))
        reduced = {}
        for metric in SUMMARY_METRICS:
            if metric == "test_accuracy":
                raw = rows[-1][metric]
                if raw == "":
                    raise FormatError(f"{key[0]} rep {key[1]}: empty test_accuracy column")
                reduced[metric] = float(raw)
            else:
                values = [r[metric] for r in rows]
                if any(v == "" for v in values):
                    raise FormatError(f"{key[0]} rep {key[1]}: empty {metric} column")
                reduced[metric] = sum(float(v) for v in values)
        out.append(reduced)
    return out


def summarize(paths) -> dict[str, tuple[float, float]]:
    """metric -> (mean, sample stddev) across every repetition in ``paths``.

    Entries may also be ``(name, csv text)`` pairs.
    """
    paths = list(paths)
    if not paths:
        raise FormatError("no CSV files to summarize")
    reps = per_repetition(paths)
    if not reps:
        raise FormatError("CSV files contain no rows")
    result = {}
    for metric in SUMMARY_METRICS:
        values = [r[metric] for r in reps]
        std = statistics.stdev(values) if len(values) > 1 else 0.0
        result[metric] = (statistics.fmean(values), std)
    return result


def format_summary(summary: dict[str, tuple[float, float]]) -> str:
    width = max(len(k) for k in summary)
    lines = [f"{'metric':<{width}}  {'mean':>18}  {'stddev':>18}"]
    for metric, (mean, std) in summary.items():
        lines.append(f"{metric:<{width}}  {_fmt(mean):>18}  {_fmt(std):>18}")
    return "\n".join(lines)


def _fmt(x: float) -> str:
    if x == 0 or (abs(x) >= 1e-3 and abs(x) < 1e12):
        return f"{x:.6f}" if not float(x).is_integer() else f"{x:.1f}"
    return f"{x:.6e}" if math.isfinite(x) else str(x)
