"""Evaluation reports and their CSV / text-table renderings.

CSV schema (UTF-8, ``\\n`` line ends)::

    # advlab-report 1
    # experiment_id=<id>
    # seed=<int>
    # config_sha256=<hex>
    # version=<advlab version>
    kind,sample_id,condition,metric,value
    sample,<int>,<condition>,<metric>,<value>
    aggregate,,<condition>,<metric>,<value>
    derived,,<condition>,<metric>,<value>

Values print with 6 significant digits (``%.6g``).  Sample rows are sorted by
(condition, metric, sample id) in first-appearance order of the condition.
Aggregate rows are means of the sample rows sharing (condition, metric);
derived rows hold quantities computed from aggregates (average drop).
Conditions are ``<row label>@<column label>``; the table style pivots them.
"""
from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction

from advlab import __version__

HEADER = ("kind", "sample_id", "condition", "metric", "value")


class ReportError(ValueError):
    pass


@dataclass
class EvaluationReport:
    experiment_id: str
    seed: int
    config_sha256: str
    version: str = __version__
    samples: list[tuple[int, str, str, float]] = field(default_factory=list)
    derived: list[tuple[str, str, float]] = field(default_factory=list)

    def add(self, sample_id: int, condition: str, metric: str, value: float) -> None:
        if "," in condition or "," in metric:
            raise ReportError("conditions and metrics must not contain commas")
        self.samples.append((int(sample_id), condition, metric, float(value)))

    def add_derived(self, condition: str, metric: str, value: float | None) -> None:
        self.derived.append((condition, metric, math.nan if value is None else float(value)))

    def aggregates(self) -> list[tuple[str, str, float]]:
        groups: dict[tuple[str, str], list[float]] = {}
        for _, cond, metric, v in _order(self):
            groups.setdefault((cond, metric), []).append(v)
        return [(c, m, math.fsum(vs) / len(vs)) for (c, m), vs in groups.items()]

    def aggregate(self, condition: str, metric: str) -> float:
        for c, m, v in self.aggregates():
            if c == condition and m == metric:
                return v
        raise KeyError((condition, metric))

    def values(self, condition: str, metric: str) -> list[float]:
        return [v for _, c, m, v in sorted(self.samples) if c == condition and m == metric]


def _g(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6g}"


def _order(rep: EvaluationReport):
    first = {}
    for _, cond, _, _ in rep.samples:
        first.setdefault(cond, len(first))
    return sorted(rep.samples, key=lambda r: (first[r[1]], r[2], r[0]))


def render_csv(rep: EvaluationReport) -> str:
    buf = io.StringIO()
    buf.write("# advlab-report 1\n")
    buf.write(f"# experiment_id={rep.experiment_id}\n# seed={rep.seed}\n")
    buf.write(f"# config_sha256={rep.config_sha256}\n# version={rep.version}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for sid, cond, metric, v in _order(rep):
        w.writerow(("sample", sid, cond, metric, _g(v)))
    for cond, metric, v in rep.aggregates():
        w.writerow(("aggregate", "", cond, metric, _g(v)))
    for cond, metric, v in rep.derived:
        w.writerow(("derived", "", cond, metric, _g(v)))
    return buf.getvalue()


def parse_csv(text: str) -> EvaluationReport:
    meta = {}
    lines = text.splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            key, sep, val = line[1:].strip().partition("=")
            if sep:
                meta[key] = val
        else:
            body.append(line)
    rows = list(csv.reader(body))
    if not rows or tuple(rows[0]) != HEADER:
        raise ReportError("missing CSV header row")
    try:
        rep = EvaluationReport(meta["experiment_id"], int(meta["seed"]), meta["config_sha256"], meta["version"])
    except KeyError as exc:
        raise ReportError(f"missing report metadata {exc}") from exc
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != 5:
            raise ReportError(f"row {n}: expected 5 fields, got {len(row)}")
        kind, sid, cond, metric, val = row
        if kind == "sample":
            rep.add(int(sid), cond, metric, float(val))
        elif kind == "derived":
            rep.add_derived(cond, metric, float(val))
        elif kind != "aggregate":
            raise ReportError(f"row {n}: unknown row kind {kind!r}")
    return rep


def _column_key(label: str, position: int):
    """``clean`` first, then eps fractions ascending, then other labels in order."""
    if label == "clean":
        return (0, 0.0, position)
    try:
        return (1, float(Fraction(label)), position)
    except (ValueError, ZeroDivisionError):
        return (2, 0.0, position)


def _split(cond: str) -> tuple[str, str]:
    row, sep, col = cond.rpartition("@")
    return (row, col) if sep else (cond, "")


def render_table(rep: EvaluationReport) -> str:
    """Pivot aggregates into one block per metric: rows x columns.

    ``success`` cells print as ``k / n``; other cells are means with 4 digits.
    """
    cells: dict[str, dict[tuple[str, str], str]] = defaultdict(dict)
    rows_seen: dict[str, list[str]] = defaultdict(list)
    cols_seen: dict[str, list[str]] = defaultdict(list)
    counts: dict[tuple[str, str], list[float]] = defaultdict(list)
    for _, cond, metric, v in rep.samples:
        counts[(cond, metric)].append(v)
    for cond, metric, v in rep.aggregates():
        row, col = _split(cond)
        if metric == "success":
            vals = counts[(cond, metric)]
            text = f"{int(round(sum(vals)))} / {len(vals)}"
        else:
            text = f"{v:.4g}"
        cells[metric][(row, col)] = text
        if row not in rows_seen[metric]:
            rows_seen[metric].append(row)
        if col not in cols_seen[metric]:
            cols_seen[metric].append(col)
    out = [f"experiment {rep.experiment_id}  seed {rep.seed}  advlab {rep.version}"]
    for metric in cells:
        cols = sorted(cols_seen[metric], key=lambda c: _column_key(c, cols_seen[metric].index(c)))
        rows = rows_seen[metric]
        w0 = max(len(metric), *(len(r) for r in rows))
        widths = [max(len(c), *(len(cells[metric].get((r, c), "-")) for r in rows)) for c in cols]
        out.append("")
        out.append("  ".join([metric.ljust(w0), *(c.rjust(w) for c, w in zip(cols, widths))]))
        out.append("-" * (w0 + sum(w + 2 for w in widths)))
        for r in rows:
            out.append("  ".join([r.ljust(w0), *(cells[metric].get((r, c), "-").rjust(w)
                                                 for c, w in zip(cols, widths))]))
    if rep.derived:
        out.append("")
        w0 = max(len(c) for c, _, _ in rep.derived)
        for cond, metric, v in rep.derived:
            out.append(f"{cond.ljust(w0)}  {metric} = {_g(v) if not math.isnan(v) else 'n/a'}")
    return "\n".join(out) + "\n"


def render_report(rep: EvaluationReport, style: str = "csv") -> str:
    if style == "csv":
        return render_csv(rep)
    if style == "table":
        return render_table(rep)
    raise ReportError(f"unknown report style {style!r}")
