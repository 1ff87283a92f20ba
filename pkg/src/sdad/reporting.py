"""Per-subgroup report rendering: aligned text, JSON, and CSV.

A report is one value per subgroup, optionally next to a baseline column
with deltas.  Rows always follow taxonomy enumeration order.  Text output
formats numbers to four decimals with trailing zeros trimmed; CSV and JSON
keep full float precision so values survive a parse round-trip exactly.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Union

from .errors import MissingSubgroup, SchemaError
from .manifest import (
    DatasetManifest,
    Subgroup,
    SubgroupTaxonomy,
    enumerate_subgroups,
)

FORMAT_TEXT = "text"
FORMAT_JSON = "json"
FORMAT_CSV = "csv"
_FORMATS = (FORMAT_TEXT, FORMAT_JSON, FORMAT_CSV)

ValueMap = Mapping[Union[Subgroup, str], float]


def _by_phrase(values: ValueMap) -> dict[str, float]:
    out = {}
    for key, v in values.items():
        phrase = key.phrase if isinstance(key, Subgroup) else str(key)
        out[phrase] = float(v)
    return out


def _fmt(v: float) -> str:
    s = f"{v:.4f}".rstrip("0").rstrip(".")
    return s if s not in ("", "-0") else "0"


@dataclass(frozen=True)
class SubgroupReport:
    """Aligned per-subgroup values, with an optional baseline column."""

    metric: str
    taxonomy: SubgroupTaxonomy
    values: Mapping[str, float]
    baseline: Optional[Mapping[str, float]] = None
    overall: Optional[float] = None
    overall_label: str = "mean"

    def __post_init__(self):
        phrases = [z.phrase for z in enumerate_subgroups(self.taxonomy)]
        values = _by_phrase(self.values)
        missing = [p for p in phrases if p not in values]
        if missing:
            raise MissingSubgroup(f"no value for subgroup {missing[0]!r}")
        object.__setattr__(self, "values", {p: values[p] for p in phrases})
        if self.baseline is not None:
            base = _by_phrase(self.baseline)
            missing = [p for p in phrases if p not in base]
            if missing:
                raise MissingSubgroup(f"no baseline for subgroup {missing[0]!r}")
            object.__setattr__(self, "baseline", {p: base[p] for p in phrases})

    def rows(self) -> list[dict]:
        out = []
        for phrase, value in self.values.items():
            row: dict[str, object] = {"subgroup": phrase, "value": value}
            if self.baseline is not None:
                base = self.baseline[phrase]
                row["baseline"] = base
                row["delta"] = value - base
            out.append(row)
        return out


def render_report(report: SubgroupReport, fmt: str = FORMAT_TEXT) -> bytes:
    if fmt == FORMAT_TEXT:
        return _render_text(report)
    if fmt == FORMAT_JSON:
        return _render_json(report)
    if fmt == FORMAT_CSV:
        return _render_csv(report)
    raise SchemaError("format", f"unknown format {fmt!r}, expected {_FORMATS}")


def render_subgroup_report(
    values: ValueMap,
    taxonomy: SubgroupTaxonomy,
    baseline: Optional[ValueMap] = None,
    fmt: str = FORMAT_TEXT,
    metric: str = "value",
    overall: Optional[float] = None,
    overall_label: str = "mean",
) -> bytes:
    report = SubgroupReport(
        metric=metric,
        taxonomy=taxonomy,
        values=_by_phrase(values),
        baseline=_by_phrase(baseline) if baseline is not None else None,
        overall=overall,
        overall_label=overall_label,
    )
    return render_report(report, fmt)


def _render_text(report: SubgroupReport) -> bytes:
    has_base = report.baseline is not None
    header = ["subgroup", report.metric] + (["baseline", "delta"] if has_base else [])
    table = [header]
    for row in report.rows():
        line = [row["subgroup"], _fmt(row["value"])]
        if has_base:
            line += [_fmt(row["baseline"]), _fmt(row["delta"])]
        table.append(line)
    if report.overall is not None:
        line = [f"overall ({report.overall_label})", _fmt(report.overall)]
        if has_base:
            line += ["", ""]
        table.append(line)
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = []
    for i, r in enumerate(table):
        cells = [r[0].ljust(widths[0])] + [
            c.rjust(w) for c, w in zip(r[1:], widths[1:])
        ]
        lines.append("  ".join(cells).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return ("\n".join(lines) + "\n").encode("utf-8")


def _render_json(report: SubgroupReport) -> bytes:
    doc: dict[str, object] = {"metric": report.metric, "rows": report.rows()}
    if report.overall is not None:
        doc["overall"] = report.overall
        doc["overall_label"] = report.overall_label
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode(
        "utf-8"
    )


def _render_csv(report: SubgroupReport) -> bytes:
    has_base = report.baseline is not None
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["subgroup", "value"] + (["baseline", "delta"] if has_base else [])
    )
    for row in report.rows():
        line = [row["subgroup"], repr(row["value"])]
        if has_base:
            line += [repr(row["baseline"]), repr(row["delta"])]
        writer.writerow(line)
    return buf.getvalue().encode("utf-8")


def parse_report_csv(data: bytes) -> list[dict]:
    """Inverse of the CSV rendering; numeric fields come back as floats."""
    rows = []
    reader = csv.DictReader(io.StringIO(data.decode("utf-8")))
    for raw in reader:
        row: dict[str, object] = {"subgroup": raw["subgroup"]}
        for key in ("value", "baseline", "delta"):
            if key in raw and raw[key] not in (None, ""):
                row[key] = float(raw[key])
        rows.append(row)
    return rows


def load_report_values(path) -> tuple[str, Optional[SubgroupTaxonomy], dict[str, float]]:
    """Read a report input file: {"metric", "values": {phrase: number},
    optional "taxonomy"} (taxonomy in the manifest header layout)."""
    from .manifest import taxonomy_from_json

    obj = json.loads(Path(path).read_text("utf-8"))
    if not isinstance(obj, dict) or "values" not in obj:
        raise SchemaError("values", "report input needs a values object")
    values = obj["values"]
    if not isinstance(values, dict):
        raise SchemaError("values", "must be an object of phrase: number")
    parsed = {}
    for phrase, v in values.items():
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise SchemaError("values", f"value for {phrase!r} is not a number")
        parsed[str(phrase)] = float(v)
    metric = obj.get("metric", "value")
    taxonomy = None
    if "taxonomy" in obj:
        taxonomy = taxonomy_from_json(obj["taxonomy"])
    return str(metric), taxonomy, parsed


def distribution_report(
    m: DatasetManifest, counts: Mapping[Subgroup, int]
) -> SubgroupReport:
    total = sum(counts.values())
    fractions = {
        z.phrase: (counts.get(z, 0) / total if total else 0.0)
        for z in enumerate_subgroups(m.taxonomy)
    }
    return SubgroupReport(
        metric="fraction", taxonomy=m.taxonomy, values=fractions
    )
