"""Result files: results.csv, results.json and chart.svg."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable
from xml.sax.saxutils import escape

from statebench.bench import BenchmarkReport

CSV_COLUMNS = [
    "backend", "workload", "value_size", "clients", "block_size", "duration_s",
    "submitted", "committed", "invalid", "tps", "lat_p50_ms", "lat_p95_ms",
    "lat_p99_ms", "bytes_written", "sync_writes",
]


def csv_row(r: BenchmarkReport) -> dict:
    w = r.workload
    return {
        "backend": r.backend,
        "workload": w.kind.value,
        "value_size": w.value_size,
        "clients": w.clients,
        "block_size": w.block_size,
        "duration_s": round(r.elapsed_s, 3),
        "submitted": r.submitted,
        "committed": r.committed,
        "invalid": r.invalid,
        "tps": round(r.tps, 1),
        "lat_p50_ms": round(r.latency_p50, 1),
        "lat_p95_ms": round(r.latency_p95, 1),
        "lat_p99_ms": round(r.latency_p99, 1),
        "bytes_written": r.bytes_written,
        "sync_writes": "true" if w.sync_writes else "false",
    }


def _fmt(column: str, value) -> str:
    if column in ("tps", "lat_p50_ms", "lat_p95_ms", "lat_p99_ms"):
        return f"{value:.1f}"
    if column == "duration_s":
        return f"{value:.3f}"
    return str(value)


def write_csv(reports: Iterable[BenchmarkReport], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in reports:
            row = csv_row(r)
            writer.writerow([_fmt(c, row[c]) for c in CSV_COLUMNS])


def read_csv(path) -> list[dict]:
    """Rows with numeric columns converted back to numbers."""
    ints = {"value_size", "clients", "block_size", "submitted", "committed", "invalid", "bytes_written"}
    floats = {"duration_s", "tps", "lat_p50_ms", "lat_p95_ms", "lat_p99_ms"}
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            for k in ints:
                row[k] = int(row[k])
            for k in floats:
                row[k] = float(row[k])
            out.append(row)
    return out


def write_json(reports: Iterable[BenchmarkReport], path) -> None:
    rows = []
    for r in reports:
        row = csv_row(r)
        row["aborted"] = r.aborted
        row["blocks"] = r.blocks
        row["error"] = r.error
        row["workload_spec"] = r.to_dict()["workload"]
        row["environment"] = r.environment
        rows.append(row)
    Path(path).write_text(json.dumps({"columns": CSV_COLUMNS, "reports": rows}, indent=2) + "\n")


def _nice_ceiling(x: float) -> float:
    if x <= 0:
        return 1.0
    mag = 10 ** (len(str(int(x))) - 1)
    for step in (1, 2, 2.5, 5, 10):
        if step * mag >= x:
            return step * mag
    return 10 * mag


def render_svg(reports: list[BenchmarkReport], title: str = "Committed transactions per second") -> str:
    """Grouped bar chart: one group per value size, one bar per series."""
    workloads = {r.workload.kind for r in reports}

    def series_of(r: BenchmarkReport) -> str:
        return r.backend if len(workloads) == 1 else f"{r.backend}/{r.workload.kind.value}"

    sizes = sorted({r.workload.value_size for r in reports})
    series: list[str] = []
    for r in reports:
        s = series_of(r)
        if s not in series:
            series.append(s)
    tps = {(series_of(r), r.workload.value_size): r.tps for r in reports}

    palette = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7"]
    bar_w, gap = 18, 24
    group_w = bar_w * max(1, len(series)) + gap
    left, top, plot_h = 70, 40, 260
    width = left + group_w * max(1, len(sizes)) + 160
    height = top + plot_h + 60
    ymax = _nice_ceiling(max(tps.values(), default=0.0))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<text x="{left}" y="20" font-size="14">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{width - 150}" y2="{top + plot_h}" stroke="#333"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="#333"/>',
    ]
    for i in range(5):
        v = ymax * i / 4
        y = top + plot_h - plot_h * i / 4
        out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end">{v:g}</text>')
        out.append(f'<line x1="{left}" y1="{y:.1f}" x2="{width - 150}" y2="{y:.1f}" stroke="#ddd"/>')
    for gi, size in enumerate(sizes):
        gx = left + gap / 2 + gi * group_w
        out.append(f'<g class="group" data-value-size="{size}">')
        for si, s in enumerate(series):
            value = tps.get((s, size))
            if value is None:
                continue
            h = plot_h * value / ymax
            x = gx + si * bar_w
            out.append(
                f'<rect x="{x:.1f}" y="{top + plot_h - h:.1f}" width="{bar_w - 2}" height="{h:.1f}" '
                f'fill="{palette[si % len(palette)]}"><title>{escape(s)} {size} B: {value:.1f} tps</title></rect>'
            )
        label_x = gx + (bar_w * len(series)) / 2
        out.append(f'<text x="{label_x:.1f}" y="{top + plot_h + 16}" text-anchor="middle">{size}</text>')
        out.append("</g>")
    out.append(f'<text x="{left + (width - left - 150) / 2:.1f}" y="{height - 12}" text-anchor="middle">value size (bytes)</text>')
    for si, s in enumerate(series):
        y = top + si * 18
        out.append(f'<rect x="{width - 140}" y="{y}" width="12" height="12" fill="{palette[si % len(palette)]}"/>')
        out.append(f'<text x="{width - 122}" y="{y + 10}">{escape(s)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_outputs(reports: list[BenchmarkReport], output_dir) -> dict[str, Path]:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "results.csv", "json": out / "results.json", "svg": out / "chart.svg"}
    write_csv(reports, paths["csv"])
    write_json(reports, paths["json"])
    paths["svg"].write_text(render_svg(reports))
    return paths
