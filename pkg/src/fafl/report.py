"""Sweep summaries: fixed-schema CSV tables and accuracy-vs-round SVG panels.

CSV columns, in order::

    mechanism, alpha, max_labels, seed, final_accuracy, mean_last10_accuracy,
    total_bytes, total_latency_ms, crypto_time_ms

``mechanism`` is the scheme token used on the command line (``fedavg``,
``reputation@1`` for one adversary, ...).  Floats are written with 6
significant digits, lines end in CRLF and rows are sorted by
(mechanism, alpha, seed).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .engine import MetricSeries, SweepResult, parse_scheme, scheme_label
from .errors import ReportError

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "mechanism", "alpha", "max_labels", "seed", "final_accuracy", "mean_last10_accuracy",
    "total_bytes", "total_latency_ms", "crypto_time_ms",
)


class Cell(NamedTuple):
    scheme: str
    alpha: float
    max_labels: int
    seed: int
    series: MetricSeries


@dataclass(frozen=True)
class SweepRow:
    mechanism: str
    alpha: float
    max_labels: int
    seed: int
    final_accuracy: float
    mean_last10_accuracy: float
    total_bytes: int
    total_latency_ms: float
    crypto_time_ms: float

    def sort_key(self):
        return self.mechanism, self.alpha, self.seed


@dataclass
class SweepReport:
    rows: list[SweepRow]

    def __len__(self) -> int:
        return len(self.rows)


def cells_from_sweep(result: SweepResult) -> list[Cell]:
    out = []
    for (scheme, alpha, seed), series in result.cells.items():
        cfg = result.configs[(scheme, alpha, seed)]
        out.append(Cell(scheme, alpha, cfg.partition.max_labels, seed, series))
    return out


def load_cells(in_dir: str | Path) -> list[Cell]:
    """Every readable cell file in a sweep cache directory (unreadable ones are skipped)."""
    d = Path(in_dir)
    if not d.is_dir():
        raise ReportError(f"not a directory: {d}")
    cells = []
    for path in sorted(d.glob("*.json")):
        try:
            blob = json.loads(path.read_text(encoding="utf-8"))
            cfg = blob["config"]
            cells.append(Cell(
                blob["scheme"], float(cfg["partition"]["alpha"]),
                int(cfg["partition"]["max_labels"]), int(cfg["seed"]),
                MetricSeries.from_dict(blob["series"]),
            ))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            log.warning("skipping unreadable cell %s (%s)", path.name, exc)
    return cells


def build_report(cells: Iterable[Cell]) -> SweepReport:
    rows = [
        SweepRow(
            c.scheme, c.alpha, c.max_labels, c.seed, c.series.final_accuracy,
            c.series.mean_last_accuracy(10), c.series.total_bytes, c.series.total_latency_ms,
            c.series.crypto_time_ms,
        )
        for c in cells
    ]
    rows.sort(key=SweepRow.sort_key)
    return SweepReport(rows)


def _g6(x: float) -> str:
    return f"{x:.6g}"


def format_csv(report: SweepReport) -> str:
    if not report.rows:
        raise ReportError("empty report")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(CSV_COLUMNS)
    for r in sorted(report.rows, key=SweepRow.sort_key):
        w.writerow([
            r.mechanism, _g6(r.alpha), r.max_labels, r.seed, _g6(r.final_accuracy),
            _g6(r.mean_last10_accuracy), r.total_bytes, _g6(r.total_latency_ms),
            _g6(r.crypto_time_ms),
        ])
    return buf.getvalue()


def emit_csv(report: SweepReport, path: str | Path) -> Path:
    p = Path(path)
    with open(p, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_csv(report))
    return p


def read_csv(path: str | Path) -> SweepReport:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CSV_COLUMNS:
            raise ReportError(f"unexpected CSV header {header}")
        rows = []
        for rec in reader:
            m, a, ml, s, fa, la, tb, tl, ct = rec
            rows.append(SweepRow(m, float(a), int(ml), int(s), float(fa), float(la), int(tb),
                                 float(tl), float(ct)))
    return SweepReport(rows)


# ---------------------------------------------------------------------------
# SVG panels
# ---------------------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
           "#7f7f7f", "#bcbd22", "#17becf")
PANEL_W, PANEL_H = 320, 240
MARGIN = dict(left=52, right=12, top=30, bottom=40)
LEGEND_H = 24


def _legend_label(scheme: str) -> str:
    mech, adv = parse_scheme(scheme)
    return scheme_label(mech, adv)


def _scheme_order(scheme: str) -> tuple:
    mech, adv = parse_scheme(scheme)
    fixed = ["fedavg", "ltf", "reputation"]
    rank = fixed.index(mech) if mech in fixed else len(fixed)
    return rank, mech, adv


def mean_curves(cells: Sequence[Cell]) -> dict[float, dict[str, tuple[np.ndarray, np.ndarray]]]:
    """alpha -> scheme -> (rounds, accuracy averaged over seeds at rounds every seed reports)."""
    grouped: dict[float, dict[str, list[MetricSeries]]] = {}
    for c in cells:
        grouped.setdefault(c.alpha, {}).setdefault(c.scheme, []).append(c.series)
    out = {}
    for alpha, by_scheme in grouped.items():
        out[alpha] = {}
        for scheme, series in by_scheme.items():
            tables = [dict(s.accuracies()) for s in series]
            rounds = sorted(set.intersection(*(set(t) for t in tables)))
            acc = np.array([np.mean([t[r] for t in tables]) for r in rounds])
            out[alpha][scheme] = (np.asarray(rounds) + 1, acc)
    return out


def render_panels(cells: Sequence[Cell]) -> str:
    cells = list(cells)
    if not cells:
        raise ReportError("no series to plot")
    curves = mean_curves(cells)
    alphas = sorted(curves)
    schemes = sorted({c.scheme for c in cells}, key=_scheme_order)
    colors = {s: PALETTE[i % len(PALETTE)] for i, s in enumerate(schemes)}
    width = PANEL_W * len(alphas)
    height = PANEL_H + LEGEND_H * ((len(schemes) + 3) // 4) + 8

    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(width),
                     height=str(height), viewBox=f"0 0 {width} {height}")
    ET.SubElement(svg, "rect", width=str(width), height=str(height), fill="white")
    pw = PANEL_W - MARGIN["left"] - MARGIN["right"]
    ph = PANEL_H - MARGIN["top"] - MARGIN["bottom"]

    for i, alpha in enumerate(alphas):
        g = ET.SubElement(svg, "g", {"class": "panel", "data-alpha": _g6(alpha)},
                          transform=f"translate({i * PANEL_W},0)")
        x0, y0 = MARGIN["left"], MARGIN["top"]
        title = ET.SubElement(g, "text", x=str(x0 + pw / 2), y="18", fill="black")
        title.set("text-anchor", "middle")
        title.set("font-size", "13")
        title.text = f"alpha = {_g6(alpha)}"
        ET.SubElement(g, "rect", x=str(x0), y=str(y0), width=str(pw), height=str(ph),
                      fill="none", stroke="black")
        max_round = max(int(r[-1]) for r, _ in curves[alpha].values() if len(r)) \
            if any(len(r) for r, _ in curves[alpha].values()) else 1
        max_round = max(max_round, 1)

        def sx(r):
            return x0 + pw * (r / max_round)

        def sy(a):
            return y0 + ph * (1.0 - a)

        for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
            ty = sy(tick)
            ET.SubElement(g, "line", x1=str(x0 - 4), y1=f"{ty:.2f}", x2=str(x0), y2=f"{ty:.2f}",
                          stroke="black")
            lab = ET.SubElement(g, "text", x=str(x0 - 6), y=f"{ty + 4:.2f}", fill="black")
            lab.set("text-anchor", "end")
            lab.set("font-size", "10")
            lab.text = f"{tick:.2f}"
        for tick in np.linspace(0, max_round, 5):
            tx = sx(tick)
            ET.SubElement(g, "line", x1=f"{tx:.2f}", y1=str(y0 + ph), x2=f"{tx:.2f}",
                          y2=str(y0 + ph + 4), stroke="black")
            lab = ET.SubElement(g, "text", x=f"{tx:.2f}", y=str(y0 + ph + 16), fill="black")
            lab.set("text-anchor", "middle")
            lab.set("font-size", "10")
            lab.text = str(int(round(tick)))
        xl = ET.SubElement(g, "text", x=str(x0 + pw / 2), y=str(PANEL_H - 6), fill="black")
        xl.set("text-anchor", "middle")
        xl.set("font-size", "11")
        xl.text = "round"
        if i == 0:
            yl = ET.SubElement(g, "text", x="12", y=str(y0 + ph / 2), fill="black",
                               transform=f"rotate(-90 12 {y0 + ph / 2})")
            yl.set("text-anchor", "middle")
            yl.set("font-size", "11")
            yl.text = "top-1 accuracy"

        for scheme in schemes:
            if scheme not in curves[alpha]:
                continue
            rounds, acc = curves[alpha][scheme]
            if len(rounds) == 0:
                continue
            pts = " ".join(f"{sx(r):.2f},{sy(a):.2f}" for r, a in zip(rounds, acc))
            line = ET.SubElement(g, "polyline", points=pts, fill="none", stroke=colors[scheme])
            line.set("stroke-width", "1.5")
            line.set("data-scheme", scheme)

    legend = ET.SubElement(svg, "g", {"class": "legend"})
    for j, scheme in enumerate(schemes):
        lx = 12 + (j % 4) * (width - 24) / 4
        ly = PANEL_H + 8 + LEGEND_H * (j // 4)
        ET.SubElement(legend, "line", x1=f"{lx:.2f}", y1=str(ly), x2=f"{lx + 20:.2f}",
                      y2=str(ly), stroke=colors[scheme]).set("stroke-width", "2")
        t = ET.SubElement(legend, "text", x=f"{lx + 26:.2f}", y=str(ly + 4), fill="black")
        t.set("font-size", "11")
        t.text = _legend_label(scheme)

    ET.indent(svg)
    return ET.tostring(svg, encoding="unicode", xml_declaration=False) + "\n"


def emit_panels(cells: Sequence[Cell], path: str | Path) -> Path:
    text = '<?xml version="1.0" encoding="UTF-8"?>\n' + render_panels(cells)
    p = Path(path)
    p.write_text(text, encoding="utf-8")
    return p


def summarize(report: SweepReport) -> list[tuple[str, float, float, int]]:
    """(mechanism, alpha, mean final accuracy, seeds) per sweep group."""
    groups: dict[tuple[str, float], list[float]] = {}
    for r in report.rows:
        groups.setdefault((r.mechanism, r.alpha), []).append(r.final_accuracy)
    return [(m, a, float(np.mean(v)), len(v)) for (m, a), v in sorted(groups.items())]


def format_summary(report: SweepReport) -> str:
    lines = [f"{'scheme':<16} {'alpha':>6} {'final acc':>10} {'seeds':>5}"]
    for m, a, acc, n in summarize(report):
        acc_s = "nan" if math.isnan(acc) else f"{acc:.4f}"
        lines.append(f"{_legend_label(m):<16} {a:>6.3g} {acc_s:>10} {n:>5}")
    return "\n".join(lines)
