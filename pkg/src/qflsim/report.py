"""Metrics files and chart emission.

Metrics are comma-separated rows (round, method, accuracy, loss, messages)
with full-precision floats so identical runs produce identical bytes.
Charts are self-contained SVG line plots written directly, with one series
per method, so reporting works with no plotting dependency.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import DataError

CSV_HEADER = "round,method,accuracy,loss,messages"

_PALETTE = (
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
    "#8c564b", "#17becf", "#e377c2",
)


@dataclass(frozen=True)
class MetricsRow:
    round_index: int
    method: str
    accuracy: float
    loss: float
    messages: int


def format_rows(rows) -> str:
    lines = [CSV_HEADER]
    for r in rows:
        lines.append(
            f"{r.round_index},{r.method},{r.accuracy!r},{r.loss!r},{r.messages}"
        )
    return "".join(line + "\n" for line in lines)


def parse_metrics(text: str, source="metrics") -> list[MetricsRow]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != CSV_HEADER:
        raise DataError(f"{source}: line 1: missing header {CSV_HEADER!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise DataError(f"{source}: line {lineno}: expected 5 fields")
        try:
            rows.append(
                MetricsRow(
                    round_index=int(parts[0]),
                    method=parts[1],
                    accuracy=float(parts[2]),
                    loss=float(parts[3]),
                    messages=int(parts[4]),
                )
            )
        except ValueError as err:
            raise DataError(f"{source}: line {lineno}: {err}") from err
    if not rows:
        raise DataError(f"{source}: no data rows")
    return rows


def summarize(rows) -> str:
    """Per-method final/best numbers, derived purely from the rows."""
    by_method: dict[str, list[MetricsRow]] = {}
    for row in rows:
        by_method.setdefault(row.method, []).append(row)
    lines = [
        f"{'method':<14} {'rounds':>6} {'final_acc':>10} {'best_acc':>9}"
        f" {'final_loss':>11} {'best_loss':>10}"
    ]
    for method in sorted(by_method):
        series = sorted(by_method[method], key=lambda r: r.round_index)
        final = series[-1]
        best_acc = max(r.accuracy for r in series)
        best_loss = min(r.loss for r in series)
        lines.append(
            f"{method:<14} {final.round_index:>6} {final.accuracy:>10.4f}"
            f" {best_acc:>9.4f} {final.loss:>11.4f} {best_loss:>10.4f}"
        )
    return "".join(line + "\n" for line in lines)


# ---------------------------------------------------------------------------
# SVG line charts
# ---------------------------------------------------------------------------

_W, _H = 640, 420
_ML, _MR, _MT, _MB = 64, 24, 36, 48


def _ticks(lo: float, hi: float, n: int = 5):
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / (n - 1)
    return [lo + step * k for k in range(n)]


def line_chart(series: dict[str, list[tuple[float, float]]], title: str, ylabel: str) -> str:
    """An SVG polyline chart: series name -> [(x, y), ...]."""
    points = [p for pts in series.values() for p in pts]
    if not points:
        raise DataError("nothing to plot")
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    pad = 0.05 * (y_hi - y_lo or 1.0)
    y_lo -= pad
    y_hi += pad
    plot_w = _W - _ML - _MR
    plot_h = _H - _MT - _MB

    def sx(x):
        return _ML + (x - x_lo) / (x_hi - x_lo) * plot_w

    def sy(y):
        return _MT + (1.0 - (y - y_lo) / (y_hi - y_lo)) * plot_h

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}"'
        f' viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2:.1f}" y="22" text-anchor="middle"'
        f' font-family="sans-serif" font-size="15">{title}</text>',
    ]
    for yt in _ticks(y_lo + pad, y_hi - pad):
        y = sy(yt)
        out.append(
            f'<line x1="{_ML}" y1="{y:.1f}" x2="{_W - _MR}" y2="{y:.1f}"'
            f' stroke="#dddddd" stroke-width="1"/>'
        )
        out.append(
            f'<text x="{_ML - 6}" y="{y + 4:.1f}" text-anchor="end"'
            f' font-family="sans-serif" font-size="11">{yt:.3f}</text>'
        )
    for xt in _ticks(x_lo, x_hi):
        x = sx(xt)
        out.append(
            f'<text x="{x:.1f}" y="{_H - _MB + 18}" text-anchor="middle"'
            f' font-family="sans-serif" font-size="11">{xt:.0f}</text>'
        )
    out.append(
        f'<rect x="{_ML}" y="{_MT}" width="{plot_w}" height="{plot_h}"'
        f' fill="none" stroke="#333333"/>'
    )
    out.append(
        f'<text x="{_W / 2:.1f}" y="{_H - 12}" text-anchor="middle"'
        f' font-family="sans-serif" font-size="12">round</text>'
    )
    out.append(
        f'<text x="18" y="{_H / 2:.1f}" text-anchor="middle"'
        f' font-family="sans-serif" font-size="12"'
        f' transform="rotate(-90 18 {_H / 2:.1f})">{ylabel}</text>'
    )
    for k, (name, pts) in enumerate(sorted(series.items())):
        color = _PALETTE[k % len(_PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in sorted(pts))
        out.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}"'
            f' stroke-width="1.8"/>'
        )
        ly = _MT + 16 + 16 * k
        out.append(
            f'<line x1="{_W - _MR - 120}" y1="{ly - 4}" x2="{_W - _MR - 96}"'
            f' y2="{ly - 4}" stroke="{color}" stroke-width="2.5"/>'
        )
        out.append(
            f'<text x="{_W - _MR - 90}" y="{ly}" font-family="sans-serif"'
            f' font-size="11">{name}</text>'
        )
    out.append("</svg>")
    return "".join(line + "\n" for line in out)


def write_charts(rows, out_dir) -> list[Path]:
    """accuracy.svg and loss.svg for the given metrics rows."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    acc_series: dict[str, list[tuple[float, float]]] = {}
    loss_series: dict[str, list[tuple[float, float]]] = {}
    for row in rows:
        acc_series.setdefault(row.method, []).append(
            (row.round_index, row.accuracy)
        )
        loss_series.setdefault(row.method, []).append((row.round_index, row.loss))
    paths = []
    for name, series, ylabel in (
        ("accuracy", acc_series, "test accuracy"),
        ("loss", loss_series, "test loss"),
    ):
        path = out_dir / f"{name}.svg"
        path.write_text(line_chart(series, f"{ylabel} per round", ylabel))
        paths.append(path)
    return paths
