"""Static SVG charts rendered directly from CSV text.

Both chart builders are pure functions of the CSV strings the CLI has
already written: they re-parse the file content rather than touching any
model or dataset state, so a chart can always be regenerated from its
CSV alone.  Every plotted point/bar carries ``data-*`` attributes with
the verbatim CSV values for downstream inspection.
"""

from __future__ import annotations

from xml.sax.saxutils import escape, quoteattr

from .errors import DataFormatError

_WIDTH = 640
_HEIGHT = 400
_MARGIN_L = 64
_MARGIN_R = 160
_MARGIN_T = 40
_MARGIN_B = 48
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
            "#8c564b", "#e377c2", "#7f7f7f")


def _parse_csv(text: str) -> tuple[list[str], list[list[str]]]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataFormatError("empty CSV")
    header = lines[0].split(",")
    rows = []
    for i, ln in enumerate(lines[1:], start=2):
        cells = ln.split(",")
        if len(cells) != len(header):
            raise DataFormatError(
                f"CSV line {i} has {len(cells)} cells, header has {len(header)}"
            )
        rows.append(cells)
    return header, rows


def _axis_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / (n - 1)
    return [lo + step * i for i in range(n)]


class _Canvas:
    """Accumulates SVG elements over a fixed plot frame."""

    def __init__(self, title: str, x_label: str, y_label: str,
                 x_range: tuple[float, float], y_range: tuple[float, float]):
        self.parts: list[str] = []
        self.x_lo, self.x_hi = x_range
        self.y_lo, self.y_hi = y_range
        if self.x_hi <= self.x_lo:
            self.x_hi = self.x_lo + 1.0
        if self.y_hi <= self.y_lo:
            self.y_hi = self.y_lo + 1.0
        self.parts.append(
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" '
            f'height="{_HEIGHT}" viewBox="0 0 {_WIDTH} {_HEIGHT}" '
            f'font-family="sans-serif" font-size="12">'
        )
        self.parts.append(
            f'<rect x="0" y="0" width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>'
        )
        self.parts.append(
            f'<text x="{_WIDTH / 2:g}" y="20" text-anchor="middle" '
            f'font-size="15">{escape(title)}</text>'
        )
        self.parts.append(
            f'<text x="{(_MARGIN_L + _WIDTH - _MARGIN_R) / 2:g}" '
            f'y="{_HEIGHT - 10}" text-anchor="middle">{escape(x_label)}</text>'
        )
        mid_y = (_MARGIN_T + _HEIGHT - _MARGIN_B) / 2
        self.parts.append(
            f'<text x="16" y="{mid_y:g}" text-anchor="middle" '
            f'transform="rotate(-90 16 {mid_y:g})">{escape(y_label)}</text>'
        )
        # plot frame
        self.parts.append(
            f'<rect x="{_MARGIN_L}" y="{_MARGIN_T}" '
            f'width="{_WIDTH - _MARGIN_L - _MARGIN_R}" '
            f'height="{_HEIGHT - _MARGIN_T - _MARGIN_B}" fill="none" '
            f'stroke="#444" stroke-width="1"/>'
        )

    def px(self, x: float) -> float:
        span = _WIDTH - _MARGIN_L - _MARGIN_R
        return _MARGIN_L + (x - self.x_lo) / (self.x_hi - self.x_lo) * span

    def py(self, y: float) -> float:
        span = _HEIGHT - _MARGIN_T - _MARGIN_B
        return _HEIGHT - _MARGIN_B - (y - self.y_lo) / (self.y_hi - self.y_lo) * span

    def y_ticks(self):
        for v in _axis_ticks(self.y_lo, self.y_hi):
            y = self.py(v)
            self.parts.append(
                f'<line x1="{_MARGIN_L - 4}" y1="{y:.2f}" x2="{_MARGIN_L}" '
                f'y2="{y:.2f}" stroke="#444"/>'
            )
            self.parts.append(
                f'<text x="{_MARGIN_L - 8}" y="{y + 4:.2f}" '
                f'text-anchor="end">{v:.3g}</text>'
            )

    def x_tick(self, x: float, label: str):
        px = self.px(x)
        bottom = _HEIGHT - _MARGIN_B
        self.parts.append(
            f'<line x1="{px:.2f}" y1="{bottom}" x2="{px:.2f}" '
            f'y2="{bottom + 4}" stroke="#444"/>'
        )
        self.parts.append(
            f'<text x="{px:.2f}" y="{bottom + 18}" '
            f'text-anchor="middle">{escape(label)}</text>'
        )

    def legend(self, names: list[str]):
        x = _WIDTH - _MARGIN_R + 12
        for i, name in enumerate(names):
            y = _MARGIN_T + 16 + 18 * i
            color = _PALETTE[i % len(_PALETTE)]
            self.parts.append(
                f'<rect x="{x}" y="{y - 9}" width="12" height="12" '
                f'fill="{color}"/>'
            )
            self.parts.append(
                f'<text x="{x + 18}" y="{y + 2}">{escape(name)}</text>'
            )

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def sweep_chart_from_csv(text: str, title: str = "Test mean F1 vs noise fraction") -> str:
    """Line chart of mean F1 over noise fraction, one series per mode."""
    header, rows = _parse_csv(text)
    for col in ("fraction", "mode", "mean_f1"):
        if col not in header:
            raise DataFormatError(f"sweep CSV is missing column {col!r}")
    fi, mi, yi = header.index("fraction"), header.index("mode"), header.index("mean_f1")
    series: dict[str, list[tuple[str, str]]] = {}
    for cells in rows:
        series.setdefault(cells[mi], []).append((cells[fi], cells[yi]))
    if not series:
        raise DataFormatError("sweep CSV has no data rows")

    xs = [float(x) for pts in series.values() for x, _ in pts]
    canvas = _Canvas(title, "noise fraction", "test mean F1",
                     (min(xs), max(xs)), (0.0, 1.0))
    canvas.y_ticks()
    for x in sorted({float(v) for v in xs}):
        canvas.x_tick(x, f"{x:g}")
    for i, (mode, pts) in enumerate(sorted(series.items())):
        color = _PALETTE[i % len(_PALETTE)]
        pts_f = sorted(((float(x), float(y), x, y) for x, y, in pts))
        path = " ".join(f"{canvas.px(x):.2f},{canvas.py(y):.2f}"
                        for x, y, _, _ in pts_f)
        canvas.parts.append(
            f'<polyline points="{path}" fill="none" stroke="{color}" '
            f'stroke-width="2"/>'
        )
        for x, y, xs_raw, ys_raw in pts_f:
            canvas.parts.append(
                f'<circle cx="{canvas.px(x):.2f}" cy="{canvas.py(y):.2f}" r="3.5" '
                f'fill="{color}" data-series={quoteattr(mode)} '
                f'data-x={quoteattr(xs_raw)} data-y={quoteattr(ys_raw)}/>'
            )
    canvas.legend(sorted(series))
    return canvas.render()


def attention_chart_from_csv(text: str,
                             title: str = "Attention weight per time step") -> str:
    """Grouped bar chart of attention weights over time steps."""
    header, rows = _parse_csv(text)
    if header[:2] != ["t", "alpha_mean"]:
        raise DataFormatError(
            f"attention CSV must start with columns t,alpha_mean, got {header[:2]}"
        )
    value_cols = header[1:]
    if not rows:
        raise DataFormatError("attention CSV has no data rows")
    values = [[float(c) for c in cells[1:]] for cells in rows]
    peak = max(v for row in values for v in row)

    canvas = _Canvas(title, "time step", "mean attention weight",
                     (0.0, float(len(rows))), (0.0, peak * 1.15))
    canvas.y_ticks()
    n_series = len(value_cols)
    group_w = (_WIDTH - _MARGIN_L - _MARGIN_R) / len(rows)
    bar_w = group_w * 0.8 / n_series
    for r, cells in enumerate(rows):
        canvas.x_tick(r + 0.5, cells[0])
        x0 = canvas.px(r) + group_w * 0.1
        for s in range(n_series):
            color = _PALETTE[s % len(_PALETTE)]
            v = values[r][s]
            top = canvas.py(v)
            base = canvas.py(0.0)
            canvas.parts.append(
                f'<rect x="{x0 + s * bar_w:.2f}" y="{top:.2f}" '
                f'width="{bar_w:.2f}" height="{max(base - top, 0):.2f}" '
                f'fill="{color}" data-series={quoteattr(value_cols[s])} '
                f'data-t={quoteattr(cells[0])} data-value={quoteattr(cells[1 + s])}/>'
            )
    names = ["alpha_mean"] + [c.removeprefix("alpha_class_") for c in value_cols[1:]]
    canvas.legend(names)
    return canvas.render()
