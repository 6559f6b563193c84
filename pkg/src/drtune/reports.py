"""Run artefacts: per-iteration CSV, summary table, SVG line plots, plain PGM dumps."""

from __future__ import annotations

import csv
import math
import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DrtuneError, ShapeError
from .tuning import RunLog

METRICS_HEADER = ("iter", "reward", "grad_norm", "wall_ms")
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


class ReportError(DrtuneError, OSError):
    """Could not write a report file."""


def _open(path: Path, mode: str = "w"):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return open(path, mode, newline="", encoding="ascii")
    except OSError as exc:
        raise ReportError("cannot write report", path=str(path), reason=exc.strerror) from exc


def _num(x: float) -> str:
    return repr(float(x))


def write_metrics(log: RunLog, path, timing: bool = True) -> Path:
    """One row per optimizer step. With ``timing=False`` the wall_ms column is left empty."""
    path = Path(path)
    if not log.records:
        raise DrtuneError("refusing to write metrics for an empty run", path=str(path))
    with _open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in log.records:
            w.writerow((r.iter, _num(r.reward), _num(r.grad_norm), f"{r.wall_ms:.3f}" if timing else ""))
    return path


def read_metrics(path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="ascii") as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    for col in METRICS_HEADER:
        out[col] = np.array([float(r[col]) if r[col] else math.nan for r in rows])
    return out


def write_summary(rows: Sequence[Mapping[str, object]], path) -> Path:
    """Generic results table; column order follows the first row."""
    path = Path(path)
    if not rows:
        raise DrtuneError("summary needs at least one row", path=str(path))
    cols = list(rows[0])
    with _open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow(_num(row[c]) if isinstance(row[c], float) else row[c] for c in cols)
    return path


# ---------------------------------------------------------------- SVG


def line_plot_svg(
    series: Mapping[str, tuple[Sequence[float], Sequence[float]]],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    width: int = 640,
    height: int = 400,
    log_y: bool = False,
) -> str:
    """Minimal SVG line chart: axes box, one <polyline> per series, a legend."""
    if not series:
        raise DrtuneError("line plot needs at least one series")
    margin = dict(left=70, right=150, top=36, bottom=48)
    pw = width - margin["left"] - margin["right"]
    ph = height - margin["top"] - margin["bottom"]

    def ty(v):
        return math.log10(max(v, 1e-300)) if log_y else v

    xs_all = [float(x) for xs, _ in series.values() for x in xs]
    ys_all = [ty(float(y)) for _, ys in series.values() for y in ys if math.isfinite(y)]
    if not xs_all or not ys_all:
        raise DrtuneError("line plot series are empty")
    x0, x1 = min(xs_all), max(xs_all)
    y0, y1 = min(ys_all), max(ys_all)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def px(x):
        return margin["left"] + (x - x0) / (x1 - x0) * pw

    def py(y):
        return margin["top"] + (1.0 - (ty(y) - y0) / (y1 - y0)) * ph

    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(width), height=str(height),
                     viewBox=f"0 0 {width} {height}")
    ET.SubElement(svg, "rect", x=str(margin["left"]), y=str(margin["top"]), width=str(pw), height=str(ph),
                  fill="none", stroke="#444")
    font = {"font-family": "sans-serif", "font-size": "12"}
    if title:
        ET.SubElement(svg, "text", x=str(width / 2), y="20", attrib={"text-anchor": "middle", **font}).text = title
    ET.SubElement(svg, "text", x=str(margin["left"] + pw / 2), y=str(height - 10),
                  attrib={"text-anchor": "middle", **font}).text = xlabel
    ET.SubElement(svg, "text", x="14", y=str(margin["top"] + ph / 2),
                  attrib={"text-anchor": "middle", "transform": f"rotate(-90 14 {margin['top'] + ph / 2})", **font}
                  ).text = ylabel + (" (log10)" if log_y else "")
    for val, anchor_y in ((y0, margin["top"] + ph), (y1, margin["top"])):
        ET.SubElement(svg, "text", x=str(margin["left"] - 6), y=f"{anchor_y + 4:.1f}",
                      attrib={"text-anchor": "end", **font}).text = f"{val:.3g}"
    for val, anchor_x in ((x0, margin["left"]), (x1, margin["left"] + pw)):
        ET.SubElement(svg, "text", x=f"{anchor_x:.1f}", y=str(margin["top"] + ph + 16),
                      attrib={"text-anchor": "middle", **font}).text = f"{val:.3g}"

    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(float(x)):.2f},{py(float(y)):.2f}" for x, y in zip(xs, ys) if math.isfinite(y))
        ET.SubElement(svg, "polyline", points=pts, fill="none", stroke=color, attrib={"stroke-width": "1.5",
                      "data-series": name})
        ly = margin["top"] + 14 + 18 * i
        lx = margin["left"] + pw + 12
        ET.SubElement(svg, "line", x1=str(lx), y1=str(ly - 4), x2=str(lx + 18), y2=str(ly - 4), stroke=color,
                      attrib={"stroke-width": "2"})
        ET.SubElement(svg, "text", x=str(lx + 24), y=str(ly), attrib=font).text = name
    return ET.tostring(svg, encoding="unicode")


def write_svg(path, series, **kw) -> Path:
    path = Path(path)
    text = line_plot_svg(series, **kw)
    with _open(path) as fh:
        fh.write('<?xml version="1.0" encoding="UTF-8"?>\n')
        fh.write(text)
        fh.write("\n")
    return path


# ---------------------------------------------------------------- PGM


def quantize(values: np.ndarray) -> np.ndarray:
    """[-1, 1] -> 0..255 via round((v + 1) / 2 * 255); out-of-range values are clipped first."""
    v = np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0)
    return np.rint((v + 1.0) / 2.0 * 255.0).astype(np.int64)


def dequantize(pixels: np.ndarray) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float64) / 255.0 * 2.0 - 1.0


def tile(images: np.ndarray, cols: int = 8, pad: float = -1.0) -> np.ndarray:
    """Arrange an (n, h, w) batch on a grid with a one-pixel gutter."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        return images
    if images.ndim != 3:
        raise ShapeError("tile expects (n, h, w)", shape=images.shape)
    n, h, w = images.shape
    cols = max(1, min(cols, n))
    rows = -(-n // cols)
    grid = np.full((rows * (h + 1) - 1, cols * (w + 1) - 1), pad)
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        grid[r * (h + 1): r * (h + 1) + h, c * (w + 1): c * (w + 1) + w] = img
    return grid


def write_pgm(path, image: np.ndarray) -> Path:
    """Plain ("P2") greyscale, maxval 255."""
    path = Path(path)
    pix = quantize(image)
    if pix.ndim != 2:
        raise ShapeError("PGM needs a single 2-D image; use tile() for batches", shape=pix.shape)
    h, w = pix.shape
    with _open(path) as fh:
        fh.write(f"P2\n{w} {h}\n255\n")
        for row in pix:
            fh.write(" ".join(str(int(v)) for v in row))
            fh.write("\n")
    return path


def read_pgm(path) -> np.ndarray:
    tokens = []
    with open(path, encoding="ascii") as fh:
        for line in fh:
            tokens.extend(line.split("#", 1)[0].split())
    if not tokens or tokens[0] != "P2":
        raise DrtuneError("not a plain PGM file", path=str(path))
    w, h, maxval = (int(t) for t in tokens[1:4])
    data = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    if data.size != w * h or maxval != 255:
        raise DrtuneError("malformed PGM", path=str(path), expected=w * h, got=data.size)
    return data.reshape(h, w)


# ---------------------------------------------------------------- bundles


def emit_run_reports(logs: Mapping[str, RunLog], outdir, timing: bool = True) -> list[Path]:
    """metrics.csv per run (in <outdir>/<name>/), plus reward and grad-norm plots across runs."""
    outdir = Path(outdir)
    if not logs:
        raise DrtuneError("emit_run_reports needs at least one run log")
    written = []
    single = len(logs) == 1
    for name, log in logs.items():
        target = outdir / "metrics.csv" if single else outdir / name / "metrics.csv"
        written.append(write_metrics(log, target, timing=timing))
    iters = {n: [r.iter for r in lg.records] for n, lg in logs.items()}
    written.append(write_svg(outdir / "reward.svg", {n: (iters[n], lg.rewards) for n, lg in logs.items()},
                             title="reward vs iteration", xlabel="iteration", ylabel="reward"))
    written.append(write_svg(outdir / "grad_norm.svg", {n: (iters[n], lg.grad_norms) for n, lg in logs.items()},
                             title="gradient norm vs iteration", xlabel="iteration", ylabel="grad norm", log_y=True))
    return written
