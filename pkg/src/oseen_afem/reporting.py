"""CSV and SVG artifacts of adaptive runs."""

import csv
import math
from pathlib import Path

import numpy as np

from .mesh import Mesh

CSV_HEADER = ("iter,nv,ne,ndof,eta_y,eta_p,eta_w,eta_q,eta_u,upsilon,"
              "err_y,err_p,err_w,err_q,err_u,err_total,effectivity,wall_ms")
CSV_FIELDS = tuple(CSV_HEADER.split(","))
INDICATOR_HEADER = ("K", "eta_y", "eta_p", "eta_w", "eta_q", "eta_u")


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def csv_row(record) -> list:
    return [_cell(record.csv_values()[name]) for name in CSV_FIELDS]


def write_csv_header(path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(CSV_HEADER + "\n")


def append_csv_row(path, record) -> None:
    with open(path, "a", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(csv_row(record))


def emit_csv(history, path) -> Path:
    """Write one row per record (header only for an empty history)."""
    path = Path(path)
    write_csv_header(path)
    for record in history:
        append_csv_row(path, record)
    return path


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def emit_indicator_csv(field, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(INDICATOR_HEADER)
        cols = (field.eta_y, field.eta_p, field.eta_w, field.eta_q, field.eta_u)
        for k, row in enumerate(zip(*cols)):
            writer.writerow([k] + [repr(float(v)) for v in row])
    return path


def _shade(values: np.ndarray) -> list:
    """Map log10 of positive values to grey levels (dark = large)."""
    logs = np.log10(np.maximum(values, np.finfo(float).tiny))
    positive = values > 0
    if not positive.any():
        return ["#ffffff"] * len(values)
    lo = logs[positive].min()
    hi = logs[positive].max()
    span = hi - lo if hi > lo else 1.0
    level = np.where(positive, (logs - lo) / span, 0.0)
    grey = np.round(255 * (1.0 - 0.85 * level)).astype(int)
    return [f"#{g:02x}{g:02x}{g:02x}" for g in grey]


def svg_text(mesh: Mesh, indicators=None, stroke_scale: float = 0.002) -> str:
    lo, hi = (np.asarray(b, dtype=float).tolist() for b in mesh.bounding_box())
    width, height = hi[0] - lo[0], hi[1] - lo[1]
    stroke = stroke_scale * max(width, height)
    fills = _shade(np.asarray(indicators, dtype=float)) if indicators is not None else None
    # flip the vertical axis so that x2 points up
    pts = mesh.vertices.copy()
    pts[:, 1] = lo[1] + hi[1] - pts[:, 1]
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{lo[0]!r} {lo[1]!r} {width!r} {height!r}">',
    ]
    for k, tri in enumerate(mesh.triangles):
        coords = " ".join(f"{x!r},{y!r}" for x, y in pts[tri].tolist())
        fill = fills[k] if fills is not None else "none"
        lines.append(f'<polygon points="{coords}" fill="{fill}" stroke="black" stroke-width="{stroke!r}"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def emit_svg(mesh: Mesh, path, indicators=None) -> Path:
    """Draw the triangles, optionally shaded by log of per-element indicators."""
    path = Path(path)
    path.write_text(svg_text(mesh, indicators))
    return path


def format_constants(constants) -> str:
    if constants is None:
        return "constants unavailable (no inf-sup constant)\n"
    return "".join(f"{name:12s} {value:.10g}\n" for name, value in constants.as_dict().items()
                   if not (isinstance(value, float) and math.isnan(value)))
