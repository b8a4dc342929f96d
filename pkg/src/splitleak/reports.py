"""Report emission: RFC-4180 CSV, plain-text SVG plots, binary PPM image grids, run manifests."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import IoFailure


def _write(path: Path, data: bytes) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def fmt(value) -> str:
    """Stable text form for CSV cells: absent -> empty, floats with 6 decimals."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        if not math.isfinite(value):
            return "inf" if value > 0 else ("-inf" if value < 0 else "nan")
        return f"{float(value):.6f}"
    return str(value)


def csv_bytes(columns, rows) -> bytes:
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(row.get(c)) for c in columns])
    return buf.getvalue().encode()


def write_csv(path, columns, rows) -> bytes:
    data = csv_bytes(columns, rows)
    _write(Path(path), data)
    return data


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, experiment: str, config: dict, artifacts: list) -> Path:
    """manifest.json: experiment id, full config (seeds included) and sha256 of every artifact."""
    out_dir = Path(out_dir)
    body = {
        "experiment": experiment,
        "config": config,
        "artifacts": {Path(a).name: sha256_file(a) for a in sorted(map(str, artifacts))},
    }
    path = out_dir / "manifest.json"
    _write(path, (json.dumps(body, indent=2, sort_keys=True) + "\n").encode())
    return path


# ---------------------------------------------------------------- svg

_W, _H, _PAD = 480, 320, 48
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _scale(lo, hi, a, b):
    if hi == lo:
        hi = lo + 1.0
    return lambda v: a + (v - lo) * (b - a) / (hi - lo)


def _frame(title, xlabel, ylabel, body):
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">\n'
        f'<rect width="{_W}" height="{_H}" fill="white"/>\n'
        f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>\n'
        f'<text x="{_W / 2}" y="{_H - 8}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>\n'
        f'<text x="14" y="{_H / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {_H / 2})">{escape(ylabel)}</text>\n'
        f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - _PAD}" y2="{_H - _PAD}" stroke="black"/>\n'
        f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_H - _PAD}" stroke="black"/>\n'
    )
    return head + "".join(body) + "</svg>\n"


def _ticks(lo, hi, sx, sy, xlo, xhi):
    out = []
    for v, s in ((xlo, "x"), (xhi, "x"), (lo, "y"), (hi, "y")):
        if s == "x":
            out.append(f'<text x="{sx(v):.1f}" y="{_H - _PAD + 16}" text-anchor="middle" font-size="10">{v:g}</text>\n')
        else:
            out.append(f'<text x="{_PAD - 4}" y="{sy(v):.1f}" text-anchor="end" font-size="10">{v:.3g}</text>\n')
    return out


def line_plot(series: dict, title="", xlabel="", ylabel="") -> str:
    """``series`` maps a legend label to a list of (x, y) points."""
    pts = [p for s in series.values() for p in s]
    xs = [p[0] for p in pts] or [0.0]
    ys = [p[1] for p in pts] or [0.0]
    sx = _scale(min(xs), max(xs), _PAD, _W - _PAD)
    sy = _scale(min(ys), max(ys), _H - _PAD, _PAD)
    body = _ticks(min(ys), max(ys), sx, sy, min(xs), max(xs))
    for i, (label, s) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in s)
        body.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>\n')
        body.append(f'<text x="{_W - _PAD + 2}" y="{_PAD + 14 * i}" font-size="10" fill="{color}">{escape(str(label))}</text>\n')
    return _frame(title, xlabel, ylabel, body)


def scatter_plot(points, title="", xlabel="", ylabel="") -> str:
    xs = [p[0] for p in points] or [0.0]
    ys = [p[1] for p in points] or [0.0]
    sx = _scale(min(xs), max(xs), _PAD, _W - _PAD)
    sy = _scale(min(ys), max(ys), _H - _PAD, _PAD)
    body = _ticks(min(ys), max(ys), sx, sy, min(xs), max(xs))
    for x, y in points:
        body.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" fill="{_COLORS[0]}"/>\n')
    return _frame(title, xlabel, ylabel, body)


def heat_grid(values, row_labels, col_labels, title="", xlabel="", ylabel="") -> str:
    """Diverging blue/red cells with the value printed in each."""
    values = np.asarray(values, dtype=float)
    nr, nc = values.shape
    span = float(np.nanmax(np.abs(values))) if values.size else 1.0
    span = span or 1.0
    cw = (_W - 2 * _PAD) / max(nc, 1)
    ch = (_H - 2 * _PAD) / max(nr, 1)
    body = []
    for i in range(nr):
        for j in range(nc):
            v = values[i, j]
            t = 0.0 if math.isnan(v) else v / span
            r, g, b = (255, int(255 * (1 - t)), int(255 * (1 - t))) if t >= 0 else (int(255 * (1 + t)), int(255 * (1 + t)), 255)
            x, y = _PAD + j * cw, _PAD + i * ch
            body.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{cw:.1f}" height="{ch:.1f}" fill="rgb({r},{g},{b})" stroke="white"/>\n')
            body.append(f'<text x="{x + cw / 2:.1f}" y="{y + ch / 2 + 4:.1f}" text-anchor="middle" font-size="10">{v:.2f}</text>\n')
    for i, lab in enumerate(row_labels):
        body.append(f'<text x="{_PAD - 4}" y="{_PAD + (i + 0.5) * ch + 4:.1f}" text-anchor="end" font-size="10">{escape(str(lab))}</text>\n')
    for j, lab in enumerate(col_labels):
        body.append(f'<text x="{_PAD + (j + 0.5) * cw:.1f}" y="{_H - _PAD + 14}" text-anchor="middle" font-size="10">{escape(str(lab))}</text>\n')
    return _frame(title, xlabel, ylabel, body)


def write_svg(path, svg: str) -> None:
    _write(Path(path), svg.encode())


# ---------------------------------------------------------------- ppm


def image_grid(rows, pad: int = 1) -> np.ndarray:
    """Tile a list of rows of [C,H,W] images in [0,1] into one HxWx3 uint8 array."""
    imgs = [[np.asarray(im, dtype=np.float64) for im in row] for row in rows]
    c, h, w = imgs[0][0].shape
    ncol = max(len(r) for r in imgs)
    out = np.full((len(imgs) * (h + pad) + pad, ncol * (w + pad) + pad, 3), 255, dtype=np.uint8)
    for i, row in enumerate(imgs):
        for j, im in enumerate(row):
            rgb = np.repeat(im, 3, axis=0) if c == 1 else im[:3]
            px = np.clip(np.rint(rgb.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            out[y : y + h, x : x + w] = px
    return out


def ppm_bytes(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def write_ppm(path, rgb: np.ndarray) -> None:
    _write(Path(path), ppm_bytes(rgb))


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(raw) and not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError("not an 8-bit P6 PPM")
    w, h = int(tokens[1]), int(tokens[2])
    # exactly one whitespace byte separates the header from the raster
    return np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos + 1).reshape(h, w, 3)
