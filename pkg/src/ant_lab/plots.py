"""Deterministic SVG renderings of the run artifacts.

Hand-rolled SVG with a fixed 640x480 canvas, fixed palette, and no
timestamps: rendering the same CSV twice yields byte-identical files, so
figures can live under version control and be diffed.
"""

from __future__ import annotations

import csv

__all__ = ["plot_trajectories", "plot_sweep", "plot_saliency_curve"]

WIDTH, HEIGHT = 640, 480
MARGIN = 50
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#e377c2", "#7f7f7f")


class PlotDataError(ValueError):
    pass


def _read_csv(path, columns):
    try:
        with open(path) as f:
            reader = csv.DictReader(f)
            if reader.fieldnames is None or any(c not in reader.fieldnames for c in columns):
                raise PlotDataError(f"{path}: expected columns {columns}, got {reader.fieldnames}")
            rows = [[float(row[c]) for c in columns] for row in reader]
    except OSError as e:
        raise PlotDataError(f"{path}: {e}") from None
    except ValueError as e:
        raise PlotDataError(f"{path}: malformed numeric field ({e})") from None
    if not rows:
        raise PlotDataError(f"{path}: no data rows")
    return rows


def _scale(vals, lo_out, hi_out):
    lo, hi = min(vals), max(vals)
    span = hi - lo if hi > lo else 1.0
    return lambda v: lo_out + (v - lo) / span * (hi_out - lo_out)


def _svg(body) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
            f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">\n'
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>\n')
    return head + body + "</svg>\n"


def _axes(x_label, y_label) -> str:
    x0, y0 = MARGIN, HEIGHT - MARGIN
    x1, y1 = WIDTH - MARGIN, MARGIN
    return (f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="#000000"/>\n'
            f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="#000000"/>\n'
            f'<text x="{(x0 + x1) // 2}" y="{HEIGHT - 12}" font-size="14" '
            f'text-anchor="middle" font-family="monospace">{x_label}</text>\n'
            f'<text x="14" y="{(y0 + y1) // 2}" font-size="14" text-anchor="middle" '
            f'font-family="monospace" transform="rotate(-90 14 {(y0 + y1) // 2})">'
            f'{y_label}</text>\n')


def _polyline(points, color, width=2) -> str:
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
    return (f'<polyline fill="none" stroke="{color}" stroke-width="{width}" '
            f'points="{pts}"/>\n')


def plot_trajectories(traj_csv, out_path) -> int:
    """One polyline per sampling chain over the plane; returns the chain count."""
    rows = _read_csv(traj_csv, ["chain", "step", "x", "y"])
    chains = {}
    for chain, step, x, y in rows:
        chains.setdefault(int(chain), []).append((step, x, y))
    sx = _scale([r[2] for r in rows], MARGIN, WIDTH - MARGIN)
    sy = _scale([r[3] for r in rows], HEIGHT - MARGIN, MARGIN)
    body = _axes("x", "y")
    for i, cid in enumerate(sorted(chains)):
        pts = [(sx(x), sy(y)) for _, x, y in sorted(chains[cid])]
        body += _polyline(pts, PALETTE[i % len(PALETTE)], width=1)
    with open(out_path, "w") as f:
        f.write(_svg(body))
    return len(chains)


def plot_sweep(sweep_csv, out_path) -> None:
    """Two curves against the reversal timestep: target fraction, off-manifold."""
    rows = sorted(_read_csv(sweep_csv, ["t_prime", "frac_target", "off_manifold_frac"]))
    sx = _scale([r[0] for r in rows], MARGIN, WIDTH - MARGIN)
    sy = _scale([0.0, 1.0], HEIGHT - MARGIN, MARGIN)
    body = _axes("t_prime", "fraction")
    body += _polyline([(sx(t), sy(f)) for t, f, _ in rows], PALETTE[0])
    body += _polyline([(sx(t), sy(o)) for t, _, o in rows], PALETTE[1])
    body += (f'<text x="{WIDTH - MARGIN}" y="{MARGIN - 8}" font-size="12" '
             f'text-anchor="end" font-family="monospace">'
             f'<tspan fill="{PALETTE[0]}">frac_target</tspan> '
             f'<tspan fill="{PALETTE[1]}">off_manifold</tspan></text>\n')
    with open(out_path, "w") as f:
        f.write(_svg(body))


def plot_saliency_curve(curve_csv, out_path) -> list:
    """Active-parameter count vs maps intersected; returns the rendered y pixels."""
    rows = sorted(_read_csv(curve_csv, ["n_maps", "active_params"]))
    sx = _scale([r[0] for r in rows], MARGIN, WIDTH - MARGIN)
    sy = _scale([0.0, max(r[1] for r in rows)], HEIGHT - MARGIN, MARGIN)
    pts = [(sx(n), sy(a)) for n, a in rows]
    body = _axes("maps intersected", "active parameters")
    body += _polyline(pts, PALETTE[2])
    with open(out_path, "w") as f:
        f.write(_svg(body))
    return [p[1] for p in pts]
