"""Minimal hand-written SVG renders for the exported diagnostics (CSVs are the contract)."""

from __future__ import annotations

import math

import numpy as np

W, H, PAD = 640, 320, 40


def _doc(width, height, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">')
    return "\n".join([head, f'<rect width="{width}" height="{height}" fill="white"/>', *body, "</svg>"]) + "\n"


def _polyline(xs, ys, color, width=1.0) -> str:
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    return f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"/>'


def _text(x, y, s, size=11, anchor="start") -> str:
    return f'<text x="{x:.1f}" y="{y:.1f}" font-size="{size}" text-anchor="{anchor}" font-family="sans-serif">{s}</text>'


def _weight_color(v: float) -> str:
    """Blue (low) to red (high) for a value in [0, 1]."""
    v = min(max(float(v), 0.0), 1.0)
    return f"rgb({int(255 * v)},60,{int(255 * (1 - v))})"


def envelope_plot(ev) -> str:
    """Two stacked panels: per-axis error with a +/-3 sigma band."""
    n = ev.errors.shape[0]
    body = []
    ph = (H * 2 - 3 * PAD) / 2
    xs = PAD + (W - 2 * PAD) * (np.arange(n) / max(n - 1, 1))
    for j, axis in enumerate(("East", "North")):
        top = PAD + j * (ph + PAD)
        env = 3 * ev.sigmas[:, j]
        span = float(max(np.max(np.abs(ev.errors[:, j])), np.max(env), 1e-9))

        def ymap(v):
            return top + ph / 2 - (v / span) * (ph / 2)

        band = list(zip(xs, ymap(env))) + list(zip(xs[::-1], ymap(-env[::-1])))
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in band)
        body.append(f'<polygon points="{pts}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>')
        body.append(_polyline(xs, ymap(ev.errors[:, j]), "#d62728"))
        body.append(f'<line x1="{PAD}" y1="{ymap(0):.2f}" x2="{W - PAD}" y2="{ymap(0):.2f}" stroke="#888"/>')
        body.append(_text(PAD, top - 6, f"{axis} error (m) with 3-sigma envelope, scale {span:.2f} m"))
    return _doc(W, H * 2, body)


def satellite_bars(d) -> str:
    n = len(d.sat_ids)
    body = [_text(PAD, 20, f"epoch {d.epoch_index}: normalized weight (bars) and SD error (dots)")]
    if n == 0:
        return _doc(W, H, body)
    bw = (W - 2 * PAD) / n
    wmax = float(max(np.max(d.normalized_weight), 1e-12))
    finite = np.abs(d.sd_error[np.isfinite(d.sd_error)])
    emax = float(max(finite.max() if finite.size else 0.0, 1e-9))
    base = H - PAD
    for i, sid in enumerate(d.sat_ids):
        x = PAD + i * bw
        h = (H - 2 * PAD) * d.normalized_weight[i] / wmax
        body.append(f'<rect x="{x + 1:.2f}" y="{base - h:.2f}" width="{bw - 2:.2f}" height="{h:.2f}" fill="#4c72b0"/>')
        if d.has_reference[i] and not d.is_reference[i]:
            y = base - (H - 2 * PAD) * abs(d.sd_error[i]) / emax
            body.append(f'<circle cx="{x + bw / 2:.2f}" cy="{y:.2f}" r="3" fill="#dd8452"/>')
        body.append(_text(x + bw / 2, base + 12, sid, size=8, anchor="middle"))
    return _doc(W, H, body)


def skyplot(d) -> str:
    size = 360
    c, r0 = size / 2, size / 2 - 30
    body = [f'<circle cx="{c}" cy="{c}" r="{r0 * k / 3:.1f}" fill="none" stroke="#ccc"/>' for k in (1, 2, 3)]
    body.append(_text(c, 16, f"epoch {d.epoch_index} skyplot (color: normalized weight)", anchor="middle"))
    wmax = float(max(np.max(d.normalized_weight), 1e-12)) if len(d.sat_ids) else 1.0
    for i, sid in enumerate(d.sat_ids):
        rr = r0 * (1 - d.elevation[i] / (math.pi / 2))
        x = c + rr * math.sin(d.azimuth[i])
        y = c - rr * math.cos(d.azimuth[i])
        body.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="6" fill="{_weight_color(d.normalized_weight[i] / wmax)}"/>')
        body.append(_text(x + 7, y + 3, sid, size=8))
    return _doc(size, size, body)


def write(path, content: str) -> None:
    with open(path, "w") as fh:
        fh.write(content)
