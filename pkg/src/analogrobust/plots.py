"""Self-contained SVG rendering of ASR envelopes and accuracy distributions.

Values are written with four decimals both as drawn geometry and as
``data-*`` attributes so a figure can be checked against its CSV.
"""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

log = logging.getLogger(__name__)

W, H = 520, 360
LEFT, RIGHT, TOP, BOTTOM = 60, 150, 50, 50
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"]


def _fmt(v: float) -> str:
    return f"{v:.4f}"


def _label(v) -> str:
    return f"{v:g}" if isinstance(v, (int, float, np.floating, np.integer)) else str(v)


def envelope_svg(series: dict, title: str = "", iterations=None, magnitudes=None) -> str:
    """``series`` maps a label to ``(mean, std)`` sequences along the envelope.

    The bottom axis carries the iteration values, the top axis the magnitude
    values of the same points.
    """
    k = max((len(m) for m, _ in series.values()), default=0)
    iterations = list(iterations) if iterations is not None else list(range(1, k + 1))
    magnitudes = list(magnitudes) if magnitudes is not None else [""] * k
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM

    def px(i):
        return LEFT + (pw / 2 if k == 1 else pw * i / (k - 1))

    def py(v):
        return TOP + ph * (1 - float(np.clip(v, 0, 1)))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{LEFT + pw / 2}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>',
           f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT + pw}" y2="{TOP}" stroke="black"/>',
           f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>']
    for t in np.linspace(0, 1, 6):
        out.append(f'<text x="{LEFT - 6}" y="{py(t) + 4:.1f}" text-anchor="end" font-size="10">{t:.1f}</text>')
    for i in range(k):
        out.append(f'<text class="iteration" x="{px(i):.1f}" y="{TOP + ph + 16}" text-anchor="middle" '
                   f'font-size="10">{escape(_label(iterations[i]))}</text>')
        out.append(f'<text class="magnitude" x="{px(i):.1f}" y="{TOP - 6}" text-anchor="middle" '
                   f'font-size="10">{escape(_label(magnitudes[i]))}</text>')
    out.append(f'<text x="{LEFT + pw / 2}" y="{H - 12}" text-anchor="middle" font-size="11">iterations</text>')
    out.append(f'<text x="{LEFT + pw / 2}" y="{TOP - 22}" text-anchor="middle" font-size="11">magnitude</text>')
    out.append(f'<text x="16" y="{TOP + ph / 2}" transform="rotate(-90 16 {TOP + ph / 2})" text-anchor="middle" '
               f'font-size="11">ASR</text>')
    for s, (label, (mean, std)) in enumerate(series.items()):
        color = COLORS[s % len(COLORS)]
        mean, std = np.asarray(mean, float), np.asarray(std, float)
        values = " ".join(_fmt(v) for v in mean)
        spreads = " ".join(_fmt(v) for v in std)
        out.append(f'<g class="series" data-label="{escape(str(label))}" data-mean="{values}" '
                   f'data-std="{spreads}">')
        if len(mean) == 1:
            out.append(f'<circle cx="{px(0):.1f}" cy="{py(mean[0]):.1f}" r="4" fill="{color}"/>')
        else:
            upper = [f"{px(i):.1f},{py(m + d):.1f}" for i, (m, d) in enumerate(zip(mean, std))]
            lower = [f"{px(i):.1f},{py(m - d):.1f}" for i, (m, d) in reversed(list(enumerate(zip(mean, std))))]
            out.append(f'<polygon class="band" points="{" ".join(upper + lower)}" fill="{color}" '
                       f'fill-opacity="0.2" stroke="none"/>')
            d = " ".join(("M" if i == 0 else "L") + f"{px(i):.1f},{py(m):.1f}" for i, m in enumerate(mean))
            out.append(f'<path d="{d}" fill="none" stroke="{color}" stroke-width="2"/>')
        out.append("</g>")
        ly = TOP + 14 * s + 8
        out.append(f'<rect x="{W - RIGHT + 12}" y="{ly - 8}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{W - RIGHT + 26}" y="{ly + 1}" font-size="10">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out)


def accuracy_svg(groups: dict, title: str = "") -> str:
    """Mean +- std whiskers with the individual repetitions as dots."""
    labels = list(groups)
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM
    all_vals = np.concatenate([np.asarray(v, float) for v in groups.values()]) if groups else np.zeros(1)
    lo, hi = float(all_vals.min()), float(all_vals.max())
    pad = max((hi - lo) * 0.1, 1e-3)
    lo, hi = lo - pad, hi + pad

    def py(v):
        return TOP + ph * (1 - (v - lo) / (hi - lo))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{LEFT + pw / 2}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>']
    for t in np.linspace(lo, hi, 5):
        out.append(f'<text x="{LEFT - 6}" y="{py(t) + 4:.1f}" text-anchor="end" font-size="10">{t:.3f}</text>')
    for i, label in enumerate(labels):
        vals = np.asarray(groups[label], float)
        x = LEFT + pw * (i + 0.5) / max(len(labels), 1)
        m, s = vals.mean(), vals.std()
        out.append(f'<g class="group" data-label="{escape(label)}" data-mean="{_fmt(m)}" data-std="{_fmt(s)}">')
        for v in vals:
            out.append(f'<circle cx="{x - 12:.1f}" cy="{py(v):.1f}" r="1.5" fill="#888"/>')
        out.append(f'<line x1="{x:.1f}" y1="{py(m - s):.1f}" x2="{x:.1f}" y2="{py(m + s):.1f}" stroke="black"/>')
        out.append(f'<circle cx="{x:.1f}" cy="{py(m):.1f}" r="4" fill="{COLORS[i % len(COLORS)]}"/>')
        out.append(f'<text x="{x:.1f}" y="{TOP + ph + 16}" text-anchor="middle" font-size="9">{escape(label)}</text>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out)


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def envelopes_from_rows(rows: list[dict]) -> dict:
    """{attack: {scenario: (iterations, magnitudes, mean, std)}} along each grid diagonal."""
    cells = defaultdict(list)
    for row in rows:
        if "asr" not in row or row.get("asr") in ("", None):
            continue
        key = (row.get("attack", ""), row.get("scenario", ""))
        cells[key].append((float(row["iterations"]), float(row["magnitude"]), float(row["asr"])))
    out = defaultdict(dict)
    for (attack, scenario), vals in cells.items():
        its = sorted({v[0] for v in vals})
        mags = sorted({v[1] for v in vals})
        if len(its) != len(mags):
            continue
        mean, std = [], []
        for it, mag in zip(its, mags):
            asr = [v[2] for v in vals if v[0] == it and v[1] == mag]
            mean.append(float(np.mean(asr)) if asr else float("nan"))
            std.append(float(np.std(asr)) if asr else float("nan"))
        out[attack][scenario] = ([int(i) if float(i).is_integer() else i for i in its], mags, mean, std)
    return dict(out)


def emit_plots(report_files, out_dir) -> list[Path]:
    """One SVG per (report, attack); an empty or envelope-free report is skipped with a warning."""
    out_dir = Path(out_dir)
    written = []
    for path in map(Path, report_files):
        rows = read_rows(path) if path.exists() else []
        if not rows:
            log.warning("report %s is empty; nothing to plot", path)
            continue
        envs = envelopes_from_rows(rows)
        if not envs:
            log.warning("report %s holds no envelope data", path)
            continue
        out_dir.mkdir(parents=True, exist_ok=True)
        for attack, scen in sorted(envs.items()):
            first = next(iter(scen.values()))
            svg = envelope_svg({k: (v[2], v[3]) for k, v in scen.items()}, f"{path.stem}: {attack}", first[0],
                               first[1])
            target = out_dir / f"{path.stem}_{attack.lower()}.svg"
            target.write_text(svg)
            written.append(target)
    return written
