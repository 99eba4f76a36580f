"""CSV, SVG and manifest writers for run outputs.

Every CSV has a header row and numbers are written with 6 significant digits.
"""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .attacks import AttackReport, GapSummary

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e")


def fmt_num(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt_num(v) for v in row])
    path.write_text(buf.getvalue())
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_metrics(path, history) -> Path:
    rows = [(e.epoch, e.lr, e.loss,
             "" if e.test_accuracy is None else e.test_accuracy,
             "" if e.residual is None else e.residual,
             "" if e.lam is None else e.lam) for e in history.epochs]
    return write_csv(path, ("epoch", "lr", "loss", "test_accuracy", "residual", "lambda"), rows)


def write_step_losses(path, losses: Sequence[float]) -> Path:
    return write_csv(path, ("step", "loss"), enumerate(losses))


def write_attack_report(path, report: AttackReport) -> Path:
    return write_csv(path, ("attack", "source", "target", "param", "accuracy"),
                     ((report.attack, r.source, r.target, r.param, r.accuracy) for r in report.rows))


def write_attack_examples(path, report: AttackReport) -> Path:
    return write_csv(path, ("index", "source", "target", "param", "success", "l2", "linf"),
                     ((e.index, e.source, e.target, e.param, e.success, e.l2, e.linf)
                      for e in report.examples))


def fgsm_wide_table(report: AttackReport) -> tuple[list[str], list[list]]:
    """One row per epsilon, one accuracy column per (source, target) pair."""
    pairs = [(s, t) for s in report.names for t in report.names]
    header = ["param"] + [f"{s}->{t}" for s, t in pairs]
    eps = report.curve(*pairs[0])[0]
    rows = [[e] + [report.accuracy(s, t, e) for s, t in pairs] for e in eps]
    return header, rows


def write_gap(path, gap: GapSummary) -> Path:
    rows = [("mean", gap.mean), ("median", gap.median), ("count", len(gap.differences))]
    return write_csv(path, ("statistic", "value"), rows)


def curves_svg(report: AttackReport, width: int = 480, height: int = 320,
               title: Optional[str] = None) -> str:
    """Accuracy against epsilon: one polyline per (source, target) pair."""
    pad = 48
    pairs = [(s, t) for s in report.names for t in report.names]
    all_eps = np.concatenate([report.curve(s, t)[0] for s, t in pairs])
    xmax = float(all_eps.max()) if all_eps.size and all_eps.max() > 0 else 1.0
    sx = lambda e: pad + (width - 2 * pad) * e / xmax
    sy = lambda a: height - pad - (height - 2 * pad) * a / 100.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle" font-size="12">epsilon</text>',
             f'<text x="14" y="{height / 2:.1f}" font-size="12" '
             f'transform="rotate(-90 14 {height / 2:.1f})" text-anchor="middle">accuracy (%)</text>']
    if title:
        parts.append(f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>')
    for k, (s, t) in enumerate(pairs):
        eps, acc = report.curve(s, t)
        pts = " ".join(f"{sx(e):.2f},{sy(a):.2f}" for e, a in zip(eps, acc))
        color = COLORS[k % len(COLORS)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}">'
                     f'<title>{escape(s)} -&gt; {escape(t)}</title></polyline>')
        parts.append(f'<text x="{width - pad + 4}" y="{pad + 14 * k}" font-size="10" fill="{color}">'
                     f'{escape(s)}-&gt;{escape(t)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def matrix_svg(report: AttackReport, gap: Optional[GapSummary] = None, cell: int = 90) -> str:
    """2x2 accuracy matrix (rows: source, columns: target) with an optional gap line."""
    names = report.names
    pad = 70
    w = pad + cell * len(names) + 20
    h = pad + cell * len(names) + (40 if gap is not None else 20)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
             f'<rect width="{w}" height="{h}" fill="white"/>']
    for j, t in enumerate(names):
        parts.append(f'<text x="{pad + cell * j + cell / 2}" y="{pad - 10}" text-anchor="middle" '
                     f'font-size="12">{escape(t)}</text>')
    for i, s in enumerate(names):
        parts.append(f'<text x="{pad - 8}" y="{pad + cell * i + cell / 2}" text-anchor="end" '
                     f'font-size="12">{escape(s)}</text>')
        for j, t in enumerate(names):
            acc = report.accuracy(s, t)
            shade = int(255 - 1.5 * acc)
            parts.append(f'<rect x="{pad + cell * j}" y="{pad + cell * i}" width="{cell}" height="{cell}" '
                         f'fill="rgb({shade},{shade},255)" stroke="black"/>')
            parts.append(f'<text x="{pad + cell * j + cell / 2}" y="{pad + cell * i + cell / 2 + 4}" '
                         f'text-anchor="middle" font-size="13">{fmt_num(acc)}</text>')
    if gap is not None:
        parts.append(f'<text x="10" y="{h - 12}" font-size="11">mean L2 gap {fmt_num(gap.mean)} '
                     f'over {len(gap.differences)} examples</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def file_digest(paths: Iterable) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict[str, str]
    seed: int
    dataset_hashes: dict[str, str] = field(default_factory=dict)
    checkpoint: Optional[str] = None
    metrics: dict[str, float] = field(default_factory=dict)
    wall_clock: float = 0.0

    def to_text(self) -> str:
        lines = [f"command = {self.command}", f"seed = {self.seed}",
                 f"checkpoint = {self.checkpoint or 'none'}", f"wall_clock = {self.wall_clock:.3f}"]
        lines += [f"dataset.{k} = {v}" for k, v in sorted(self.dataset_hashes.items())]
        lines += [f"metric.{k} = {fmt_num(v)}" for k, v in sorted(self.metrics.items())]
        lines += [f"config.{k} = {v}" for k, v in sorted(self.config.items())]
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.txt"
        path.write_text(self.to_text())
        return path


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out
