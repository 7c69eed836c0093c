"""Detection metrics: DET curve, EER, DCF16 (min-DCF averaged over two operating points),
score histograms, and DET / report exports.

Convention: a trial is accepted when ``score >= threshold``.
"""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass
from pathlib import Path
from statistics import NormalDist
from typing import Sequence

import numpy as np

from .errors import ContractError, MetricError
from .trials import TrialScoreSet

DCF16_TARGETS = (0.01, 0.005)


@dataclass(frozen=True)
class OperatingPoint:
    p_target: float
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.p_target < 1.0:
            raise ContractError(f"p_target must lie in (0, 1), got {self.p_target}")


@dataclass
class DetCurve:
    thresholds: np.ndarray  # -inf, each distinct score ascending, +inf
    p_miss: np.ndarray
    p_fa: np.ndarray
    n_target: int
    n_nontarget: int

    def __len__(self):
        return self.thresholds.size

    def rows(self):
        return zip(self.thresholds, self.p_miss, self.p_fa)


def det_from_scores(tgt, non) -> DetCurve:
    tgt = np.sort(np.asarray(tgt, dtype=np.float64))
    non = np.sort(np.asarray(non, dtype=np.float64))
    if tgt.size == 0 or non.size == 0:
        raise MetricError(f"need target and nontarget trials, got {tgt.size} and {non.size}")
    thr = np.concatenate([[-np.inf], np.unique(np.concatenate([tgt, non])), [np.inf]])
    p_miss = np.searchsorted(tgt, thr, side="left") / tgt.size
    p_fa = (non.size - np.searchsorted(non, thr, side="left")) / non.size
    return DetCurve(thr, p_miss, p_fa, int(tgt.size), int(non.size))


def det_curve(s: TrialScoreSet) -> DetCurve:
    tgt, non = s.split()
    return det_from_scores(tgt, non)


def eer(c: DetCurve) -> float:
    """Equal error rate in percent.

    Returns the common value where the staircase has p_miss == p_fa at some
    threshold; otherwise linear interpolation between the two adjacent points
    that bracket the sign change of p_miss - p_fa.
    """
    diff = c.p_miss - c.p_fa  # runs from -1 up to +1
    exact = np.flatnonzero(diff == 0)
    if exact.size:
        return 100.0 * float(c.p_miss[exact[0]])
    k = int(np.flatnonzero(diff > 0)[0])
    m0, f0, m1, f1 = c.p_miss[k - 1], c.p_fa[k - 1], c.p_miss[k], c.p_fa[k]
    # intersection of the segment (f0,m0)-(f1,m1) with the diagonal
    w = (f0 - m0) / ((m1 - m0) - (f1 - f0))
    return 100.0 * float(m0 + w * (m1 - m0))


def min_dcf(c: DetCurve, op: OperatingPoint) -> float:
    cost = op.c_miss * op.p_target * c.p_miss + op.c_fa * (1.0 - op.p_target) * c.p_fa
    norm = min(op.c_miss * op.p_target, op.c_fa * (1.0 - op.p_target))
    return float(np.min(cost) / norm)


def min_dcf16(c: DetCurve) -> float:
    return float(np.mean([min_dcf(c, OperatingPoint(p)) for p in DCF16_TARGETS]))


def score_histogram(s: TrialScoreSet, bins: int = 40) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(edges, target counts, nontarget counts) over equal-width bins spanning all scores."""
    if len(s) == 0:
        raise MetricError("cannot histogram an empty score set")
    if bins < 1:
        raise ContractError("bins must be >= 1")
    tgt, non = s.split()
    lo, hi = float(s.scores.min()), float(s.scores.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    return edges, np.histogram(tgt, edges)[0], np.histogram(non, edges)[0]


# ---------------------------------------------------------------------------
# exports


def _num(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def det_csv(c: DetCurve) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["threshold", "p_miss", "p_fa", "n_target", "n_nontarget"])
    for t, m, f in c.rows():
        wr.writerow([_num(t), _num(m), _num(f), c.n_target, c.n_nontarget])
    return buf.getvalue()


def read_det_csv(path: str | os.PathLike) -> DetCurve:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise MetricError(f"{path}: empty DET file")
    col = lambda k: np.array([float(r[k]) for r in rows])  # noqa: E731
    return DetCurve(col("threshold"), col("p_miss"), col("p_fa"), int(rows[0]["n_target"]),
                    int(rows[0]["n_nontarget"]))


_NORM = NormalDist()
_PROBIT_TICKS = (0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.4)
_COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def _probit(p: np.ndarray, lo: float, hi: float) -> np.ndarray:
    p = np.clip(p, lo, hi)
    return np.array([_NORM.inv_cdf(float(v)) for v in p])


def det_svg(curves: Sequence[tuple[str, DetCurve]], size: int = 480) -> str:
    """Standalone SVG of one or more DET curves on probit axes (0.1 % .. 40 %)."""
    lo, hi = _PROBIT_TICKS[0], _PROBIT_TICKS[-1]
    zlo, zhi = _NORM.inv_cdf(lo), _NORM.inv_cdf(hi)
    pad = 50
    span = size - 2 * pad

    def sx(z):
        return pad + (z - zlo) / (zhi - zlo) * span

    def sy(z):
        return size - pad - (z - zlo) / (zhi - zlo) * span

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
        f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="black"/>',
    ]
    for t in _PROBIT_TICKS:
        z = _NORM.inv_cdf(t)
        label = f"{100 * t:g}"
        out.append(f'<line x1="{sx(z):.2f}" y1="{pad}" x2="{sx(z):.2f}" y2="{size - pad}" stroke="#ddd"/>')
        out.append(f'<line x1="{pad}" y1="{sy(z):.2f}" x2="{size - pad}" y2="{sy(z):.2f}" stroke="#ddd"/>')
        out.append(f'<text x="{sx(z):.2f}" y="{size - pad + 14}" font-size="10" '
                   f'text-anchor="middle">{label}</text>')
        out.append(f'<text x="{pad - 4}" y="{sy(z) + 3:.2f}" font-size="10" text-anchor="end">{label}</text>')
    out.append(f'<text x="{size / 2}" y="{size - 12}" font-size="12" '
               f'text-anchor="middle">False alarm probability (%)</text>')
    out.append(f'<text x="14" y="{size / 2}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 14 {size / 2})">Miss probability (%)</text>')
    for i, (name, c) in enumerate(curves):
        colour = _COLOURS[i % len(_COLOURS)]
        xs = _probit(c.p_fa, lo, hi)
        ys = _probit(c.p_miss, lo, hi)
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{pad + 8}" y="{pad + 16 + 14 * i}" font-size="11" fill="{colour}">'
                   f'{_xml_escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _xml_escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def export_det(c: DetCurve, path: str | os.PathLike, name: str = "system") -> tuple[Path, Path]:
    """Write ``<path>.csv`` and ``<path>.svg``."""
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    csv_path, svg_path = base.with_suffix(".csv"), base.with_suffix(".svg")
    csv_path.write_text(det_csv(c))
    svg_path.write_text(det_svg([(name, c)]))
    return csv_path, svg_path


@dataclass(frozen=True)
class ReportRow:
    system: str
    condition: str
    eer: float
    dcf16: float
    n_target: int
    n_nontarget: int


def evaluate(s: TrialScoreSet, pooled_name: str = "pool") -> list[ReportRow]:
    """One row for the pooled set, then one per condition tag (sorted)."""
    rows = []
    subsets = [(pooled_name, s)] + [(c, s.subset(c)) for c in s.conditions()]
    for cond, sub in subsets:
        c = det_curve(sub)
        rows.append(ReportRow(s.system, cond, eer(c), min_dcf16(c), c.n_target, c.n_nontarget))
    return rows


REPORT_COLUMNS = ("system", "condition", "eer_pct", "dcf16", "n_target", "n_nontarget")


def report_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(REPORT_COLUMNS)
    for r in rows:
        wr.writerow([r.system, r.condition, f"{r.eer:.4f}", f"{r.dcf16:.6f}", r.n_target, r.n_nontarget])
    return buf.getvalue()


def report_table(rows: Sequence[ReportRow]) -> str:
    """Wide text table: one line per system, EER(%) and DCF16 per condition."""
    conds: list[str] = []
    for r in rows:
        if r.condition not in conds:
            conds.append(r.condition)
    systems: list[str] = []
    for r in rows:
        if r.system not in systems:
            systems.append(r.system)
    cell = {(r.system, r.condition): r for r in rows}
    width = max([len("system")] + [len(s) for s in systems])
    head1 = "system".ljust(width) + "".join(f" | {c:^15}" for c in conds)
    head2 = " " * width + "".join(" | EER(%)  DCF16" for _ in conds)
    lines = [head1, head2, "-" * len(head2)]
    for s in systems:
        parts = []
        for c in conds:
            r = cell.get((s, c))
            parts.append(f" | {r.eer:6.2f}  {r.dcf16:5.3f}" if r else " |     -      - ")
        lines.append(s.ljust(width) + "".join(parts))
    return "\n".join(lines) + "\n"


def export_report(rows: Sequence[ReportRow], out_dir: str | os.PathLike, stem: str = "report") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, txt_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.txt"
    csv_path.write_text(report_csv(rows))
    txt_path.write_text(report_table(rows))
    return csv_path, txt_path


def histogram_csv(edges: np.ndarray, tgt: np.ndarray, non: np.ndarray) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["bin_lo", "bin_hi", "target", "nontarget"])
    for i in range(tgt.size):
        wr.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), int(tgt[i]), int(non[i])])
    return buf.getvalue()
