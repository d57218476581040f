"""Detector combination rules, precision/recall, ROC sweeps and report files."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

RULES = ("T1", "T2", "T3", "T4")
SINGLE = ("R", "H", "I")
CSV_HEADER = ("item_id", "truth", "reg", "hist", "resid", "resid_score", "rule", "flag")
THETA_GRID = np.linspace(0.0, 1.0, 101)


def combine(r, h, i, rule: str):
    """Boolean combination of the three detector verdicts (scalars or arrays)."""
    r, h, i = np.asarray(r, bool), np.asarray(h, bool), np.asarray(i, bool)
    if rule == "T1":
        out = r & h & i
    elif rule == "T2":
        out = r | h | i
    elif rule == "T3":
        out = (r & h) | (r & i) | (h & i)
    elif rule == "T4":
        out = h & (r | i)
    elif rule == "R":
        out = r
    elif rule == "H":
        out = h
    elif rule == "I":
        out = i
    else:
        raise ValueError(f"unknown rule {rule!r}")
    return bool(out) if out.ndim == 0 else out


@dataclass
class Verdicts:
    """Column-wise verdict records; ``None`` marks a detector that was not run."""

    item_id: np.ndarray
    truth: np.ndarray
    reg: np.ndarray | None = None
    hist: np.ndarray | None = None
    resid: np.ndarray | None = None
    resid_score: np.ndarray | None = None

    def __post_init__(self):
        self.item_id = np.asarray(self.item_id, np.int64)
        self.truth = np.asarray(self.truth, bool)
        for name in ("reg", "hist", "resid"):
            val = getattr(self, name)
            if val is not None:
                setattr(self, name, np.asarray(val, bool))
        if self.resid_score is not None:
            self.resid_score = np.asarray(self.resid_score, np.float64)

    def __len__(self):
        return len(self.item_id)

    def flags(self, rule: str, resid=None) -> np.ndarray:
        resid = self.resid if resid is None else resid
        needed = {"R": ("reg",), "H": ("hist",), "I": ("resid",)}.get(rule, ("reg", "hist", "resid"))
        for name in needed:
            if (resid if name == "resid" else getattr(self, name)) is None:
                raise ValueError(f"rule {rule} needs the {name} verdicts")
        n = len(self)
        pick = lambda v: np.zeros(n, bool) if v is None else v  # noqa: E731
        return combine(pick(self.reg), pick(self.hist), pick(resid), rule)


@dataclass
class PR:
    precision: float | None
    recall: float
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def fpr(self) -> float:
        return self.fp / (self.fp + self.tn) if self.fp + self.tn else 0.0


def precision_recall(truth, flagged) -> PR:
    truth = np.asarray(truth, bool)
    flagged = np.asarray(flagged, bool)
    if not truth.any():
        raise ValueError("precision/recall needs at least one positive")
    tp = int(np.sum(truth & flagged))
    fp = int(np.sum(~truth & flagged))
    fn = int(np.sum(truth & ~flagged))
    tn = int(np.sum(~truth & ~flagged))
    precision = tp / (tp + fp) if tp + fp else None
    return PR(precision, tp / (tp + fn), tp, fp, fn, tn)


@dataclass
class CurvePoint:
    theta: float
    tpr: float
    fpr: float
    precision: float | None
    recall: float


def trapezoid_auc(fpr, tpr) -> float:
    fpr = np.concatenate([[0.0], np.asarray(fpr, float), [1.0]])
    tpr = np.concatenate([[0.0], np.asarray(tpr, float), [1.0]])
    order = np.lexsort((tpr, fpr))
    f, t = fpr[order], tpr[order]
    return float(np.sum(np.diff(f) * (t[1:] + t[:-1]) / 2.0))


def roc_sweep(v: Verdicts, rule: str, theta_grid=None):
    """Sweep the residual threshold with the other verdicts fixed.

    ``theta_grid`` defaults to 101 points on [0, 1]; pass ``"scores"`` to use
    every distinct residual score (plus one value above the maximum) as a
    threshold. Returns ``(points sorted by fpr, auc)``.
    """
    if v.resid_score is None:
        raise ValueError("ROC sweep needs residual scores")
    if theta_grid is None:
        grid = THETA_GRID
    elif isinstance(theta_grid, str) and theta_grid == "scores":
        u = np.unique(v.resid_score)
        grid = np.concatenate([u, [np.nextafter(u[-1], np.inf)]]) if len(u) else np.array([0.0])
    else:
        grid = np.asarray(theta_grid, float)
    points = []
    for theta in grid:
        flags = v.flags(rule, resid=v.resid_score < theta)
        pr = precision_recall(v.truth, flags)
        points.append(CurvePoint(float(theta), pr.recall, pr.fpr, pr.precision, pr.recall))
    points.sort(key=lambda p: (p.fpr, p.tpr, p.theta))
    return points, trapezoid_auc([p.fpr for p in points], [p.tpr for p in points])


def roc_envelope(curves) -> tuple:
    """Upper envelope of several ROC point sets: best tpr reachable at each fpr."""
    pts = sorted({(p.fpr, p.tpr) for c in curves for p in c})
    fpr, tpr, best = [], [], 0.0
    for f, t in pts:
        best = max(best, t)
        if fpr and fpr[-1] == f:
            tpr[-1] = best
        else:
            fpr.append(f)
            tpr.append(best)
    return np.array(fpr), np.array(tpr), trapezoid_auc(fpr, tpr)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _fmt_bool(b):
    return "" if b is None else str(int(bool(b)))


def _fmt_float(x):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def verdict_rows(v: Verdicts, rules):
    for rule in rules:
        flags = v.flags(rule)
        for k in range(len(v)):
            yield (
                str(int(v.item_id[k])),
                str(int(v.truth[k])),
                _fmt_bool(None if v.reg is None else v.reg[k]),
                _fmt_bool(None if v.hist is None else v.hist[k]),
                _fmt_bool(None if v.resid is None else v.resid[k]),
                _fmt_float(None if v.resid_score is None else v.resid_score[k]),
                rule,
                str(int(flags[k])),
            )


def dumps_csv(v: Verdicts | None, rules) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    if v is not None:
        w.writerows(verdict_rows(v, rules))
    return buf.getvalue()


def write_csv(path, v, rules):
    Path(path).write_text(dumps_csv(v, rules), encoding="utf-8", newline="")


def read_csv(path) -> tuple:
    """Parse a verdict CSV back into ``(Verdicts, rules)``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return None, []
    rules = list(dict.fromkeys(r["rule"] for r in rows))
    first = [r for r in rows if r["rule"] == rules[0]]

    def col(name, conv):
        vals = [r[name] for r in first]
        return None if all(x == "" for x in vals) else np.array([conv(x) for x in vals])

    v = Verdicts(
        item_id=col("item_id", int),
        truth=col("truth", int).astype(bool),
        reg=col("reg", lambda s: bool(int(s))),
        hist=col("hist", lambda s: bool(int(s))),
        resid=col("resid", lambda s: bool(int(s))),
        resid_score=col("resid_score", float),
    )
    return v, rules


def join(parts) -> Verdicts:
    """Merge per-detector verdicts on ``item_id`` (output sorted by id); truth and ids must agree."""
    parts = [p for p in parts if p is not None]
    if not parts:
        raise ValueError("nothing to join")
    first = parts[0]
    if len(np.unique(first.item_id)) != len(first.item_id):
        raise ValueError("duplicate item ids")
    o = np.argsort(first.item_id, kind="stable")
    base = Verdicts(first.item_id[o], first.truth[o], *(None if x is None else x[o] for x in (first.reg, first.hist, first.resid, first.resid_score)))
    ids = base.item_id
    merged = {"reg": base.reg, "hist": base.hist, "resid": base.resid, "resid_score": base.resid_score}
    for p in parts[1:]:
        if set(p.item_id.tolist()) != set(ids.tolist()):
            raise ValueError("verdict files cover different item ids")
        pos = {int(k): j for j, k in enumerate(p.item_id)}
        order = np.array([pos[int(k)] for k in ids])
        if np.any(p.truth[order] != base.truth):
            raise ValueError("verdict files disagree on ground truth")
        for name in merged:
            val = getattr(p, name)
            if val is not None:
                merged[name] = val[order]
    return Verdicts(ids, base.truth, **merged)


def summary_table(results: dict) -> str:
    """Plain-text table: one row per rule, one precision/recall column pair per attack set."""
    sets = list(results)
    rules = list(dict.fromkeys(r for s in sets for r in results[s]))
    head = "| rule | " + " | ".join(f"{s} precision | {s} recall" for s in sets) + " |"
    lines = [head, "|" + "---|" * (1 + 2 * len(sets))]
    for rule in rules:
        cells = []
        for s in sets:
            pr = results[s].get(rule)
            if pr is None:
                cells += ["", ""]
            else:
                cells += ["null" if pr.precision is None else f"{100 * pr.precision:.1f}%", f"{100 * pr.recall:.1f}%"]
        lines.append(f"| {rule} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#000000")


def svg_lines(series: dict, xlabel: str, ylabel: str, title: str = "", size=360) -> str:
    """Minimal SVG line plot on the unit square; ``series`` maps a name to (xs, ys)."""
    pad = 40
    span = size - 2 * pad

    def pt(x, y):
        return f"{pad + x * span:.2f},{pad + (1 - y) * span:.2f}"

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="#888"/>',
        f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="12" y="{size / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 12 {size / 2})">{ylabel}</text>',
    ]
    if title:
        out.append(f'<text x="{size / 2}" y="20" text-anchor="middle" font-size="13">{title}</text>')
    for k, (name, (xs, ys)) in enumerate(series.items()):
        color = _COLORS[k % len(_COLORS)]
        pts = [(x, y) for x, y in zip(xs, ys) if x is not None and y is not None]
        if not pts:
            continue
        d = "M" + " L".join(pt(x, y) for x, y in pts)
        out.append(f'<path d="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{pad + 6}" y="{pad + 14 + 14 * k}" font-size="11" fill="{color}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def evaluate(v: Verdicts, rules=RULES, theta_grid=None) -> dict:
    """Precision/recall per rule plus per-rule ROC curves, AUCs and their envelope."""
    out = {"pr": {}, "curves": {}, "auc": {}}
    for rule in rules:
        out["pr"][rule] = precision_recall(v.truth, v.flags(rule))
    if v.resid_score is not None and v.reg is not None and v.hist is not None:
        for rule in ("T1", "T2", "T3"):
            pts, auc = roc_sweep(v, rule, theta_grid)
            out["curves"][rule] = pts
            out["auc"][rule] = auc
        f, t, auc = roc_envelope(out["curves"].values())
        out["envelope"] = (f, t)
        out["auc"]["envelope"] = auc
    return out


def report(outdir, evals: dict, verdicts: dict, rules=RULES) -> dict:
    """Write the CSV/summary/SVG bundle for several attack sets; returns written paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = {}
    for name, v in verdicts.items():
        p = outdir / f"verdicts_{name}.csv"
        write_csv(p, v, rules)
        written[f"csv_{name}"] = p
    table = summary_table({k: e["pr"] for k, e in evals.items()})
    auc_lines = []
    for name, e in evals.items():
        for rule, auc in e["auc"].items():
            auc_lines.append(f"AUC {name} {rule}: {100 * auc:.2f}%")
    counts = [f"{name}: {len(v)} items ({int(v.truth.sum())} adversarial)" for name, v in verdicts.items()]
    p = outdir / "summary.md"
    p.write_text(table + "\n" + "\n".join(auc_lines) + "\n\n" + "\n".join(counts) + "\n", encoding="utf-8")
    written["summary"] = p
    for name, e in evals.items():
        if not e["curves"]:
            continue
        roc = {r: ([q.fpr for q in pts], [q.tpr for q in pts]) for r, pts in e["curves"].items()}
        roc["envelope"] = (list(e["envelope"][0]), list(e["envelope"][1]))
        p = outdir / f"roc_{name}.svg"
        p.write_text(svg_lines(roc, "false positive rate", "true positive rate", f"ROC {name}"), encoding="utf-8")
        written[f"roc_{name}"] = p
        prc = {r: ([q.recall for q in pts if q.precision is not None], [q.precision for q in pts if q.precision is not None]) for r, pts in e["curves"].items()}
        p = outdir / f"pr_{name}.svg"
        p.write_text(svg_lines(prc, "recall", "precision", f"PR {name}"), encoding="utf-8")
        written[f"pr_{name}"] = p
    return written
