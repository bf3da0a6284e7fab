"""Summary tables and SVG boxplots for a finished sweep."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path
from typing import Iterable
from xml.sax.saxutils import escape

import numpy as np

from .experiment import CONTROL
from .stats import (NO_TIER, QUANTILE_RULE, DegenerateTestError, aggregate, paired_t_test)

GROUP_KEYS = ("eval_point", "censor_method", "censor_mode", "projection")
STATS = ("min", "q1", "median", "q3", "max", "mean")


def _as_dict(r) -> dict:
    d = r if isinstance(r, dict) else r.as_dict()
    d = dict(d)
    if "lambda" in d and "lam" not in d:
        d["lam"] = d.pop("lambda")
    return d


def compare_to_control(rows: list[dict], controls: dict) -> dict:
    """Paired test of ``rows`` against the control of the same (seed, fold)."""
    a, b = [], []
    for r in rows:
        c = controls.get((r["seed"], r["fold"]))
        if c is not None and r["status"] == "ok" and c["status"] == "ok":
            a.append(r["test_ba"])
            b.append(c["test_ba"])
    out = {"n_pairs": len(a), "t": float("nan"), "df": len(a) - 1, "p": float("nan"),
           "tier": NO_TIER}
    if len(a) >= 2:
        try:
            res = paired_t_test(a, b)
            out.update(t=res.t, df=res.df, p=res.p, tier=res.tier)
        except DegenerateTestError:
            pass
    return out


def summarize(results: Iterable) -> list[dict]:
    """One row per (group, lambda) with quartiles and the paired test versus lambda=0."""
    rows = [_as_dict(r) for r in results]
    if not rows:
        raise ValueError("no results to report")
    controls = defaultdict(dict)
    for r in rows:
        if r["censor_method"] == CONTROL:
            controls[r["eval_point"]][(r["seed"], r["fold"])] = r
    out = []
    for entry in aggregate(rows, ("eval_point", "censor_method", "censor_mode", "projection", "lam"),
                           metrics=("test_ba", "overfit_ratio", "probe_ba")):
        members = [r for r in rows if all(r[k] == entry[k] for k in
                                          ("eval_point", "censor_method", "censor_mode",
                                           "projection", "lam"))]
        if entry["censor_method"] == CONTROL:
            entry.update(n_pairs=0, t=float("nan"), df=0, p=float("nan"), tier=NO_TIER)
        else:
            entry.update(compare_to_control(members, controls[entry["eval_point"]]))
        entry["quantile_rule"] = QUANTILE_RULE
        out.append(entry)
    return out


def write_summary(summary: list[dict], path):
    cols = ["eval_point", "censor_method", "censor_mode", "projection", "lambda", "n"]
    cols += [f"{m}_{s}" for m in ("test_ba", "overfit_ratio", "probe_ba") for s in STATS]
    cols += ["n_pairs", "t", "df", "p", "tier", "quantile_rule"]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for row in summary:
            row = dict(row, **{"lambda": row["lam"]})
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])


# --------------------------------------------------------------------------- #
# SVG


def _fmt_lam(lam: float) -> str:
    return f"{lam:g}"


def boxplot_svg(title: str, boxes: list[dict], control: dict | None) -> str:
    """Boxes are summary rows sorted by lambda; ``control`` is the lambda=0 summary row."""
    width = 90 + 70 * max(len(boxes), 1)
    height = 360
    top, bottom, left = 50, 300, 70
    values = [b[f"test_ba_{k}"] for b in boxes for k in ("min", "max")]
    if control is not None:
        values += [control[f"test_ba_{k}"] for k in ("q1", "median", "q3", "mean")]
    lo, hi = min(values), max(values)
    pad = max(0.02, 0.08 * (hi - lo))
    lo, hi = max(0.0, lo - pad), min(1.0, hi + pad)
    if hi <= lo:
        hi = lo + 0.01

    def y(v):
        return bottom - (v - lo) / (hi - lo) * (bottom - top)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="13">'
             f'{escape(title)}</text>',
             f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>',
             f'<line x1="{left}" y1="{bottom}" x2="{width - 20}" y2="{bottom}" stroke="black"/>']
    for tick in np.linspace(lo, hi, 6):
        parts.append(f'<line x1="{left - 4}" y1="{y(tick):.2f}" x2="{left}" y2="{y(tick):.2f}" '
                     f'stroke="black"/>')
        parts.append(f'<text x="{left - 6}" y="{y(tick) + 4:.2f}" text-anchor="end">'
                     f'{tick:.3f}</text>')
    parts.append(f'<text x="16" y="{(top + bottom) / 2:.1f}" text-anchor="middle" '
                 f'transform="rotate(-90 16 {(top + bottom) / 2:.1f})">test balanced accuracy</text>')
    parts.append(f'<text x="{(left + width - 20) / 2:.1f}" y="{bottom + 40}" '
                 f'text-anchor="middle">lambda</text>')
    if control is not None:
        styles = {"q1": "6,3", "median": "none", "q3": "6,3", "mean": "2,2"}
        for k, dash in styles.items():
            v = control[f"test_ba_{k}"]
            parts.append(f'<line class="control-{k}" x1="{left}" y1="{y(v):.2f}" '
                         f'x2="{width - 20}" y2="{y(v):.2f}" stroke="grey" '
                         f'stroke-dasharray="{dash}"/>')
    for i, b in enumerate(boxes):
        cx = left + 50 + 70 * i
        q1, med, q3 = (y(b[f"test_ba_{k}"]) for k in ("q1", "median", "q3"))
        ymin, ymax = y(b["test_ba_min"]), y(b["test_ba_max"])
        lam = _fmt_lam(b["lam"])
        parts.append(f'<g class="box" data-lambda="{lam}" data-tier="{escape(b["tier"])}">')
        parts.append(f'<line x1="{cx}" y1="{ymax:.2f}" x2="{cx}" y2="{q3:.2f}" stroke="black"/>')
        parts.append(f'<line x1="{cx}" y1="{q1:.2f}" x2="{cx}" y2="{ymin:.2f}" stroke="black"/>')
        for yy in (ymin, ymax):
            parts.append(f'<line x1="{cx - 8}" y1="{yy:.2f}" x2="{cx + 8}" y2="{yy:.2f}" '
                         f'stroke="black"/>')
        parts.append(f'<rect x="{cx - 20}" y="{q3:.2f}" width="40" height="{max(q1 - q3, 0.5):.2f}" '
                     f'fill="#9ecae1" stroke="black"/>')
        parts.append(f'<line x1="{cx - 20}" y1="{med:.2f}" x2="{cx + 20}" y2="{med:.2f}" '
                     f'stroke="black" stroke-width="2"/>')
        if b["tier"] != NO_TIER:
            parts.append(f'<text class="tier" x="{cx}" y="{ymax - 6:.2f}" text-anchor="middle" '
                         f'font-size="14">{escape(b["tier"])}</text>')
        parts.append(f'<text x="{cx}" y="{bottom + 16}" text-anchor="middle">{lam}</text>')
        parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(results: Iterable, out_dir) -> dict:
    """Write ``summary.csv`` and one SVG per (eval point, method, mode, projection)."""
    summary = summarize(results)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_summary(summary, out / "summary.csv")
    controls = {r["eval_point"]: r for r in summary if r["censor_method"] == CONTROL}
    groups = defaultdict(list)
    for r in summary:
        if r["censor_method"] != CONTROL:
            groups[tuple(r[k] for k in GROUP_KEYS)].append(r)
    figures = []
    for key in sorted(groups):
        boxes = sorted(groups[key], key=lambda r: r["lam"])
        ep, method, mode, proj = key
        name = f"boxplot_{ep}_{method}_{mode}_{proj}.svg"
        title = f"{method} / {mode} / {proj} projection / {ep} checkpoint"
        (out / name).write_text(boxplot_svg(title, boxes, controls.get(ep)), encoding="utf-8")
        figures.append(out / name)
    if not figures and controls:
        # a control-only sweep still gets its reference figure
        for ep, c in sorted(controls.items()):
            name = f"boxplot_{ep}_control.svg"
            (out / name).write_text(boxplot_svg(f"control / {ep} checkpoint", [], c), encoding="utf-8")
            figures.append(out / name)
    return {"summary": out / "summary.csv", "figures": figures}
