"""CSV tables and dependency-free SVG line charts from metric logs."""

import csv
import html
import os

from .metrics import select_best_checkpoint

SERIES = {
    "loss": ("l_nat", "l_adv", "l_total"),
    "relative_loss": ("rel_nat", "rel_adv"),
    "entropy": ("h_nat", "h_adv"),
    "temperature": ("tau_nat", "tau_adv"),
    "weights": ("w_nat", "w_adv"),
    "w_robust": ("w_robust", "clean_acc", "robust_acc"),
}
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def record_row(rec):
    row = {"epoch": rec.epoch, "clean_acc": rec.clean_acc,
           "robust_acc": rec.robust_acc[rec.attack], "w_robust": rec.w_robust}
    row.update(rec.controller)
    return row


def write_csv(rows, path):
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def line_chart(series, title, width=480, height=300, pad=40):
    """``series`` maps a label to a list of ``(x, y)``; None values are skipped."""
    pts = [(x, y) for s in series.values() for x, y in s if y is not None]
    if not pts:
        pts = [(0, 0), (1, 1)]
    xs, ys = zip(*pts)
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<title>{html.escape(title)}</title>',
           f'<text x="{width / 2}" y="16" text-anchor="middle" font-size="13">{html.escape(title)}</text>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
           f'<text x="{pad}" y="{height - pad + 14}" font-size="10">{x0:g}</text>',
           f'<text x="{width - pad}" y="{height - pad + 14}" font-size="10" text-anchor="end">{x1:g}</text>',
           f'<text x="{pad - 4}" y="{height - pad}" font-size="10" text-anchor="end">{y0:.3g}</text>',
           f'<text x="{pad - 4}" y="{pad + 4}" font-size="10" text-anchor="end">{y1:.3g}</text>']
    for i, (label, data) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        valid = [(x, y) for x, y in data if y is not None]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in valid)
        name = html.escape(label)
        out.append(f'<g class="series" data-series="{name}">')
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        for x, y in valid:
            out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2" fill="{color}"/>')
        out.append("</g>")
        out.append(f'<text x="{width - pad}" y="{pad + 12 * i}" font-size="10" fill="{color}" '
                   f'text-anchor="end">{name}</text>')
    out.append("</svg>")
    return "\n".join(out)


def build_report(runs, out_dir):
    """Write per-run curve CSVs, a summary CSV and one SVG per quantity.

    ``runs`` maps a run label to its list of MetricRecord. Returns the
    written paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []
    summary = []
    per_run_rows = {}
    for label, history in runs.items():
        rows = [record_row(r) for r in history]
        per_run_rows[label] = rows
        path = os.path.join(out_dir, f"{label}_curves.csv")
        write_csv(rows, path)
        written.append(path)
        best = select_best_checkpoint(history)
        rec = next(r for r in history if r.epoch == best)
        summary.append({"run": label, "best_epoch": best, "clean_acc": rec.clean_acc,
                        **{f"robust_{k}": v for k, v in rec.robust_acc.items()}, "w_robust": rec.w_robust})
    path = os.path.join(out_dir, "summary.csv")
    write_csv(summary, path)
    written.append(path)
    multi = len(runs) > 1
    for name, keys in SERIES.items():
        series = {}
        for label, rows in per_run_rows.items():
            for key in keys:
                if any(r.get(key) is not None for r in rows):
                    series[f"{label}:{key}" if multi else key] = [(r["epoch"], r.get(key)) for r in rows]
        path = os.path.join(out_dir, f"{name}.svg")
        with open(path, "w") as f:
            f.write(line_chart(series, name.replace("_", " ")))
        written.append(path)
    return written
