"""Aggregate evaluation outputs into a comparison table plus figures.

The table is written twice (aligned text and CSV); alongside it two
matplotlib figures are rendered to PNG: a grouped accuracy bar chart and
a scatter of silhouette coefficient against mean robust accuracy.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import ParseError  # noqa: E402


def read_metrics(path) -> dict[str, float]:
    """Parse a flat key-value metrics file."""
    out: dict[str, float] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, ln in enumerate(f, start=1):
            ln = ln.strip()
            if not ln:
                continue
            parts = ln.split()
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected 'key value'")
            out[parts[0]] = float(parts[1])
    return out


def table_columns(runs: list[tuple[str, dict]]) -> list[str]:
    attack_cols = sorted({k for _, m in runs for k in m if k.startswith("attack_acc_")})
    cols = ["clean_acc"] + attack_cols
    if attack_cols:
        cols.append("avg_robust_acc")
    cols.append("sc")
    return cols


def _short(col: str) -> str:
    return col.replace("attack_acc_", "")


def format_table(runs: list[tuple[str, dict]]) -> str:
    cols = table_columns(runs)
    header = ["run"] + [_short(c) for c in cols]
    body = [[label] + ["%.4f" % m[c] if c in m else "-" for c in cols]
            for label, m in runs]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in body]
    return "\n".join(lines) + "\n"


def write_table_csv(runs: list[tuple[str, dict]], path) -> None:
    cols = table_columns(runs)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["run"] + [_short(c) for c in cols])
        for label, m in runs:
            writer.writerow([label] + ["%.17g" % m[c] if c in m else "" for c in cols])


def render_accuracy_figure(runs: list[tuple[str, dict]], path) -> None:
    cols = [c for c in table_columns(runs) if c != "sc"]
    labels = [label for label, _ in runs]
    fig, ax = plt.subplots(figsize=(1.8 + 1.2 * len(cols), 4))
    width = 0.8 / max(len(runs), 1)
    for i, (label, m) in enumerate(runs):
        xs = [j + i * width for j in range(len(cols))]
        ys = [m.get(c, 0.0) for c in cols]
        ax.bar(xs, ys, width=width, label=label)
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(cols))])
    ax.set_xticklabels([_short(c) for c in cols], rotation=20)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_sc_vs_robust_figure(runs: list[tuple[str, dict]], path) -> bool:
    pts = [(m["sc"], m["avg_robust_acc"], label) for label, m in runs
           if "sc" in m and "avg_robust_acc" in m]
    if len(pts) < 2:
        return False
    fig, ax = plt.subplots(figsize=(5, 4))
    for sc, robust, label in pts:
        ax.scatter(sc, robust, s=40)
        ax.annotate(label, (sc, robust), textcoords="offset points",
                    xytext=(5, 3), fontsize=8)
    ax.set_xlabel("silhouette coefficient (clean test features)")
    ax.set_ylabel("mean robust accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def write_report(runs: list[tuple[str, dict]], out_dir) -> list[str]:
    """Write table + figures under out_dir; returns the artifact names."""
    os.makedirs(out_dir, exist_ok=True)
    artifacts = ["report.txt", "report.csv", "report_accuracy.png"]
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8",
              newline="\n") as f:
        f.write(format_table(runs))
    write_table_csv(runs, os.path.join(out_dir, "report.csv"))
    render_accuracy_figure(runs, os.path.join(out_dir, "report_accuracy.png"))
    if render_sc_vs_robust_figure(runs, os.path.join(out_dir, "report_sc_vs_robust.png")):
        artifacts.append("report_sc_vs_robust.png")
    return artifacts
