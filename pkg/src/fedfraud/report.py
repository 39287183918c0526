"""Sweep reporting: delimited records, an aligned text table, and figures.

Rows are newline-delimited JSON with sorted keys so a re-run of the same
(config, seed) cell reproduces its line byte for byte.  Aggregates group
rows per (protocol, epsilon) and carry mean / standard error / 95%
interval for every numeric metric.
"""

from __future__ import annotations

import json
import math
import os

from .errors import ConfigError
from .metrics import aggregate_repeats

UTILITY_METRICS = (
    "auc_pr",
    "auc_roc",
    "tpr_at_fpr_0.01",
    "tpr_at_fpr_0.005",
    "tpr_at_fpr_0.001",
)
ATTACK_METRICS = (
    "inversion_mean_r2",
    "inversion_best_r2",
    "attribute_accuracy",
    "attribute_frequency_baseline",
    "membership_f_score",
    "membership_baseline",
)


def row_line(row) -> str:
    return json.dumps(row, sort_keys=True)


def write_rows(path, rows, append=False):
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8") as fh:
        for row in rows:
            fh.write(row_line(row) + "\n")


def read_rows(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def _eps_sort_key(text):
    value = math.inf if text == "inf" else float(text)
    return value


def aggregate(rows):
    """Per-(protocol, epsilon) means with standard errors, ordered by budget."""
    groups: dict[tuple, list] = {}
    for row in rows:
        groups.setdefault((row["protocol"], row["epsilon"]), []).append(row)
    out = []
    for (protocol, eps) in sorted(groups, key=lambda k: (k[0], _eps_sort_key(k[1]))):
        cell_rows = groups[(protocol, eps)]
        agg = {"protocol": protocol, "epsilon": eps, "repeats": len(cell_rows)}
        metric_keys = [k for k in cell_rows[0]
                       if isinstance(cell_rows[0][k], (int, float)) and k != "seed"]
        for key in metric_keys:
            samples = [r[key] for r in cell_rows if key in r]
            if len(samples) >= 2:
                s = aggregate_repeats(samples)
                agg[key] = {"mean": s.mean, "std_error": s.std_error,
                            "ci_low": s.ci_low, "ci_high": s.ci_high}
            else:
                agg[key] = {"mean": float(samples[0]), "std_error": 0.0,
                            "ci_low": float(samples[0]), "ci_high": float(samples[0])}
        out.append(agg)
    return out


def render_table(aggregates, metrics_keys=None) -> str:
    """Aligned text table, one row per budget, mean +/- SE per metric."""
    if not aggregates:
        raise ConfigError("nothing to tabulate")
    if metrics_keys is None:
        metrics_keys = [k for k in UTILITY_METRICS + ATTACK_METRICS
                        if k in aggregates[0]]
    headers = ["protocol", "epsilon", "n"] + list(metrics_keys)
    table = [headers]
    for agg in aggregates:
        row = [agg["protocol"], agg["epsilon"], str(agg["repeats"])]
        for key in metrics_keys:
            cell = agg.get(key)
            row.append("-" if cell is None
                       else f"{cell['mean']:.4f}±{cell['std_error']:.4f}")
        table.append(row)
    widths = [max(len(r[i]) for r in table) for i in range(len(headers))]
    lines = []
    for i, row in enumerate(table):
        lines.append("  ".join(cell.ljust(widths[j]) for j, cell in enumerate(row)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * widths[j] for j in range(len(headers))))
    return "\n".join(lines) + "\n"


def write_delimited(path, aggregates, metrics_keys=None):
    """Tab-separated aggregate report (mean, SE, CI per metric column)."""
    if metrics_keys is None:
        metrics_keys = [k for k in UTILITY_METRICS + ATTACK_METRICS
                        if aggregates and k in aggregates[0]]
    cols = ["protocol", "epsilon", "repeats"]
    for key in metrics_keys:
        cols += [f"{key}_mean", f"{key}_se", f"{key}_ci_low", f"{key}_ci_high"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(cols) + "\n")
        for agg in aggregates:
            cells = [agg["protocol"], agg["epsilon"], str(agg["repeats"])]
            for key in metrics_keys:
                c = agg.get(key)
                if c is None:
                    cells += ["", "", "", ""]
                else:
                    cells += [repr(c["mean"]), repr(c["std_error"]),
                              repr(c["ci_low"]), repr(c["ci_high"])]
            fh.write("\t".join(cells) + "\n")


def _series(aggregates, key):
    xs, means, lo, hi = [], [], [], []
    for i, agg in enumerate(aggregates):
        cell = agg.get(key)
        if cell is None:
            continue
        xs.append(i)
        means.append(cell["mean"])
        lo.append(cell["ci_low"])
        hi.append(cell["ci_high"])
    return xs, means, lo, hi


def render_figures(aggregates, out_dir):
    """Metric-versus-budget figures with 95% bands; returns written paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not aggregates:
        raise ConfigError("nothing to plot")
    labels = [a["epsilon"] for a in aggregates]
    paths = []

    def panel(path, keys, title, ylabel):
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for key, style in keys:
            xs, means, lo, hi = _series(aggregates, key)
            if not xs:
                continue
            ax.plot(xs, means, style, label=key)
            ax.fill_between(xs, lo, hi, alpha=0.15)
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels)
        ax.set_xlabel("privacy budget epsilon")
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)

    panel(os.path.join(out_dir, "utility_vs_epsilon.png"),
          [("auc_pr", "o-"), ("auc_roc", "s-"), ("tpr_at_fpr_0.01", "^-")],
          "Detection utility vs privacy budget", "metric value")
    if any("membership_f_score" in a for a in aggregates):
        panel(os.path.join(out_dir, "attacks_vs_epsilon.png"),
              [("inversion_mean_r2", "o-"), ("attribute_accuracy", "s-"),
               ("attribute_frequency_baseline", "s--"),
               ("membership_f_score", "^-"), ("membership_baseline", "^--")],
              "Attack success vs privacy budget", "attack metric")
    return paths
