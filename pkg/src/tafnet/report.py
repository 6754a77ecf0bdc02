"""Report layer: CSV schemas shared between `eval` and `report`, and the
static plot/summary rendering."""

from __future__ import annotations

import csv
import os
from collections import defaultdict

import numpy as np

from .errors import IoError, SchemaError
from .evalstats import FoldResult, FriedmanResult, aggregate

METRICS = ("auc", "sensitivity", "f1")


def write_metrics_csv(path, results: dict[str, list[FoldResult]]) -> None:
    """method,fold,metric,value rows (full float precision)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "fold", "metric", "value"])
        for method, folds in results.items():
            for fold_id, fr in enumerate(folds):
                for metric in METRICS:
                    writer.writerow([method, fold_id, metric, repr(getattr(fr, metric))])


def read_metrics_csv(path) -> dict[str, dict[str, list[float]]]:
    """method -> metric -> per-fold values (fold order preserved)."""
    try:
        f = open(path, newline="")
    except OSError as e:
        raise IoError(f"cannot read metrics CSV {path}: {e}") from e
    with f:
        reader = csv.DictReader(f)
        needed = {"method", "fold", "metric", "value"}
        if reader.fieldnames is None or not needed.issubset(reader.fieldnames):
            raise SchemaError(f"metrics CSV must have columns {sorted(needed)}")
        rows = list(reader)
    out: dict[str, dict[str, dict[int, float]]] = defaultdict(lambda: defaultdict(dict))
    for row in rows:
        out[row["method"]][row["metric"]][int(row["fold"])] = float(row["value"])
    return {
        method: {
            metric: [vals[k] for k in sorted(vals)] for metric, vals in metrics.items()
        }
        for method, metrics in out.items()
    }


def write_stats_csv(path, pairwise_rows: list[dict], friedman_res: FriedmanResult,
                    methods: list[str]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["row_type", "comparison", "delta_auc", "wins", "ties",
                         "losses", "w_statistic", "p_value"])
        for row in pairwise_rows:
            writer.writerow([
                "wilcoxon", row["comparison"], repr(row["delta_auc"]), row["wins"],
                row["ties"], row["losses"], repr(row["w"]), repr(row["p"]),
            ])
        writer.writerow([
            "friedman",
            "omnibus",
            repr(friedman_res.chi2),
            "",
            "",
            "",
            repr(friedman_res.chi2_tie_corrected),
            "degenerate" if friedman_res.degenerate else "",
        ])
        for method, rank in zip(methods, friedman_res.mean_ranks):
            writer.writerow(["mean_rank", method, repr(rank), "", "", "", "", ""])


def write_roc_csv(path, per_method_points: dict[str, tuple]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "fpr", "tpr", "threshold"])
        for method, (fpr, tpr, thr) in per_method_points.items():
            for x, y, t in zip(fpr, tpr, thr):
                writer.writerow([method, repr(float(x)), repr(float(y)), repr(float(t))])


def write_learning_curve_csv(path, cells) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["fraction", "interval", "model", "mean_auc", "std_auc",
                         "n_pairs", "n_subjects", "absent"])
        for c in cells:
            writer.writerow([
                repr(c.fraction), c.interval, c.model,
                "" if c.absent else repr(c.mean_auc),
                "" if c.absent else repr(c.std_auc),
                c.n_pairs, c.n_subjects, int(c.absent),
            ])


def summarize_metrics(metrics: dict[str, dict[str, list[float]]]) -> str:
    """Human-readable mean +/- population-std block per method and metric."""
    lines = []
    for method, per_metric in metrics.items():
        lines.append(f"{method}:")
        for metric, values in per_metric.items():
            mean, std = aggregate(values)
            folds = ", ".join(f"{v:.3f}" for v in values)
            lines.append(f"  {metric}: {mean:.3f} ± {std:.3f}  (folds: {folds})")
    return "\n".join(lines) + "\n"


def render_report(out_dir, metrics_csv, stats_csv=None, roc_csv=None,
                  learning_curve_csv=None) -> str:
    """Render summary.txt plus ROC/box/bar/fold-line plots into `out_dir`."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    metrics = read_metrics_csv(metrics_csv)
    summary = summarize_metrics(metrics)
    methods = list(metrics)

    auc_per_method = {
        m: metrics[m].get("auc", []) for m in methods if metrics[m].get("auc")
    }
    if auc_per_method:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.boxplot(list(auc_per_method.values()), tick_labels=list(auc_per_method))
        ax.set_ylabel("AUC")
        ax.set_title("Per-fold AUC distribution")
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, "auc_box.png"), dpi=120)
        plt.close(fig)

        fig, ax = plt.subplots(figsize=(6, 4))
        for m, vals in auc_per_method.items():
            ax.plot(range(1, len(vals) + 1), vals, marker="o", label=m)
        ax.set_xlabel("fold")
        ax.set_ylabel("AUC")
        ax.legend(fontsize=8)
        ax.set_title("Fold-wise AUC")
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, "auc_folds.png"), dpi=120)
        plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.8 / max(1, len(METRICS))
    xs = np.arange(len(methods))
    for mi, metric in enumerate(METRICS):
        means = [
            aggregate(metrics[m][metric])[0] if metrics[m].get(metric) else 0.0
            for m in methods
        ]
        ax.bar(xs + mi * width, means, width, label=metric)
    ax.set_xticks(xs + width)
    ax.set_xticklabels(methods, rotation=15, fontsize=8)
    ax.legend(fontsize=8)
    ax.set_title("Mean metrics")
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "metric_bars.png"), dpi=120)
    plt.close(fig)

    if roc_csv and os.path.exists(roc_csv):
        points = defaultdict(lambda: ([], []))
        with open(roc_csv, newline="") as f:
            for row in csv.DictReader(f):
                points[row["method"]][0].append(float(row["fpr"]))
                points[row["method"]][1].append(float(row["tpr"]))
        fig, ax = plt.subplots(figsize=(5, 5))
        for m, (fx, ty) in points.items():
            ax.plot(fx, ty, label=m)
        ax.plot([0, 1], [0, 1], "k--", lw=0.8)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.set_title("Pooled ROC")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, "pooled_roc.png"), dpi=120)
        plt.close(fig)

    if learning_curve_csv and os.path.exists(learning_curve_csv):
        rows = []
        with open(learning_curve_csv, newline="") as f:
            rows = [r for r in csv.DictReader(f) if r["absent"] == "0"]
        if rows:
            fig, ax = plt.subplots(figsize=(6, 4))
            series = defaultdict(lambda: ([], []))
            for r in rows:
                key = f"{r['model']} @{r['interval']}m"
                series[key][0].append(float(r["fraction"]))
                series[key][1].append(float(r["mean_auc"]))
            for key, (fx, ay) in series.items():
                order = np.argsort(fx)
                ax.plot(np.array(fx)[order], np.array(ay)[order], marker="o",
                        label=key, lw=1)
            ax.set_xlabel("training fraction")
            ax.set_ylabel("mean AUC")
            ax.legend(fontsize=6)
            ax.set_title("Learning curves by interval")
            fig.tight_layout()
            fig.savefig(os.path.join(out_dir, "learning_curve.png"), dpi=120)
            plt.close(fig)

    if stats_csv and os.path.exists(stats_csv):
        with open(stats_csv) as f:
            summary += "\nstatistics:\n" + f.read()

    with open(os.path.join(out_dir, "summary.txt"), "w") as f:
        f.write(summary)
    return summary
