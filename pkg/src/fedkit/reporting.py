"""CSV metrics logs and matplotlib figures written next to them.

All CSV output is deterministic: floats are written with shortest
round-trip repr and, in simulation mode, wall-clock durations are
recorded as 0 so repeated runs produce byte-identical files.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

METRICS_HEADER = ["round", "metric", "loss", "duration_ms", "selected_ids"]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_metrics_csv(records, path, deterministic: bool = True):
    """One row per round: round, metric, loss, duration_ms, selected_ids."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_HEADER)
        for r in records:
            dur = 0.0 if deterministic else round(r.duration_ms, 3)
            selected = ";".join(str(c) for c in r.selected)
            if r.error is not None:
                w.writerow([r.round_index, "error", r.error, _fmt(dur), selected])
            else:
                w.writerow([r.round_index, _fmt(r.metric), _fmt(r.loss), _fmt(dur), selected])


def write_rows_csv(header, rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def save_metric_curves(runs: dict[str, list], metric_name: str, path):
    """Two-panel figure: test metric and test loss per round, one line per run."""
    fig, (ax_m, ax_l) = plt.subplots(1, 2, figsize=(9, 3.5))
    for label, records in runs.items():
        ok = [r for r in records if r.error is None]
        rounds = [r.round_index for r in ok]
        ax_m.plot(rounds, [r.metric for r in ok], marker="o", ms=3, label=label)
        ax_l.plot(rounds, [r.loss for r in ok], marker="o", ms=3, label=label)
    ax_m.set_xlabel("round")
    ax_m.set_ylabel(metric_name)
    ax_l.set_xlabel("round")
    ax_l.set_ylabel("test loss")
    if runs:
        ax_m.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sweep_figure(rows, threshold: float, path):
    """Rounds-to-threshold vs selected clients, one line per local-epoch count.

    `rows` are (le, sc, repetition, rounds or None). Per (le, sc) the mean of
    the reached repetitions is plotted; cells never reaching are skipped.
    """
    by_le: dict[int, dict[int, list[int]]] = {}
    for le, sc, _rep, rounds in rows:
        if isinstance(rounds, int):
            by_le.setdefault(le, {}).setdefault(sc, []).append(rounds)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for le in sorted(by_le):
        scs = sorted(by_le[le])
        means = [sum(by_le[le][sc]) / len(by_le[le][sc]) for sc in scs]
        ax.plot(scs, means, marker="o", label=f"le={le}")
    ax.set_xlabel("selected clients (sc)")
    ax.set_ylabel(f"rounds to reach {threshold}")
    if by_le:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_focus_figure(scores_by_model: dict[str, list[float]], path):
    """Histogram of lung-focus scores per model."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, scores in scores_by_model.items():
        if scores:
            ax.hist(scores, bins=20, range=(0, 1), alpha=0.5, label=label)
    ax.set_xlabel("lung focus score")
    ax.set_ylabel("samples")
    if any(scores_by_model.values()):
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
