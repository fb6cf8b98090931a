"""Aggregate run directories into ``report.tsv`` plus PNG figures."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import numpy as np

from .training import format_cell, mean_std, parse_kv

KIND_ORDER = ["genmc", "t2t-vanilla", "t2t-enc", "weak-clue", "token-clue"]


def collect_runs(root: Path) -> dict[str, list[dict]]:
    """``model -> [metrics dict + history]`` for every ``metrics.txt`` under ``root``."""
    runs: dict[str, list[dict]] = defaultdict(list)
    for mpath in sorted(root.rglob("metrics.txt")):
        m = parse_kv(mpath.read_text(), str(mpath))
        hist = mpath.parent / "history.tsv"
        dev = []
        if hist.exists():
            rows = hist.read_text().splitlines()[1:]
            dev = [float(r.split("\t")[4]) for r in rows if r.strip()]
        m["dev_curve"] = dev
        m["path"] = str(mpath.parent)
        runs[m["model"]].append(m)
    if not runs:
        raise FileNotFoundError(str(root / "**" / "metrics.txt"))
    return runs


def _order(models) -> list[str]:
    return sorted(models, key=lambda k: (KIND_ORDER.index(k) if k in KIND_ORDER else 99, k))


def _pct(values) -> list[float]:
    return [100.0 * float(v) for v in values if v not in ("None", None)]


def report_table(runs: dict[str, list[dict]]) -> str:
    rows = ["model\tseeds\tdev_accuracy\ttest_accuracy\tparams"]
    for model in _order(runs):
        rs = sorted(runs[model], key=lambda r: int(r["seed"]))
        dev = _pct(r["dev_accuracy"] for r in rs)
        test = _pct(r["test_accuracy"] for r in rs)
        seeds = ",".join(r["seed"] for r in rs)
        rows.append(f"{model}\t{seeds}\t{format_cell(dev)}\t{format_cell(test) if test else '-'}\t"
                    f"{rs[0].get('params', '-')}")
    return "\n".join(rows) + "\n"


def plot_accuracy(runs, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    models = _order(runs)
    stats = [mean_std(_pct(r["test_accuracy"] for r in runs[m]) or [0.0]) for m in models]
    fig, ax = plt.subplots(figsize=(1.4 * len(models) + 2, 3.5))
    ax.bar(models, [s[0] for s in stats], yerr=[s[1] for s in stats], capsize=4, color="#4c72b0")
    ax.set_ylabel("test accuracy (%)")
    ax.set_ylim(0, 100)
    ax.set_title("mean test accuracy over seeds")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_dev_curves(runs, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for i, model in enumerate(_order(runs)):
        for j, r in enumerate(runs[model]):
            if r["dev_curve"]:
                epochs = np.arange(1, len(r["dev_curve"]) + 1)
                ax.plot(epochs, 100 * np.asarray(r["dev_curve"]), color=colors[i % len(colors)],
                        alpha=0.8, label=model if j == 0 else None)
    ax.set_xlabel("epoch")
    ax.set_ylabel("dev score (%)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(runs_dir: Path, out_dir: Path) -> str:
    runs = collect_runs(runs_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = report_table(runs)
    (out_dir / "report.tsv").write_text(table)
    plot_accuracy(runs, out_dir / "accuracy.png")
    plot_dev_curves(runs, out_dir / "dev_curves.png")
    return table
