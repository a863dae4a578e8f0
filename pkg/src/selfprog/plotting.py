"""PNG figures rendered next to the CSV tables (headless, reproducible)."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# no software/version stamp so identical data gives identical bytes
_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_loss_curves(logs, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for e in logs:
        if e.adopted_loss_curve:
            ax.plot(e.adopted_loss_curve, label=f"model {e.episode}", linewidth=1)
    ax.set_xlabel("training step")
    ax.set_ylabel("loss")
    ax.set_title("adopted model loss per episode")
    if len(logs) <= 12:
        ax.legend(fontsize=7)
    return _save(fig, path)


def plot_design_params(rows: Sequence[dict], keys: Sequence[str], path: Path) -> Path:
    show = [k for k in keys if k not in ("h", "s")]
    fig, ax = plt.subplots(figsize=(6, 4))
    episodes = [r["episode"] for r in rows]
    for k in show:
        vals = [r.get(f"candidate_mean_{k}") for r in rows]
        ax.plot(episodes, [float("nan") if v is None else v for v in vals], marker="o", label=k)
    ax.set_xlabel("episode")
    ax.set_ylabel("mean over candidates")
    ax.set_title("design parameters")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_param_counts(rows: Sequence[dict], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([r["episode"] for r in rows], [r["param_count"] for r in rows], marker="o", label="adopted")
    mean = [r["candidate_mean_param_count"] for r in rows]
    ax.plot([r["episode"] for r in rows], [float("nan") if v is None else v for v in mean], marker="x", label="candidate mean")
    ax.set_xlabel("episode")
    ax.set_ylabel("parameters")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_sweep(sweep, path: Path) -> Path:
    by_n = defaultdict(lambda: defaultdict(list))
    for r in sweep:
        if r.accuracy is not None:
            by_n[r.n_candidates][r.total_candidates].append(r.accuracy)
    fig, ax = plt.subplots(figsize=(6, 4))
    for n in sorted(by_n):
        totals = sorted(by_n[n])
        ax.plot(totals, [sum(by_n[n][t]) / len(by_n[n][t]) for t in totals], marker="o", label=f"n={n}")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("total candidates tested")
    ax.set_ylabel("adopted accuracy")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_all(out: Path, logs, sweep: Optional[Sequence] = None) -> list[Path]:
    from .metrics import design_param_keys, design_param_rows, param_count_rows

    paths = []
    if logs:
        paths.append(plot_loss_curves(logs, out / "loss_curves.png"))
        paths.append(plot_design_params(design_param_rows(logs), design_param_keys(logs), out / "design_params.png"))
        paths.append(plot_param_counts(param_count_rows(logs), out / "param_counts.png"))
    if sweep:
        paths.append(plot_sweep(sweep, out / "sweep.png"))
    return paths
