"""CSV tables derived from episode logs, and a reader for them.

Floats are written with ``repr`` so a table read back compares equal to
the values it was written from.
"""
from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Optional, Sequence

from .search import EpisodeLog, SweepRow

TRANSFORMER_KEYS = ("enc", "dec", "heads", "d_ff")
CNN_KEYS = ("c", "n", "h", "s", "log2_h", "log2_s")

EPISODE_HEADER = (
    "episode", "seed", "adopted_index", "adopted_metric", "original_metric",
    "valid_candidates", "n_candidates", "adopted_spec",
)
PARAM_COUNT_HEADER = ("episode", "param_count", "candidate_mean_param_count")
LOSS_CURVE_HEADER = ("episode", "step", "loss")
SWEEP_HEADER = ("n_candidates", "n_episodes", "total_candidates", "seed", "accuracy", "param_count")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _with_log2(params: dict) -> dict:
    out = dict(params)
    if "c" in out:
        for k in ("h", "s"):
            out[f"log2_{k}"] = math.log2(out[k]) if k in out else None
    return out


def _candidate_params(entry: EpisodeLog) -> list[dict]:
    from .dsl import design_params, parse

    out = []
    for r in entry.reports:
        if r["parse_status"] == "ok" and r["build_status"] == "ok":
            try:
                out.append(_with_log2(design_params(parse(r["candidate_text"]))))
            except Exception:  # noqa: BLE001
                continue
    return out


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return math.fsum(vals) / len(vals) if vals else None


def episode_rows(logs: Sequence[EpisodeLog]) -> list[dict]:
    rows = []
    for e in logs:
        valid = sum(r["parse_status"] == "ok" and r["build_status"] == "ok" and r["train_status"] == "ok" for r in e.reports)
        original = e.original.get("fewshot_loss") if e.original.get("accuracy") is None else e.original.get("accuracy")
        rows.append({
            "episode": e.episode, "seed": e.seed, "adopted_index": e.adopted_index,
            "adopted_metric": e.adopted_metric, "original_metric": original,
            "valid_candidates": valid, "n_candidates": len(e.reports), "adopted_spec": e.adopted_spec,
        })
    return rows


def design_param_keys(logs: Sequence[EpisodeLog]) -> tuple[str, ...]:
    return CNN_KEYS if logs and "c" in logs[0].design_params else TRANSFORMER_KEYS


def design_param_rows(logs: Sequence[EpisodeLog]) -> list[dict]:
    """One row per episode: adopted values and the mean over valid candidates."""
    keys = design_param_keys(logs)
    rows = []
    for e in logs:
        adopted = _with_log2(e.design_params)
        cands = _candidate_params(e)
        row = {"episode": e.episode}
        row.update({k: adopted.get(k) for k in keys})
        row.update({f"candidate_mean_{k}": _mean([c.get(k) for c in cands]) for k in keys})
        rows.append(row)
    return rows


def param_count_rows(logs: Sequence[EpisodeLog]) -> list[dict]:
    return [
        {
            "episode": e.episode,
            "param_count": e.param_count,
            "candidate_mean_param_count": _mean([r["param_count"] for r in e.reports if r["param_count"] is not None]),
        }
        for e in logs
    ]


def loss_curve_rows(logs: Sequence[EpisodeLog]) -> list[dict]:
    return [{"episode": e.episode, "step": i, "loss": v} for e in logs for i, v in enumerate(e.adopted_loss_curve)]


def refiner_loss_rows(logs: Sequence[EpisodeLog]) -> list[dict]:
    return [{"episode": e.episode, "step": i, "loss": v} for e in logs for i, v in enumerate(e.refiner.get("losses", []))]


def sweep_rows(rows: Sequence[SweepRow]) -> list[dict]:
    return [{k: getattr(r, k) for k in SWEEP_HEADER} for r in rows]


def _write(path: Path, header: Sequence[str], rows: Sequence[dict]) -> Path:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in header])
    return path


def emit_metrics(logs: Sequence[EpisodeLog], out_dir, sweep: Optional[Sequence[SweepRow]] = None, plots: bool = True) -> list[Path]:
    """Write the CSV tables (and PNG figures) for a run into ``out_dir``."""
    if not logs and not sweep:
        raise ValueError("nothing to emit: no episode logs and no sweep rows")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if logs:
        keys = design_param_keys(logs)
        written += [
            _write(out / "episodes.csv", EPISODE_HEADER, episode_rows(logs)),
            _write(out / "design_params.csv", ("episode",) + keys + tuple(f"candidate_mean_{k}" for k in keys), design_param_rows(logs)),
            _write(out / "param_counts.csv", PARAM_COUNT_HEADER, param_count_rows(logs)),
            _write(out / "loss_curves.csv", LOSS_CURVE_HEADER, loss_curve_rows(logs)),
        ]
        refiner = refiner_loss_rows(logs)
        if refiner:
            written.append(_write(out / "refiner_losses.csv", LOSS_CURVE_HEADER, refiner))
    if sweep:
        written.append(_write(out / "sweep.csv", SWEEP_HEADER, sweep_rows(sweep)))
    if plots:
        from .plotting import plot_all

        written += plot_all(out, logs, sweep)
    return written


def _parse_cell(text: str):
    if text == "":
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_table(path) -> list[dict]:
    """Read a CSV written by ``emit_metrics``; numeric cells become int/float."""
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        return [{k: (v if k == "adopted_spec" else _parse_cell(v)) for k, v in row.items()} for row in reader]
