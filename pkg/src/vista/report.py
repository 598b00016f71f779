"""Run reports (desk-scale diagnostic datasets) and baseline comparisons."""

from __future__ import annotations

import csv
import json
import logging
import math
import shutil
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .collect import load_pool
from .core import Origin, QueryRecord
from .errors import UsageError
from .organize import read_jsonl
from .pipeline import PipelineConfig, Runner, RunState, run as run_pipeline
from .resample import ResamplePolicy

log = logging.getLogger("vista.report")

SKIPPED_MARKER = "stage skipped"


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def report(out_dir, report_dir: Optional[Path] = None) -> dict:
    """Build the report bundle for a completed (or partial) run directory."""
    out = Path(out_dir)
    state = RunState.load(out / "state.json")
    done_iters = [
        int(name.split("_")[1])
        for name, info in state.stages.items()
        if name.startswith("filter_") and info.get("done")
    ]
    if not done_iters:
        raise UsageError("run has no completed iteration to report on")
    t = max(done_iters)
    rep = Path(report_dir) if report_dir is not None else out / "report"
    rep.mkdir(parents=True, exist_ok=True)
    summary: dict = {"iterations": t, "markers": {}, "accuracy": {},
                     "dataset_sizes": {}, "conservation": {}}

    # accuracy per iteration
    for i in range(0, t + 1):
        metrics = state.metrics(f"eval_{i}")
        if "accuracy" in metrics:
            summary["accuracy"][str(i)] = metrics["accuracy"]
        if "sc_accuracy" in metrics:
            summary["accuracy"][f"{i}_self_consistency"] = metrics["sc_accuracy"]

    # dataset sizes, cross-checked against emitted line counts
    seed_sft = out / "seed_sft.jsonl"
    if seed_sft.exists():
        summary["dataset_sizes"]["seed_sft"] = len(read_jsonl(seed_sft))
    for i in range(1, t + 1):
        stage = state.stages.get(f"organize_{i}", {})
        art = stage.get("artifacts", {}).get("dataset")
        if art:
            n_lines = len(read_jsonl(out / art["path"]))
            summary["dataset_sizes"][f"iteration_{i}"] = n_lines
            recorded = stage.get("metrics", {}).get("n_emitted")
            if recorded is not None and recorded != n_lines:
                raise UsageError(
                    f"emitted count mismatch at iteration {i}: {recorded} != {n_lines}"
                )

    # correct-count histograms before/after resampling (final iteration)
    pool_before = load_pool(state.artifact(f"collect_{t}", "pool", out))
    pool_after = load_pool(state.artifact(f"resample_{t}", "merged", out))
    counts_b = {q: pool_before.correct_count(q) for q in pool_before.query_ids()}
    counts_a = {q: pool_after.correct_count(q) for q in pool_after.query_ids()}
    max_count = max(list(counts_b.values()) + list(counts_a.values()) + [0])
    rows = []
    for c in range(0, max_count + 1):
        rows.append([c,
                     sum(1 for v in counts_b.values() if v == c),
                     sum(1 for v in counts_a.values() if v == c)])
    _write_csv(rep / "counts_histogram.csv", ["correct_count", "n_queries_before", "n_queries_after"], rows)
    summary["histogram_total_queries"] = len(counts_b)

    # difficulty-level sample distribution
    diff_doc = json.loads((out / f"difficulty_{t}.json").read_text())
    level_rows = []
    for level in ("1", "2", "3", "4"):
        qids = diff_doc["levels"].get(level, [])
        n_pos = sum(counts_b.get(q, 0) for q in qids)
        level_rows.append([level, len(qids), n_pos])
    _write_csv(rep / "difficulty.csv", ["level", "n_queries", "n_positives"], level_rows)

    # resampling success analog
    stats = json.loads((out / f"resample_stats_{t}.json").read_text())
    n_attempts = state.metrics(f"resample_{t}").get("n_attempts", 0)
    if n_attempts == 0:
        (rep / "resample_success.csv").write_text(f"# {SKIPPED_MARKER}\n")
        summary["markers"]["resample"] = SKIPPED_MARKER
    else:
        hist = stats["success_histogram"]
        rows = [[int(k), v] for k, v in sorted(hist.items(), key=lambda kv: int(kv[0]))]
        _write_csv(rep / "resample_success.csv", ["rescued_correct", "n_queries"], rows)
        summary["resample"] = {
            "success_rate": stats["success_rate"],
            "mean_correct_before": stats["mean_correct_before"],
            "mean_correct_after": stats["mean_correct_after"],
        }

    # VAS z histogram
    score_rows = read_jsonl(state.artifact(f"score_{t}", "scores", out))
    zs = [row["z"] for row in score_rows if row.get("z") is not None]
    if not zs:
        (rep / "vas_hist.csv").write_text(f"# {SKIPPED_MARKER}\n")
        summary["markers"]["vas"] = SKIPPED_MARKER
    else:
        arr = np.asarray(zs, dtype=float)
        if arr.min() == arr.max():
            edges = np.array([arr.min(), arr.max()])
            hist = np.array([arr.size])
        else:
            hist, edges = np.histogram(arr, bins=20)
        rows = [[float(edges[i]), float(edges[i + 1]), int(hist[i])] for i in range(len(hist))]
        _write_csv(rep / "vas_hist.csv", ["bin_lo", "bin_hi", "count"], rows)

    # layer profile (copied from the scoring stage when present)
    profile_art = state.stages.get(f"score_{t}", {}).get("artifacts", {}).get("profile")
    if profile_art:
        shutil.copyfile(out / profile_art["path"], rep / "layer_profile.csv")
    else:
        (rep / "layer_profile.csv").write_text(f"# {SKIPPED_MARKER}\n")
        summary["markers"]["layer_profile"] = SKIPPED_MARKER

    # conservation identity
    cons = json.loads((out / f"conservation_{t}.json").read_text())
    summary["conservation"] = cons["totals"]

    with open(rep / "summary.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, sort_keys=True, indent=1)
        f.write("\n")
    _write_summary_md(rep / "summary.md", summary)
    return summary


def _write_summary_md(path: Path, summary: dict) -> None:
    lines = ["# Run summary", ""]
    lines.append("Difficulty orientation: level 1 = most correct solutions, level 4 = fewest.")
    lines.append("")
    lines.append("## Greedy accuracy per iteration")
    for key in sorted(summary["accuracy"]):
        lines.append(f"- iteration {key}: {summary['accuracy'][key]:.4f}")
    lines.append("")
    lines.append("## Dataset sizes")
    for key in sorted(summary["dataset_sizes"]):
        lines.append(f"- {key}: {summary['dataset_sizes'][key]}")
    if summary.get("resample"):
        r = summary["resample"]
        lines.append("")
        lines.append("## Prefix resampling")
        lines.append(f"- zero-correct rescue rate: {r['success_rate']:.3f}")
        lines.append(
            f"- mean correct per query: {r['mean_correct_before']:.3f} -> "
            f"{r['mean_correct_after']:.3f}"
        )
    if summary.get("conservation"):
        c = summary["conservation"]
        lines.append("")
        lines.append("## Conservation")
        lines.append(
            f"- filtered {c['filtered']} = merged {c['merged']} - dedup {c['dedup_removed']}"
            f" - vas {c['vas_removed']}"
        )
    for stage, marker in summary.get("markers", {}).items():
        lines.append(f"- {stage}: {marker}")
    path.write_text("\n".join(lines) + "\n")


# --- baseline comparison ---------------------------------------------------------


def baseline_variant(config: PipelineConfig, method: str) -> PipelineConfig:
    """Derive a baseline run config sharing the seed/compute budget."""
    base = PipelineConfig.from_dict(config.to_dict())
    if method == "vista":
        return base
    if method == "restem":
        base.J = 0
        base.tau = float("-inf")
        return base
    if method == "star":
        base.J = 0
        base.tau = float("-inf")
        base.K = 1
        base.temperature = 0.0
        return base
    if method == "rft":
        base.J = 0
        base.tau = float("-inf")
        base.K = config.T * config.K
        base.T = 1
        return base
    raise UsageError(f"unknown baseline {method!r}")


def compare_baselines(
    config: PipelineConfig,
    out_dir,
    queries: Optional[Sequence[QueryRecord]] = None,
    testset: Optional[Sequence[QueryRecord]] = None,
    methods: Sequence[str] = ("star", "restem", "rft", "vista"),
) -> list[dict]:
    """Run each method under a shared seed and emit a comparison table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    for method in methods:
        cfg = baseline_variant(config, method)
        state = run_pipeline(cfg, out / method, queries=queries, testset=testset)
        for t in range(1, cfg.T + 1):
            metrics = state.metrics(f"eval_{t}")
            organize = state.metrics(f"organize_{t}")
            pool_metrics = state.metrics(f"collect_{t}")
            rows.append(
                {
                    "method": method,
                    "iteration": t,
                    "accuracy": metrics.get("accuracy"),
                    "train_size": organize.get("n_emitted"),
                    "pool_size": pool_metrics.get("n_solutions"),
                }
            )
    with open(out / "comparison.json", "w", encoding="utf-8") as f:
        json.dump(rows, f, sort_keys=True, indent=1)
        f.write("\n")
    _write_csv(
        out / "comparison.csv",
        ["method", "iteration", "accuracy", "train_size", "pool_size"],
        [[r["method"], r["iteration"], r["accuracy"], r["train_size"], r["pool_size"]]
         for r in rows],
    )
    return rows
