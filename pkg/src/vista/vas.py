"""Vision-aware attention scoring and threshold filtering.

Each correct solution's raw score is the share of prompt-directed attention
mass that lands on visual tokens, taken from the middle layer over the full
response span. Raw scores are z-normalized within each query's positives
(population std); solutions below the threshold are filtered out.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .backend import (
    AttentionSpan,
    LayerSelector,
    ModelBackend,
    SampleParams,
)
from .core import QueryRecord, Solution
from .errors import BackendError, IoError, UsageError

log = logging.getLogger("vista.vas")


@dataclass(frozen=True)
class VasScore:
    raw: float
    z: float
    group_id: str
    group_size: int
    # the Eq. 3 sums behind raw; carried so score files can include them
    lambda_sys: Optional[float] = None
    lambda_vis: Optional[float] = None
    lambda_ins: Optional[float] = None


@dataclass(frozen=True)
class VasConfig:
    layer: LayerSelector = field(default_factory=LayerSelector.middle)
    tau: float = -0.5
    head_aggregation: str = "mean"  # fixed; documented for the record


def score_solutions(
    backend: ModelBackend,
    query: QueryRecord,
    positives: Sequence[Solution],
    cfg: VasConfig,
) -> list[Optional[VasScore]]:
    """Raw and z-normalized visual-attention scores, aligned with positives.

    Entries are None when the backend failed for that solution (the solution
    stays unscored and is later kept by the filter). Groups of size one or
    zero spread score z = 0 for every member.
    """
    if not positives:
        raise UsageError("positives must be non-empty")
    for sol in positives:
        if sol.query_id != query.id:
            raise UsageError("solution does not belong to the query")
    allocs: list[Optional[tuple[float, float, float]]] = []
    raws: list[Optional[float]] = []
    for sol in positives:
        try:
            alloc = backend.segment_attention(
                query.prompt,
                list(sol.trajectory.tokens),
                cfg.layer,
                AttentionSpan.ALL_RESPONSE,
            )
            total = alloc.total
            allocs.append((alloc.lambda_sys, alloc.lambda_vis, alloc.lambda_ins))
            raws.append(alloc.lambda_vis / total if total > 0 else 0.0)
        except BackendError as e:
            log.warning("scoring failed for %s/#%d: %s", query.id, sol.sample_index, e)
            allocs.append(None)
            raws.append(None)
    scored = [r for r in raws if r is not None]
    group_size = len(scored)
    if group_size >= 2:
        mean = float(np.mean(scored))
        std = float(np.std(scored))  # population std
    else:
        mean, std = 0.0, 0.0
    out: list[Optional[VasScore]] = []
    for r, lam in zip(raws, allocs):
        if r is None:
            out.append(None)
        else:
            z = (r - mean) / std if std > 0 else 0.0
            out.append(
                VasScore(raw=r, z=z, group_id=query.id, group_size=group_size,
                         lambda_sys=lam[0], lambda_vis=lam[1], lambda_ins=lam[2])
            )
    return out


@dataclass
class VasFilterResult:
    kept: list[Solution]
    removed: list[Solution]

    def __iter__(self):
        return iter(self.kept)

    def __len__(self):
        return len(self.kept)


def filter_by_vas(
    positives: Sequence[Solution],
    scores: Sequence[Optional[VasScore]],
    tau: float,
) -> VasFilterResult:
    """Keep solutions with z >= tau; unscored solutions are always kept."""
    if len(positives) != len(scores):
        raise UsageError("scores must align one-to-one with positives")
    kept: list[Solution] = []
    removed: list[Solution] = []
    for sol, score in zip(positives, scores):
        annotated = replace_vas(sol, score)
        if score is None or score.z >= tau:
            kept.append(annotated)
        else:
            removed.append(annotated)
    return VasFilterResult(kept=kept, removed=removed)


def replace_vas(sol: Solution, score: Optional[VasScore]) -> Solution:
    return Solution(
        query_id=sol.query_id,
        trajectory=sol.trajectory,
        correct=sol.correct,
        origin=sol.origin,
        vas=score,
        sample_index=sol.sample_index,
        seed=sol.seed,
    )


def save_scores(
    query_id: str,
    positives: Sequence[Solution],
    scores: Sequence[Optional[VasScore]],
    kept_flags: Sequence[bool],
    fh,
) -> None:
    """Append JSONL score rows for one query to an open file handle."""
    for idx, (sol, score, kept) in enumerate(zip(positives, scores, kept_flags)):
        row = {
            "query_id": query_id,
            "solution_index": idx,
            "origin": sol.origin.value,
            "lambda_sys": None if score is None else score.lambda_sys,
            "lambda_vis": None if score is None else score.lambda_vis,
            "lambda_ins": None if score is None else score.lambda_ins,
            "raw": None if score is None else score.raw,
            "z": None if score is None else score.z,
            "kept": bool(kept),
        }
        fh.write(json.dumps(row, sort_keys=True))
        fh.write("\n")


# --- diagnostics -------------------------------------------------------------


def attention_profile_report(
    backend: ModelBackend,
    queries: Sequence[QueryRecord],
    layers: Optional[Sequence[int]] = None,
    max_tokens: int = 1,
) -> list[dict]:
    """Mean first-token attention shares per layer over a query sample.

    Rows: {layer, share_sys, share_vis, share_ins}, each row normalized to
    sum to one over the three roles.
    """
    if not queries:
        raise UsageError("query sample must be non-empty")
    layer_count = backend.capabilities().layer_count
    wanted = list(layers) if layers is not None else list(range(layer_count))
    sums = {l: np.zeros(3) for l in wanted}
    counted = 0
    for query in queries:
        from .core import render_prompt  # local import avoids cycle at module load

        delim = backend.capabilities().segment_delimiter
        prompt_tokens = render_prompt(query.prompt, delimiter=delim)
        try:
            first = backend.sample(
                prompt_tokens,
                SampleParams(n=1, temperature=0.0, max_tokens=max_tokens, seed=0),
            )[0].tokens[0]
            profile = backend.layer_profile(query.prompt, first)
        except BackendError as e:
            log.warning("profile failed for %s: %s", query.id, e)
            continue
        counted += 1
        for l in wanted:
            sums[l] += np.asarray(profile[l].shares())
    if counted == 0:
        raise BackendError("no query in the sample could be profiled")
    rows = []
    for l in wanted:
        shares = sums[l] / counted
        rows.append(
            {
                "layer": l,
                "share_sys": float(shares[0]),
                "share_vis": float(shares[1]),
                "share_ins": float(shares[2]),
            }
        )
    return rows


def save_profile_csv(rows: Sequence[dict], path) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(
                f, fieldnames=["layer", "share_sys", "share_vis", "share_ins"]
            )
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
    except OSError as e:
        raise IoError(f"cannot write profile CSV {path}: {e}") from e


@dataclass
class VasDistribution:
    bin_edges: list[float]
    counts: list[int]
    group_means: Optional[dict[str, float]] = None

    def to_dict(self) -> dict:
        out = {"bin_edges": self.bin_edges, "counts": self.counts}
        if self.group_means is not None:
            out["group_means"] = self.group_means
        return out


def vas_distribution_report(
    scores: Sequence[VasScore],
    labels: Optional[Sequence[str]] = None,
    bins: int = 20,
) -> VasDistribution:
    """Histogram of z values, with per-label means when labels are given."""
    zs = np.asarray([s.z for s in scores], dtype=float)
    if zs.size == 0:
        return VasDistribution(bin_edges=[], counts=[], group_means=None)
    if np.min(zs) == np.max(zs):
        edges = [float(zs[0]), float(zs[0])]
        counts = [int(zs.size)]
    else:
        hist, bin_edges = np.histogram(zs, bins=bins)
        edges = [float(e) for e in bin_edges]
        counts = [int(c) for c in hist]
    group_means = None
    if labels is not None:
        if len(labels) != len(scores):
            raise UsageError("labels must align with scores")
        group_means = {}
        for label in sorted(set(labels)):
            vals = [s.z for s, l in zip(scores, labels) if l == label]
            group_means[label] = float(np.mean(vals))
    return VasDistribution(bin_edges=edges, counts=counts, group_means=group_means)
