"""Prefix resampling: rescue failed trajectories via critical tokens.

A failed solution is replayed token-by-token under a perturbed query (by
default the visual/instruction segment swap). The first response token that
falls outside the model's top-k predictions under that perturbation is the
critical token; it is replaced by the perturbed top-1, everything after it
is truncated, and fresh continuations are sampled from the original query
plus the corrected prefix. Only continuations that verify are returned.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .backend import ModelBackend, SampleParams, TopKPrediction
from .core import (
    CandidatePool,
    EmbeddingNoise,
    Origin,
    QueryRecord,
    Role,
    Segment,
    SegmentedPrompt,
    Solution,
    TokenId,
    Trajectory,
    render_prompt,
    render_with_spans,
    verify,
)
from .errors import BackendError, CapabilityError, IoError, UsageError
from .seeds import stable_hash

log = logging.getLogger("vista.resample")


@dataclass(frozen=True)
class PerturbStrategy:
    kind: str  # "swap" | "mask" | "noise"
    mask_token: Optional[TokenId] = None
    sigma: float = 0.0
    noise_seed: int = 0

    @classmethod
    def swap(cls) -> "PerturbStrategy":
        return cls("swap")

    @classmethod
    def mask(cls, mask_token: TokenId) -> "PerturbStrategy":
        return cls("mask", mask_token=mask_token)

    @classmethod
    def noise(cls, sigma: float, noise_seed: int = 0) -> "PerturbStrategy":
        if sigma <= 0:
            raise UsageError("noise sigma must be positive")
        return cls("noise", sigma=sigma, noise_seed=noise_seed)


def perturb(prompt: SegmentedPrompt, strategy: PerturbStrategy) -> SegmentedPrompt:
    """Produce the self-calibration query for critical-token detection."""
    if strategy.kind == "swap":
        segments = list(prompt.segments)
        vis = next(i for i, s in enumerate(segments) if s.role == Role.VISUAL)
        ins = next(i for i, s in enumerate(segments) if s.role == Role.INSTRUCTION)
        segments[vis], segments[ins] = segments[ins], segments[vis]
        return prompt.with_segments(segments)
    if strategy.kind == "mask":
        if strategy.mask_token is None:
            raise UsageError("mask strategy requires a mask token")
        segments = [
            Segment(Role.VISUAL, tuple([strategy.mask_token] * len(s.tokens)))
            if s.role == Role.VISUAL
            else s
            for s in prompt.segments
        ]
        return prompt.with_segments(segments)
    if strategy.kind == "noise":
        return SegmentedPrompt(
            prompt.segments,
            query_id=prompt.query_id,
            noise=EmbeddingNoise(sigma=strategy.sigma, seed=strategy.noise_seed),
        )
    raise UsageError(f"unknown perturbation {strategy.kind!r}")


@dataclass(frozen=True)
class CriticalTokenReport:
    found: bool
    index: Optional[int] = None
    original: Optional[TokenId] = None
    replacement: Optional[TokenId] = None
    topk_at_index: Optional[TopKPrediction] = None


def locate_critical_token(
    backend: ModelBackend,
    perturbed: SegmentedPrompt,
    trajectory: Trajectory,
    k: int,
) -> CriticalTokenReport:
    """First trajectory token outside the perturbed-prompt top-k.

    Position 0 is checked against the prediction conditioned on the
    perturbed prompt alone; the replacement is that position's top-1.
    """
    if not trajectory.tokens:
        raise UsageError("trajectory has no tokens")
    if k < 1:
        raise UsageError("k must be >= 1")
    delim = backend.capabilities().segment_delimiter
    tokens, spans = render_with_spans(perturbed, delimiter=delim)
    kwargs = {}
    if perturbed.noise is not None:
        if not backend.capabilities().embedding_noise:
            raise CapabilityError("backend does not support embedding noise")
        kwargs["noise"] = (perturbed.noise, spans[Role.VISUAL])
    predictions = backend.teacher_forced_topk(
        tokens, list(trajectory.tokens), k, **kwargs
    )
    for pred, original in zip(predictions, trajectory.tokens):
        if original not in pred.token_ids():
            return CriticalTokenReport(
                found=True,
                index=pred.position,
                original=original,
                replacement=pred.top1,
                topk_at_index=pred,
            )
    return CriticalTokenReport(found=False)


def build_prefix(
    query: SegmentedPrompt,
    trajectory: Trajectory,
    report: CriticalTokenReport,
    delimiter: Optional[TokenId] = None,
) -> list[TokenId]:
    """Original-order prompt + kept tokens + replacement token."""
    if not report.found:
        raise UsageError("no critical token was found")
    prompt_tokens = render_prompt(query, delimiter=delimiter)
    return prompt_tokens + list(trajectory.tokens[: report.index]) + [report.replacement]


@dataclass
class ResampleAttempt:
    """Audit-log row for one failed-solution resampling attempt."""

    query_id: str
    strategy: str
    found: bool
    index: Optional[int]
    original: Optional[TokenId]
    replacement: Optional[TokenId]
    n_sampled: int
    n_correct: int

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "strategy": self.strategy,
            "found": self.found,
            "index": self.index,
            "original": self.original,
            "replacement": self.replacement,
            "n_sampled": self.n_sampled,
            "n_correct": self.n_correct,
        }


def prefix_resample(
    backend: ModelBackend,
    query: QueryRecord,
    failed: Solution,
    J: int,
    k: int,
    strategy: PerturbStrategy,
    params: SampleParams,
    decode: Optional[Callable[[Sequence[TokenId]], str]] = None,
    audit: Optional[list[ResampleAttempt]] = None,
) -> list[Solution]:
    """Correct continuations of one failed solution (possibly empty)."""
    if failed.correct:
        raise UsageError("prefix_resample expects a failed solution")
    decode = decode or backend.decode
    attempt = ResampleAttempt(
        query_id=query.id,
        strategy=strategy.kind,
        found=False,
        index=None,
        original=None,
        replacement=None,
        n_sampled=0,
        n_correct=0,
    )
    out: list[Solution] = []
    try:
        perturbed = perturb(query.prompt, strategy)
        report = locate_critical_token(backend, perturbed, failed.trajectory, k)
        if report.found:
            attempt.found = True
            attempt.index = report.index
            attempt.original = report.original
            attempt.replacement = report.replacement
            delim = backend.capabilities().segment_delimiter
            prefix = build_prefix(query.prompt, failed.trajectory, report, delimiter=delim)
            kept = list(failed.trajectory.tokens[: report.index]) + [report.replacement]
            for j in range(J):
                seed = stable_hash(
                    params.seed, query.id, failed.sample_index, "resample", j
                )
                traj = backend.sample(
                    prefix,
                    SampleParams(
                        n=1,
                        temperature=params.temperature,
                        max_tokens=params.max_tokens,
                        seed=seed,
                    ),
                )[0]
                attempt.n_sampled += 1
                full_tokens = kept + list(traj.tokens)
                full = Trajectory.from_text(full_tokens, decode(full_tokens), traj.finish)
                if verify(full.answer_text, query.gold_answer):
                    attempt.n_correct += 1
                    out.append(
                        Solution(
                            query_id=query.id,
                            trajectory=full,
                            correct=True,
                            origin=Origin.RESAMPLED,
                            sample_index=failed.sample_index,
                            seed=seed,
                        )
                    )
    except BackendError as e:
        log.warning("resampling %s/#%d failed: %s", query.id, failed.sample_index, e)
        out = []
    if audit is not None:
        audit.append(attempt)
    return out


@dataclass
class ResamplePolicy:
    """Which failed solutions get resampled.

    ``correct_floor``: only queries with fewer correct solutions than this
    are eligible (None means every query). Zero-correct queries go first.
    ``max_solutions_per_query`` caps how many failed solutions per query are
    attempted (None = all of them).
    """

    correct_floor: Optional[int] = None
    zero_first: bool = True
    max_solutions_per_query: Optional[int] = None

    def eligible_queries(self, pool: CandidatePool) -> list[str]:
        qids = []
        for qid in sorted(pool.query_ids()):
            n_correct = pool.correct_count(qid)
            if self.correct_floor is not None and n_correct >= self.correct_floor:
                continue
            if pool.negatives(qid):
                qids.append(qid)
        if self.zero_first:
            qids.sort(key=lambda q: (pool.correct_count(q) > 0, q))
        return qids


def resample_pool(
    backend: ModelBackend,
    queries: dict[str, QueryRecord],
    pool: CandidatePool,
    J: int,
    k: int,
    strategy: PerturbStrategy,
    params: SampleParams,
    policy: Optional[ResamplePolicy] = None,
    decode: Optional[Callable[[Sequence[TokenId]], str]] = None,
    audit: Optional[list[ResampleAttempt]] = None,
) -> list[Solution]:
    """Run prefix resampling across a pool per the policy; J=0 is a no-op."""
    if J == 0:
        return []
    policy = policy or ResamplePolicy()
    rescued: list[Solution] = []
    for qid in policy.eligible_queries(pool):
        failures = pool.negatives(qid)
        if policy.max_solutions_per_query is not None:
            failures = failures[: policy.max_solutions_per_query]
        for failed in failures:
            rescued.extend(
                prefix_resample(
                    backend, queries[qid], failed, J, k, strategy, params,
                    decode=decode, audit=audit,
                )
            )
    return rescued


def save_audit(audit: Sequence[ResampleAttempt], path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as f:
            for attempt in audit:
                f.write(json.dumps(attempt.to_dict(), sort_keys=True))
                f.write("\n")
    except OSError as e:
        raise IoError(f"cannot write resample audit {path}: {e}") from e


@dataclass
class ResampleStats:
    """Success statistics for the zero-correct queries of the before-pool."""

    zero_correct_queries: list[str]
    rescued_counts: dict[str, int]
    success_histogram: dict[int, int]
    success_rate: float
    mean_correct_before: float
    mean_correct_after: float

    def to_dict(self) -> dict:
        return {
            "zero_correct_queries": self.zero_correct_queries,
            "rescued_counts": self.rescued_counts,
            "success_histogram": self.success_histogram,
            "success_rate": self.success_rate,
            "mean_correct_before": self.mean_correct_before,
            "mean_correct_after": self.mean_correct_after,
        }


def resampling_report(pool_before: CandidatePool, pool_after: CandidatePool) -> ResampleStats:
    before_ids = set(pool_before.query_ids())
    if before_ids != set(pool_after.query_ids()):
        raise UsageError("pools must cover identical query sets")
    zero = sorted(q for q in before_ids if pool_before.correct_count(q) == 0)
    rescued = {
        q: sum(1 for s in pool_after.positives(q) if s.origin == Origin.RESAMPLED)
        for q in zero
    }
    histogram: dict[int, int] = {}
    for n in rescued.values():
        histogram[n] = histogram.get(n, 0) + 1
    n_queries = len(before_ids)
    mean_before = (
        sum(pool_before.correct_count(q) for q in before_ids) / n_queries
        if n_queries
        else 0.0
    )
    mean_after = (
        sum(pool_after.correct_count(q) for q in before_ids) / n_queries
        if n_queries
        else 0.0
    )
    success_rate = (
        sum(1 for n in rescued.values() if n > 0) / len(zero) if zero else 0.0
    )
    return ResampleStats(
        zero_correct_queries=zero,
        rescued_counts=rescued,
        success_histogram=histogram,
        success_rate=success_rate,
        mean_correct_before=mean_before,
        mean_correct_after=mean_after,
    )
