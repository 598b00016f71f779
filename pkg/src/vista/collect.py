"""Candidate collection: seed sets, K-sampling, partitioning, evaluation.

All sampling randomness is derived per (query, sample index) with
``stable_hash`` so pools are identical under any worker scheduling.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .backend import ModelBackend, SampleParams
from .core import (
    CandidatePool,
    Finish,
    Origin,
    QueryRecord,
    Solution,
    Trajectory,
    normalize_answer,
    render_prompt,
    verify,
)
from .errors import BackendError, IoError, UsageError
from .seeds import stable_hash

log = logging.getLogger("vista.collect")


@dataclass
class SeedConfig:
    demos: list[tuple[QueryRecord, Solution]] = field(default_factory=list)
    shots: int = 4
    seed_samples_per_query: int = 10

    def __post_init__(self):
        if self.shots > len(self.demos):
            raise UsageError("shots cannot exceed the number of demos")
        for _, sol in self.demos:
            if not sol.correct:
                raise UsageError("demos must be correct solutions")


def _prompt_tokens(backend: ModelBackend, query: QueryRecord) -> list[int]:
    delim = backend.capabilities().segment_delimiter
    return render_prompt(query.prompt, delimiter=delim)


def few_shot_prefix(backend: ModelBackend, cfg: SeedConfig) -> list[int]:
    tokens: list[int] = []
    for rec, sol in cfg.demos[: cfg.shots]:
        tokens.extend(_prompt_tokens(backend, rec))
        tokens.extend(sol.trajectory.tokens)
    return tokens


def _sample_one(
    backend: ModelBackend,
    prompt_tokens: list[int],
    params: SampleParams,
    seed: int,
) -> Trajectory:
    one = SampleParams(
        n=1, temperature=params.temperature, max_tokens=params.max_tokens, seed=seed
    )
    return backend.sample(prompt_tokens, one)[0]


def build_seed_set(
    backend: ModelBackend,
    queries: Sequence[QueryRecord],
    cfg: SeedConfig,
    params: SampleParams,
) -> list[Solution]:
    """One uniformly chosen correct few-shot-elicited solution per query.

    Queries for which no sampled candidate verifies are absent from the
    output; backend failures skip the query and are logged.
    """
    prefix = few_shot_prefix(backend, cfg)
    out: list[Solution] = []
    for query in queries:
        prompt = prefix + _prompt_tokens(backend, query)
        correct: list[Solution] = []
        try:
            for i in range(cfg.seed_samples_per_query):
                seed = stable_hash(params.seed, "seed", query.id, i)
                traj = _sample_one(backend, prompt, params, seed)
                if verify(traj.answer_text, query.gold_answer):
                    correct.append(
                        Solution(
                            query_id=query.id,
                            trajectory=traj,
                            correct=True,
                            origin=Origin.SEED,
                            sample_index=i,
                            seed=seed,
                        )
                    )
        except BackendError as e:
            log.warning("seed sampling failed for %s: %s", query.id, e)
            continue
        if correct:
            rng = np.random.default_rng(stable_hash(params.seed, "seed-pick", query.id))
            out.append(correct[int(rng.integers(len(correct)))])
    return out


def collect_candidates(
    backend: ModelBackend,
    queries: Sequence[QueryRecord],
    K: int,
    params: SampleParams,
    workers: int = 0,
) -> CandidatePool:
    """Exactly K verified candidates per query (minus backend failures)."""
    if K < 1:
        raise UsageError("K must be >= 1")
    prompts = {q.id: _prompt_tokens(backend, q) for q in queries}

    def unit(query: QueryRecord, i: int) -> Optional[Solution]:
        seed = stable_hash(params.seed, query.id, i)
        try:
            traj = _sample_one(backend, prompts[query.id], params, seed)
        except BackendError as e:
            log.warning("sample %d for %s failed: %s", i, query.id, e)
            return None
        return Solution(
            query_id=query.id,
            trajectory=traj,
            correct=verify(traj.answer_text, query.gold_answer),
            origin=Origin.DIRECT,
            sample_index=i,
            seed=seed,
        )

    units = [(q, i) for q in queries for i in range(K)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda u: unit(*u), units))
    else:
        results = [unit(q, i) for q, i in units]

    pool_out = CandidatePool()
    for (query, _), sol in zip(units, results):
        if query.id not in pool_out:
            pool_out._by_query.setdefault(query.id, [])
        if sol is not None:
            pool_out.add(query.id, sol)
    return pool_out


def partition(
    pool: CandidatePool,
) -> tuple[dict[str, list[Solution]], dict[str, list[Solution]]]:
    """Split each query's solutions into (positives, negatives), order kept."""
    positives: dict[str, list[Solution]] = {}
    negatives: dict[str, list[Solution]] = {}
    for qid in pool.query_ids():
        positives[qid] = pool.positives(qid)
        negatives[qid] = pool.negatives(qid)
    return positives, negatives


def hard_queries(pool: CandidatePool) -> list[str]:
    """Queries with zero correct solutions, the prefix-resampling targets."""
    return [qid for qid in pool.query_ids() if pool.correct_count(qid) == 0]


@dataclass
class DifficultyReport:
    """Quartile difficulty levels. Level 1 holds the queries with the most
    correct solutions, level 4 the fewest (the hardest)."""

    counts: dict[str, int]
    levels: dict[int, list[str]]
    histogram: dict[int, int]
    orientation: str = "level 1 = most correct solutions, level 4 = fewest"


def difficulty_levels(pool: CandidatePool) -> DifficultyReport:
    if not pool.query_ids():
        raise UsageError("pool is empty")
    counts = {qid: pool.correct_count(qid) for qid in pool.query_ids()}
    ascending = sorted(counts, key=lambda q: (counts[q], q))
    n = len(ascending)
    base, rem = divmod(n, 4)
    sizes = [base + (1 if i < rem else 0) for i in range(4)]  # hardest chunks first
    levels: dict[int, list[str]] = {}
    pos = 0
    for chunk, level in enumerate([4, 3, 2, 1]):
        levels[level] = ascending[pos : pos + sizes[chunk]]
        pos += sizes[chunk]
    histogram: dict[int, int] = {}
    for c in counts.values():
        histogram[c] = histogram.get(c, 0) + 1
    return DifficultyReport(counts=counts, levels=levels, histogram=histogram)


@dataclass
class EvalReport:
    accuracy: float
    n_correct: int
    n_total: int
    per_query: list[dict]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "n_correct": self.n_correct,
            "n_total": self.n_total,
            "per_query": self.per_query,
        }

    def save(self, path) -> None:
        try:
            with open(path, "w", encoding="utf-8") as f:
                json.dump(self.to_dict(), f, sort_keys=True, indent=1)
                f.write("\n")
        except OSError as e:
            raise IoError(f"cannot write eval report {path}: {e}") from e


def evaluate_greedy(
    backend: ModelBackend, testset: Sequence[QueryRecord], max_tokens: int = 128
) -> EvalReport:
    """Greedy-decoding accuracy; missing/unparseable answers count incorrect."""
    if not testset:
        raise UsageError("testset is empty")
    rows = []
    n_correct = 0
    for query in testset:
        answer = None
        try:
            traj = backend.sample(
                _prompt_tokens(backend, query),
                SampleParams(n=1, temperature=0.0, max_tokens=max_tokens, seed=0),
            )[0]
            answer = traj.answer_text
        except BackendError as e:
            log.warning("eval sample for %s failed: %s", query.id, e)
        ok = verify(answer, query.gold_answer)
        n_correct += ok
        rows.append(
            {"id": query.id, "correct": bool(ok), "answer": answer, "gold": query.gold_answer}
        )
    return EvalReport(
        accuracy=n_correct / len(testset),
        n_correct=n_correct,
        n_total=len(testset),
        per_query=rows,
    )


def majority_vote(answers: Sequence[Optional[str]]) -> Optional[str]:
    """Most frequent normalized answer; ties go to the earliest sample."""
    votes: dict[str, int] = {}
    first_seen: dict[str, int] = {}
    for i, ans in enumerate(answers):
        if ans is None:
            continue
        norm = normalize_answer(ans)
        votes[norm] = votes.get(norm, 0) + 1
        first_seen.setdefault(norm, i)
    if not votes:
        return None
    return min(votes, key=lambda a: (-votes[a], first_seen[a]))


def self_consistency(
    backend: ModelBackend,
    testset: Sequence[QueryRecord],
    n: int,
    temperature: float,
    max_tokens: int = 128,
    seed: int = 0,
) -> EvalReport:
    """Majority vote over n sampled answers per query."""
    if n < 1:
        raise UsageError("n must be >= 1")
    if not testset:
        raise UsageError("testset is empty")
    rows = []
    n_correct = 0
    for query in testset:
        answers: list[Optional[str]] = []
        prompt = _prompt_tokens(backend, query)
        for i in range(n):
            try:
                traj = _sample_one(
                    backend,
                    prompt,
                    SampleParams(n=1, temperature=temperature, max_tokens=max_tokens),
                    seed=0 if temperature == 0.0 else stable_hash(seed, "sc", query.id, i),
                )
                answers.append(traj.answer_text)
            except BackendError as e:
                log.warning("sc sample %d for %s failed: %s", i, query.id, e)
                answers.append(None)
        winner = majority_vote(answers)
        ok = verify(winner, query.gold_answer)
        n_correct += ok
        rows.append(
            {"id": query.id, "correct": bool(ok), "answer": winner, "gold": query.gold_answer}
        )
    return EvalReport(
        accuracy=n_correct / len(testset),
        n_correct=n_correct,
        n_total=len(testset),
        per_query=rows,
    )


# --- pool snapshots ----------------------------------------------------------


def solution_to_record(sol: Solution) -> dict:
    return {
        "query_id": sol.query_id,
        "origin": sol.origin.value,
        "correct": sol.correct,
        "tokens": list(sol.trajectory.tokens),
        "text": sol.trajectory.text,
        "answer": sol.trajectory.answer_text,
        "sample_index": sol.sample_index,
        "seed": sol.seed,
        "finish": sol.trajectory.finish.value,
    }


def solution_from_record(rec: dict) -> Solution:
    traj = Trajectory.from_text(
        rec["tokens"], rec["text"], Finish(rec.get("finish", "stop"))
    )
    return Solution(
        query_id=rec["query_id"],
        trajectory=traj,
        correct=bool(rec["correct"]),
        origin=Origin(rec["origin"]),
        sample_index=int(rec.get("sample_index", 0)),
        seed=int(rec.get("seed", 0)),
    )


def save_pool(pool: CandidatePool, path) -> int:
    """One JSONL line per solution, ordered by query id then list order."""
    n = 0
    try:
        with open(path, "w", encoding="utf-8") as f:
            for qid in sorted(pool.query_ids()):
                for sol in pool.solutions(qid):
                    f.write(json.dumps(solution_to_record(sol), sort_keys=True))
                    f.write("\n")
                    n += 1
    except OSError as e:
        raise IoError(f"cannot write pool {path}: {e}") from e
    return n


def load_pool(path, query_ids: Optional[Sequence[str]] = None) -> CandidatePool:
    pool = CandidatePool()
    if query_ids:
        for qid in query_ids:
            pool._by_query.setdefault(qid, [])
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                sol = solution_from_record(json.loads(line))
                pool.add(sol.query_id, sol)
    except OSError as e:
        raise IoError(f"cannot read pool {path}: {e}") from e
    return pool
