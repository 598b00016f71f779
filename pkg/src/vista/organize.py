"""Dataset emission: SFT examples, preference pairs, dedup and caps.

Emitted files are UTF-8 JSONL with LF terminators and sorted keys, so equal
inputs produce byte-identical files.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    QueryRecord,
    Role,
    Solution,
    TokenId,
    matches_tag_grammar,
)
from .errors import IoError, UsageError
from .seeds import stable_hash

log = logging.getLogger("vista.organize")

Decoder = Callable[[Sequence[TokenId]], str]


@dataclass(frozen=True)
class SftExample:
    query_id: str
    system: str
    instruction: str
    visual: str
    target: str

    def __post_init__(self):
        if not matches_tag_grammar(self.target):
            raise UsageError(f"target for {self.query_id} violates the tag grammar")

    def to_dict(self) -> dict:
        return {
            "id": self.query_id,
            "system": self.system,
            "instruction": self.instruction,
            "visual": self.visual,
            "target": self.target,
        }


@dataclass(frozen=True)
class PreferencePair:
    query_id: str
    chosen: Solution
    rejected: Solution

    def __post_init__(self):
        if not self.chosen.correct or self.rejected.correct:
            raise UsageError("pairs need a correct chosen and an incorrect rejected")
        if self.chosen.query_id != self.query_id or self.rejected.query_id != self.query_id:
            raise UsageError("pair members must share the pair's query id")


def _visual_reference(query: QueryRecord) -> str:
    tokens = query.prompt.segment(Role.VISUAL).tokens
    return "toks:" + ",".join(str(t) for t in tokens)


def build_sft_examples(
    positives: Sequence[Solution],
    queries: dict[str, QueryRecord],
    decode: Decoder,
) -> tuple[list[SftExample], list[Solution]]:
    """SftExamples for grammar-conforming positives, plus the skipped rest.

    Targets that fail the tag grammar cannot be emitted as training text; they
    are returned separately and logged rather than silently dropped.
    """
    examples: list[SftExample] = []
    skipped: list[Solution] = []
    for sol in positives:
        if not sol.correct:
            raise UsageError("build_sft_examples accepts only correct solutions")
        query = queries[sol.query_id]
        if not matches_tag_grammar(sol.trajectory.text):
            log.info("skipping malformed target for %s/#%d", sol.query_id, sol.sample_index)
            skipped.append(sol)
            continue
        examples.append(
            SftExample(
                query_id=sol.query_id,
                system=decode(query.prompt.segment(Role.SYSTEM).tokens),
                instruction=decode(query.prompt.segment(Role.INSTRUCTION).tokens),
                visual=_visual_reference(query),
                target=sol.trajectory.text,
            )
        )
    return examples, skipped


def emit_sft(examples: Sequence[SftExample], path) -> int:
    """Write SFT JSONL in deterministic order; returns the record count."""
    ordered = sorted(enumerate(examples), key=lambda p: (p[1].query_id, p[0]))
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for _, ex in ordered:
                f.write(json.dumps(ex.to_dict(), sort_keys=True))
                f.write("\n")
    except OSError as e:
        raise IoError(f"cannot write SFT dataset {path}: {e}") from e
    return len(ordered)


def build_pairs(
    positives: Sequence[Solution],
    negatives: Sequence[Solution],
    rng_seed: int,
) -> list[PreferencePair]:
    """One pair per positive whose query has negatives, drawn uniformly.

    Positives on negative-free queries are skipped (and logged), not errors.
    """
    neg_by_query: dict[str, list[Solution]] = {}
    for neg in negatives:
        neg_by_query.setdefault(neg.query_id, []).append(neg)
    pairs: list[PreferencePair] = []
    counters: dict[str, int] = {}
    for pos in positives:
        pool = neg_by_query.get(pos.query_id)
        if not pool:
            log.info("no negatives for %s; skipping a positive", pos.query_id)
            continue
        ordinal = counters.get(pos.query_id, 0)
        counters[pos.query_id] = ordinal + 1
        rng = np.random.default_rng(stable_hash(rng_seed, "pair", pos.query_id, ordinal))
        rejected = pool[int(rng.integers(len(pool)))]
        pairs.append(PreferencePair(query_id=pos.query_id, chosen=pos, rejected=rejected))
    return pairs


def emit_pairs(
    pairs: Sequence[PreferencePair],
    queries: dict[str, QueryRecord],
    decode: Decoder,
    path,
) -> int:
    ordered = sorted(enumerate(pairs), key=lambda p: (p[1].query_id, p[0]))
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for _, pair in ordered:
                query = queries[pair.query_id]
                row = {
                    "id": pair.query_id,
                    "system": decode(query.prompt.segment(Role.SYSTEM).tokens),
                    "instruction": decode(query.prompt.segment(Role.INSTRUCTION).tokens),
                    "visual": _visual_reference(query),
                    "chosen": pair.chosen.trajectory.text,
                    "rejected": pair.rejected.trajectory.text,
                }
                f.write(json.dumps(row, sort_keys=True))
                f.write("\n")
    except OSError as e:
        raise IoError(f"cannot write pair dataset {path}: {e}") from e
    return len(ordered)


@dataclass
class DedupResult:
    kept: list[Solution]
    removed: list[Solution]


def dedup_and_cap(
    positives: Sequence[Solution],
    cap: Optional[int] = None,
    rng_seed: int = 0,
) -> DedupResult:
    """Collapse exact-duplicate token lists per query; optionally subsample.

    The earliest duplicate survives; capping draws uniformly per query and
    preserves the surviving solutions' original order.
    """
    if cap is not None and cap < 1:
        raise UsageError("cap must be >= 1 when set")
    by_query: dict[str, list[Solution]] = {}
    order: list[str] = []
    for sol in positives:
        if sol.query_id not in by_query:
            order.append(sol.query_id)
        by_query.setdefault(sol.query_id, []).append(sol)

    kept: list[Solution] = []
    removed: list[Solution] = []
    for qid in order:
        seen: set[tuple] = set()
        unique: list[Solution] = []
        for sol in by_query[qid]:
            key = tuple(sol.trajectory.tokens)
            if key in seen:
                removed.append(sol)
            else:
                seen.add(key)
                unique.append(sol)
        if cap is not None and len(unique) > cap:
            rng = np.random.default_rng(stable_hash(rng_seed, "cap", qid))
            chosen = sorted(rng.choice(len(unique), size=cap, replace=False).tolist())
            for i, sol in enumerate(unique):
                (kept if i in set(chosen) else removed).append(sol)
        else:
            kept.extend(unique)
    return DedupResult(kept=kept, removed=removed)


def read_jsonl(path) -> list[dict]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
