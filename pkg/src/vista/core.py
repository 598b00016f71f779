"""Domain types and token/segment algebra shared by every stage.

Queries are role-tagged token segments (system / visual / instruction);
responses are token trajectories whose text carries the reasoning and the
final answer inside ``<think></think>`` / ``<answer></answer>`` tags.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import TYPE_CHECKING, Iterable, Iterator, Optional, Sequence

from .errors import PermutationError, UsageError

if TYPE_CHECKING:
    from .vas import VasScore

TokenId = int

# Default system prompt for real-text backends (the toy task uses its own
# compact token vocabulary instead).
DEFAULT_SYSTEM_PROMPT = (
    "A conversation between User and Assistant. The user asks a question, and "
    "the Assistant solves it. The assistant first thinks about the reasoning "
    "process in the mind and then provides the user a concise final answer in "
    "a short word or phrase. The reasoning process and answer are enclosed "
    "within <think> </think> and <answer> </answer> tags, respectively, i.e., "
    "<think> reasoning process here </think><answer> answer here </answer>."
)


class Role(str, Enum):
    SYSTEM = "system"
    VISUAL = "visual"
    INSTRUCTION = "instruction"
    RESPONSE = "response"


PROMPT_ROLES = (Role.SYSTEM, Role.VISUAL, Role.INSTRUCTION)
DEFAULT_ORDER = list(PROMPT_ROLES)


class Finish(str, Enum):
    STOP = "stop"
    LENGTH_LIMIT = "length_limit"


class Origin(str, Enum):
    SEED = "seed"
    DIRECT = "direct"
    RESAMPLED = "resampled"


@dataclass(frozen=True)
class EmbeddingNoise:
    """Descriptor asking a backend to perturb visual-token embeddings."""

    sigma: float
    seed: int


@dataclass(frozen=True)
class Segment:
    role: Role
    tokens: tuple[TokenId, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if self.role in PROMPT_ROLES and not self.tokens:
            raise UsageError(f"{self.role.value} segment must be non-empty")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class SegmentedPrompt:
    """A query: exactly one system, visual and instruction segment.

    Segment order is significant (it is the rendering order) and is
    preserved through perturbations such as the visual/instruction swap.
    """

    segments: tuple[Segment, ...]
    query_id: str = ""
    noise: Optional[EmbeddingNoise] = None

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        roles = [s.role for s in self.segments]
        if Role.RESPONSE in roles:
            raise UsageError("prompts may not contain a response segment")
        if sorted(r.value for r in roles) != sorted(r.value for r in PROMPT_ROLES):
            raise UsageError(
                "prompt must hold exactly one segment per role "
                f"(system, visual, instruction); got {[r.value for r in roles]}"
            )

    @classmethod
    def build(
        cls,
        system: Sequence[TokenId],
        visual: Sequence[TokenId],
        instruction: Sequence[TokenId],
        query_id: str = "",
        order: Sequence[Role] = DEFAULT_ORDER,
    ) -> "SegmentedPrompt":
        by_role = {
            Role.SYSTEM: Segment(Role.SYSTEM, tuple(system)),
            Role.VISUAL: Segment(Role.VISUAL, tuple(visual)),
            Role.INSTRUCTION: Segment(Role.INSTRUCTION, tuple(instruction)),
        }
        return cls(tuple(by_role[r] for r in order), query_id=query_id)

    def segment(self, role: Role) -> Segment:
        for seg in self.segments:
            if seg.role == role:
                return seg
        raise UsageError(f"no {role.value} segment")

    @property
    def order(self) -> list[Role]:
        return [s.role for s in self.segments]

    def with_segments(self, segments: Iterable[Segment]) -> "SegmentedPrompt":
        return replace(self, segments=tuple(segments))


def render_prompt(
    prompt: SegmentedPrompt,
    order: Sequence[Role] | None = None,
    delimiter: TokenId | None = None,
) -> list[TokenId]:
    """Flatten a prompt to tokens in the given role order.

    ``delimiter``, when set, is inserted between consecutive segments; it
    belongs to no role and is excluded from attention-role bookkeeping.
    """
    tokens, _ = render_with_spans(prompt, order=order, delimiter=delimiter)
    return tokens


def render_with_spans(
    prompt: SegmentedPrompt,
    order: Sequence[Role] | None = None,
    delimiter: TokenId | None = None,
) -> tuple[list[TokenId], dict[Role, tuple[int, int]]]:
    """Like :func:`render_prompt`, also returning half-open role spans."""
    if order is None:
        order = prompt.order
    order = list(order)
    if sorted(r.value for r in order) != sorted(r.value for r in prompt.order):
        raise PermutationError(
            f"order {[r.value for r in order]} is not a permutation of "
            f"{[r.value for r in prompt.order]}"
        )
    tokens: list[TokenId] = []
    spans: dict[Role, tuple[int, int]] = {}
    for i, role in enumerate(order):
        if i > 0 and delimiter is not None:
            tokens.append(delimiter)
        seg = prompt.segment(role)
        spans[role] = (len(tokens), len(tokens) + len(seg))
        tokens.extend(seg.tokens)
    return tokens, spans


# --- tag grammar -----------------------------------------------------------

_ANSWER_SPAN = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)
_THINK_SPAN = re.compile(r"<think>(.*?)</think>", re.DOTALL)
_FULL_GRAMMAR = re.compile(
    r"\A\s*<think>(.*?)</think>\s*<answer>(.*?)</answer>\s*\Z", re.DOTALL
)
_TAGS = ("<think>", "</think>", "<answer>", "</answer>")


def extract_answer(text: str) -> Optional[str]:
    """Trimmed content of the first well-formed ``<answer>…</answer>`` span.

    Spans whose content still contains tag markers (nested/malformed tagging)
    do not count; absence is a value, not an error.
    """
    for m in _ANSWER_SPAN.finditer(text):
        content = m.group(1)
        if any(tag in content for tag in _TAGS):
            return None
        return content.strip()
    return None


def extract_reasoning(text: str) -> Optional[str]:
    m = _THINK_SPAN.search(text)
    if m is None:
        return None
    content = m.group(1)
    if any(tag in content for tag in _TAGS):
        return None
    return content.strip()


def matches_tag_grammar(text: str) -> bool:
    """True iff the text is exactly one think span followed by one answer span."""
    m = _FULL_GRAMMAR.match(text)
    if m is None:
        return False
    return not any(tag in part for part in m.groups() for tag in _TAGS)


_TRAILING_PUNCT = re.compile(r"[.!?]+$")
_WS = re.compile(r"\s+")


def normalize_answer(text: str) -> str:
    """Canonical answer form: lowercase, collapsed whitespace, no final pun..."""
    out = _WS.sub(" ", text.strip()).lower()
    return _TRAILING_PUNCT.sub("", out).strip()


def verify(pred: Optional[str], gold: str) -> bool:
    """Exact match of normalized answers; a missing prediction never matches."""
    if not gold:
        raise UsageError("gold answer must be non-empty")
    if pred is None:
        return False
    return normalize_answer(pred) == normalize_answer(gold)


# --- trajectories and solutions -------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    tokens: tuple[TokenId, ...]
    text: str
    reasoning_text: Optional[str]
    answer_text: Optional[str]
    finish: Finish

    @classmethod
    def from_text(
        cls, tokens: Sequence[TokenId], text: str, finish: Finish = Finish.STOP
    ) -> "Trajectory":
        return cls(
            tokens=tuple(int(t) for t in tokens),
            text=text,
            reasoning_text=extract_reasoning(text),
            answer_text=extract_answer(text),
            finish=finish,
        )

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class Solution:
    query_id: str
    trajectory: Trajectory
    correct: bool
    origin: Origin
    vas: Optional["VasScore"] = None
    sample_index: int = 0
    seed: int = 0


@dataclass(frozen=True)
class QueryRecord:
    id: str
    prompt: SegmentedPrompt
    gold_answer: str
    difficulty_level: Optional[int] = None

    def __post_init__(self):
        if not self.gold_answer:
            raise UsageError("gold_answer must be non-empty")
        if self.difficulty_level is not None and not 1 <= self.difficulty_level <= 4:
            raise UsageError("difficulty_level must be in [1, 4]")


class CandidatePool:
    """Per-query collections of solutions with correct/incorrect views."""

    def __init__(self, solutions: Optional[dict[str, list[Solution]]] = None):
        self._by_query: dict[str, list[Solution]] = {}
        if solutions:
            for qid, sols in solutions.items():
                for sol in sols:
                    self.add(qid, sol)

    def add(self, query_id: str, solution: Solution) -> None:
        if solution.query_id != query_id:
            raise UsageError(
                f"solution belongs to {solution.query_id!r}, not {query_id!r}"
            )
        self._by_query.setdefault(query_id, []).append(solution)

    def extend(self, solutions: Iterable[Solution]) -> None:
        for sol in solutions:
            self.add(sol.query_id, sol)

    def query_ids(self) -> list[str]:
        return list(self._by_query)

    def solutions(self, query_id: str) -> list[Solution]:
        return list(self._by_query.get(query_id, []))

    def positives(self, query_id: str) -> list[Solution]:
        return [s for s in self._by_query.get(query_id, []) if s.correct]

    def negatives(self, query_id: str) -> list[Solution]:
        return [s for s in self._by_query.get(query_id, []) if not s.correct]

    def correct_count(self, query_id: str) -> int:
        return len(self.positives(query_id))

    def all_solutions(self) -> Iterator[Solution]:
        for qid in self._by_query:
            yield from self._by_query[qid]

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_query.values())

    def __contains__(self, query_id: str) -> bool:
        return query_id in self._by_query

    def copy(self) -> "CandidatePool":
        out = CandidatePool()
        for qid, sols in self._by_query.items():
            for sol in sols:
                out.add(qid, sol)
        return out
