"""Synthetic grid visual-QA tasks for the toy model.

The "image" is a grid of attribute patch tokens (one token per cell, each
encoding a color/shape pair or emptiness), so every question is answerable
exactly from the visual segment and gold answers are derivable bit-for-bit.
Question kinds:

* ``count``    — how many <color> <shape> ?            -> "3"
* ``identify`` — what is in row <r> col <c> ?          -> "blue circle"
* ``compare``  — are there more <a> than <b> ?         -> "yes" / "no"

A bias knob can force a per-kind majority answer on the train split, which
lets language-prior shortcuts (answering from the question alone) pay off
during training and creates measurable visual-grounding signal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import (
    Finish,
    Origin,
    QueryRecord,
    Role,
    SegmentedPrompt,
    Solution,
    Trajectory,
    render_prompt,
)
from .errors import ConfigError, UsageError
from .seeds import stable_hash

COLOR_NAMES = ["red", "blue", "green", "yellow", "purple", "orange"]
SHAPE_NAMES = ["square", "circle", "triangle", "star", "diamond", "cross"]

_FIXED_WORDS = [
    "yes", "no", "empty", "how", "many", "what", "is", "in", "row", "col",
    "are", "there", "more", "than", "?", "look", "count", "the", "grid",
    "answer", "question", "a", "i", "see", "so",
]

QUESTION_KINDS = ("count", "identify", "compare")

# canonical majority answers used by the bias knob
_MAJORITY_COUNT = 2


@dataclass(frozen=True)
class SyntheticTaskConfig:
    grid_side: int = 4
    attribute_count: int = 12
    question_kinds: tuple[str, ...] = QUESTION_KINDS
    difficulty_mix: tuple[float, ...] = ()
    dataset_seed: int = 0
    train_size: int = 128
    test_size: int = 64
    empty_prob: float = 0.4
    majority_bias: float = 0.0

    def __post_init__(self):
        if self.grid_side < 1:
            raise ConfigError("grid_side must be >= 1")
        if not self.question_kinds:
            raise ConfigError("need at least one question kind")
        for kind in self.question_kinds:
            if kind not in QUESTION_KINDS:
                raise ConfigError(f"unknown question kind {kind!r}")
        if self.difficulty_mix:
            if len(self.difficulty_mix) != len(self.question_kinds):
                raise ConfigError("difficulty_mix must align with question_kinds")
            if any(w < 0 for w in self.difficulty_mix) or sum(self.difficulty_mix) <= 0:
                raise ConfigError("difficulty_mix weights must be non-negative, sum > 0")
        if not 0.0 <= self.majority_bias <= 1.0:
            raise ConfigError("majority_bias must be in [0, 1]")
        _split_attributes(self.attribute_count)  # validates


def _split_attributes(attribute_count: int) -> tuple[int, int]:
    """Factor attribute_count into (n_colors, n_shapes), near-square."""
    if attribute_count < 1:
        raise ConfigError("attribute_count must be >= 1")
    start = int(np.ceil(np.sqrt(attribute_count)))
    for n_colors in range(start, min(len(COLOR_NAMES), attribute_count) + 1):
        if attribute_count % n_colors == 0:
            n_shapes = attribute_count // n_colors
            if n_shapes <= len(SHAPE_NAMES):
                return n_colors, n_shapes
    raise ConfigError(f"attribute_count {attribute_count} cannot be factored")


class ToyVocab:
    """Word-level synthetic vocabulary with reserved specials and patch ids.

    Layout: <pad> <sep> <mask> <think> </think> <answer> </answer>,
    number words, color/shape words, fixed function words, then one patch
    token per cell content (empty plus each color/shape pair).
    """

    PAD, SEP, MASK, THINK, THINK_END, ANSWER, ANSWER_END = range(7)

    def __init__(self, colors: Sequence[str], shapes: Sequence[str], max_number: int):
        self.colors = list(colors)
        self.shapes = list(shapes)
        self.max_number = max_number
        tokens = ["<pad>", "<sep>", "<mask>", "<think>", "</think>", "<answer>", "</answer>"]
        tokens += [str(i) for i in range(max_number + 1)]
        for w in self.colors + self.shapes + _FIXED_WORDS:
            if w not in tokens:
                tokens.append(w)
        self.patch_base = len(tokens)
        tokens.append("<vis:empty>")
        for c in self.colors:
            for s in self.shapes:
                tokens.append(f"<vis:{c}-{s}>")
        self._tokens = tokens
        self._ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self._tokens)

    @property
    def sep_id(self) -> int:
        return self.SEP

    @property
    def mask_id(self) -> int:
        return self.MASK

    @property
    def stop_id(self) -> int:
        return self.ANSWER_END

    @property
    def visual_range(self) -> tuple[int, int]:
        return (self.patch_base, len(self._tokens))

    def id_of(self, word: str) -> int:
        try:
            return self._ids[word]
        except KeyError:
            raise UsageError(f"word {word!r} not in toy vocabulary") from None

    def encode(self, text: str) -> list[int]:
        return [self.id_of(w) for w in text.split()]

    def decode(self, tokens: Sequence[int]) -> str:
        out = []
        for t in tokens:
            t = int(t)
            if not 0 <= t < len(self._tokens):
                out.append(f"<unk:{t}>")
            else:
                out.append(self._tokens[t])
        return " ".join(out)

    def patch_id(self, cell: Optional[tuple[int, int]]) -> int:
        if cell is None:
            return self.patch_base
        c, s = cell
        return self.patch_base + 1 + c * len(self.shapes) + s

    def attribute_words(self, cell: tuple[int, int]) -> tuple[str, str]:
        return self.colors[cell[0]], self.shapes[cell[1]]


def build_vocab(cfg: SyntheticTaskConfig) -> ToyVocab:
    n_colors, n_shapes = _split_attributes(cfg.attribute_count)
    return ToyVocab(
        COLOR_NAMES[:n_colors], SHAPE_NAMES[:n_shapes], max_number=cfg.grid_side**2
    )


Grid = list  # list of Optional[(color_idx, shape_idx)], row-major


def grid_to_visual_tokens(grid: Grid, vocab: ToyVocab) -> list[int]:
    return [vocab.patch_id(cell) for cell in grid]


def _count_pair(grid: Grid, pair: tuple[int, int]) -> int:
    return sum(1 for cell in grid if cell == pair)


def derive_gold(kind: str, grid: Grid, spec: dict, vocab: ToyVocab) -> str:
    """Recompute the gold answer from grid contents (the ground truth)."""
    if kind == "count":
        return str(_count_pair(grid, spec["pair"]))
    if kind == "identify":
        cell = grid[spec["cell_index"]]
        if cell is None:
            return "empty"
        c, s = vocab.attribute_words(cell)
        return f"{c} {s}"
    if kind == "compare":
        a = _count_pair(grid, spec["pair_a"])
        b = _count_pair(grid, spec["pair_b"])
        return "yes" if a > b else "no"
    raise UsageError(f"unknown kind {kind!r}")


def _instruction_tokens(kind: str, spec: dict, vocab: ToyVocab, side: int) -> list[int]:
    w = vocab.id_of
    if kind == "count":
        c, s = vocab.attribute_words(spec["pair"])
        return [w("how"), w("many"), w(c), w(s), w("?")]
    if kind == "identify":
        r, col = divmod(spec["cell_index"], side)
        return [w("what"), w("is"), w("in"), w("row"), w(str(r)), w("col"), w(str(col)), w("?")]
    if kind == "compare":
        ca, sa = vocab.attribute_words(spec["pair_a"])
        cb, sb = vocab.attribute_words(spec["pair_b"])
        return [w("are"), w("there"), w("more"), w(ca), w(sa), w("than"), w(cb), w(sb), w("?")]
    raise UsageError(f"unknown kind {kind!r}")


def system_tokens(vocab: ToyVocab) -> list[int]:
    return [vocab.id_of(w) for w in ("answer", "the", "grid", "question")]


def _row_counts(grid: Grid, pair: tuple[int, int], side: int) -> list[int]:
    return [
        sum(1 for cell in grid[r * side : (r + 1) * side] if cell == pair)
        for r in range(side)
    ]


def template_response_tokens(
    kind: str,
    spec: dict,
    grid: Grid,
    vocab: ToyVocab,
    side: int,
    wrong_answer: Optional[str] = None,
) -> list[int]:
    """Reference tagged response with stepwise reasoning.

    Counting enumerates per-row tallies before the total, identification
    commits to what it sees before answering, comparison states both counts:
    intermediate tokens carry real computation, so a derailed trajectory has
    a salvageable correct prefix. Passing ``wrong_answer`` produces a
    late-derailed variant whose early reasoning is still valid but whose
    final commitment (and answer) is wrong.
    """
    w = vocab.id_of
    answer = wrong_answer if wrong_answer is not None else derive_gold(kind, grid, spec, vocab)
    if kind == "count":
        rows = _row_counts(grid, spec["pair"], side)
        c, s = vocab.attribute_words(spec["pair"])
        think = [w("count"), w(c), w(s)]
        for r, n in enumerate(rows):
            think += [w("row"), w(str(r)), w(str(n))]
        think += [w("so"), w(answer)]
    elif kind == "identify":
        r, col = divmod(spec["cell_index"], side)
        think = [w("look"), w("row"), w(str(r)), w("col"), w(str(col)), w("i"), w("see")]
        think += [w(part) for part in answer.split()]
    else:
        na = _count_pair(grid, spec["pair_a"])
        nb = _count_pair(grid, spec["pair_b"])
        ca, sa = vocab.attribute_words(spec["pair_a"])
        cb, sb = vocab.attribute_words(spec["pair_b"])
        think = [w("count"), w(ca), w(sa), w(str(na)),
                 w("count"), w(cb), w(sb), w(str(nb)), w("so"), w(answer)]
    return (
        [ToyVocab.THINK]
        + think
        + [ToyVocab.THINK_END, ToyVocab.ANSWER]
        + [w(part) for part in answer.split()]
        + [ToyVocab.ANSWER_END]
    )


class _TaskSampler:
    def __init__(self, cfg: SyntheticTaskConfig, vocab: ToyVocab):
        self.cfg = cfg
        self.vocab = vocab
        self.n_cells = cfg.grid_side**2
        self.n_colors = len(vocab.colors)
        self.n_shapes = len(vocab.shapes)
        if cfg.difficulty_mix:
            weights = np.asarray(cfg.difficulty_mix, dtype=float)
        else:
            weights = np.ones(len(cfg.question_kinds))
        self.kind_probs = weights / weights.sum()

    def _random_pair(self, rng) -> tuple[int, int]:
        return (int(rng.integers(self.n_colors)), int(rng.integers(self.n_shapes)))

    def _random_grid(self, rng) -> Grid:
        return [
            None if rng.random() < self.cfg.empty_prob else self._random_pair(rng)
            for _ in range(self.n_cells)
        ]

    def _force_count(self, grid: Grid, pair: tuple[int, int], target: int, rng) -> None:
        """Adjust the grid in place until _count_pair(grid, pair) == target."""
        target = min(target, self.n_cells)
        while _count_pair(grid, pair) > target:
            idxs = [i for i, cell in enumerate(grid) if cell == pair]
            grid[int(rng.choice(idxs))] = None
        while _count_pair(grid, pair) < target:
            idxs = [i for i, cell in enumerate(grid) if cell != pair]
            grid[int(rng.choice(idxs))] = pair

    def make(self, rng, biased: bool) -> tuple[str, Grid, dict]:
        kind = str(rng.choice(list(self.cfg.question_kinds), p=self.kind_probs))
        grid = self._random_grid(rng)
        apply_bias = biased and rng.random() < self.cfg.majority_bias
        if kind == "count":
            pair = self._random_pair(rng)
            if apply_bias:
                self._force_count(grid, pair, _MAJORITY_COUNT, rng)
            spec = {"pair": pair}
        elif kind == "identify":
            cell_index = int(rng.integers(self.n_cells))
            if grid[cell_index] is None:
                grid[cell_index] = self._random_pair(rng)
            if apply_bias:
                grid[cell_index] = (0, 0)
            spec = {"cell_index": cell_index}
        else:
            pair_a = self._random_pair(rng)
            pair_b = self._random_pair(rng)
            while pair_b == pair_a:
                pair_b = self._random_pair(rng)
            if apply_bias and _count_pair(grid, pair_a) <= _count_pair(grid, pair_b):
                self._force_count(grid, pair_a, _count_pair(grid, pair_b) + 1, rng)
            spec = {"pair_a": pair_a, "pair_b": pair_b}
        return kind, grid, spec

    def record(self, rng, query_id: str, biased: bool) -> tuple[QueryRecord, str, Grid, dict]:
        kind, grid, spec = self.make(rng, biased)
        prompt = SegmentedPrompt.build(
            system=system_tokens(self.vocab),
            visual=grid_to_visual_tokens(grid, self.vocab),
            instruction=_instruction_tokens(kind, spec, self.vocab, self.cfg.grid_side),
            query_id=query_id,
        )
        gold = derive_gold(kind, grid, spec, self.vocab)
        return QueryRecord(id=query_id, prompt=prompt, gold_answer=gold), kind, grid, spec


def generate_synthetic_tasks(
    cfg: SyntheticTaskConfig, vocab: Optional[ToyVocab] = None
) -> tuple[list[QueryRecord], list[QueryRecord]]:
    """Deterministic (train, test) splits with disjoint ids.

    Only the train split is subject to the majority-bias knob; the test
    split always reflects the unbiased question distribution.
    """
    vocab = vocab or build_vocab(cfg)
    sampler = _TaskSampler(cfg, vocab)
    train, test = [], []
    rng_train = np.random.default_rng(stable_hash(cfg.dataset_seed, "train"))
    for i in range(cfg.train_size):
        rec, _, _, _ = sampler.record(rng_train, f"train-{i:04d}", biased=True)
        train.append(rec)
    rng_test = np.random.default_rng(stable_hash(cfg.dataset_seed, "test"))
    for i in range(cfg.test_size):
        rec, _, _, _ = sampler.record(rng_test, f"test-{i:04d}", biased=False)
        test.append(rec)
    return train, test


def make_demo_solutions(
    cfg: SyntheticTaskConfig, count: int, vocab: Optional[ToyVocab] = None
) -> list[tuple[QueryRecord, Solution]]:
    """Hand-templated correct demonstrations for few-shot seed prompting."""
    vocab = vocab or build_vocab(cfg)
    sampler = _TaskSampler(cfg, vocab)
    rng = np.random.default_rng(stable_hash(cfg.dataset_seed, "demos"))
    demos = []
    for i in range(count):
        rec, kind, grid, spec = sampler.record(rng, f"demo-{i:04d}", biased=False)
        resp = template_response_tokens(kind, spec, grid, vocab, cfg.grid_side)
        traj = Trajectory.from_text(resp, vocab.decode(resp), Finish.STOP)
        sol = Solution(
            query_id=rec.id,
            trajectory=traj,
            correct=True,
            origin=Origin.SEED,
        )
        demos.append((rec, sol))
    return demos


def serialize_visual(prompt: SegmentedPrompt) -> str:
    """Stable textual reference for a prompt's visual payload."""
    tokens = prompt.segment(Role.VISUAL).tokens
    return "toks:" + ",".join(str(t) for t in tokens)


def _plausible_wrong_answer(kind: str, gold: str, vocab: ToyVocab, rng) -> str:
    """A same-kind answer different from gold (how a confused model errs)."""
    for _ in range(32):
        if kind == "count":
            cand = str(int(rng.integers(0, vocab.max_number + 1)))
        elif kind == "identify":
            c = vocab.colors[int(rng.integers(len(vocab.colors)))]
            s = vocab.shapes[int(rng.integers(len(vocab.shapes)))]
            cand = f"{c} {s}"
        else:
            cand = "yes" if rng.random() < 0.5 else "no"
        if cand != gold:
            return cand
    return gold


def make_pretraining_items(
    cfg: SyntheticTaskConfig,
    vocab: ToyVocab,
    count: int,
    seed: int,
    competence: float = 0.5,
    max_shots: int = 3,
    context: Optional[int] = None,
) -> list[tuple[list[int], list[int]]]:
    """(prompt, response) pairs that teach the tag format, not the task.

    Responses follow the reasoning template but carry the true answer only
    with probability ``competence``; otherwise a plausible same-kind wrong
    answer. A random number of correct demonstration blocks (up to
    ``max_shots``) precedes the query so that few-shot prompts and late
    positions are in-distribution. Training a fresh model on these yields
    the stand-in for a pretrained instruct model: fluent in the format,
    unreliable on content, and biased toward language priors.
    """
    if not 0.0 <= competence <= 1.0:
        raise ConfigError("competence must be in [0, 1]")
    sampler = _TaskSampler(cfg, vocab)
    rng = np.random.default_rng(stable_hash(seed, "pretrain"))
    items: list[tuple[list[int], list[int]]] = []
    w = vocab.id_of
    for i in range(count):
        shots = int(rng.integers(0, max_shots + 1))
        demo_blocks: list[list[int]] = []
        for s in range(shots):
            demo_rec, demo_kind, demo_grid, demo_spec = sampler.record(
                rng, f"pretrain-{i:05d}-demo{s}", biased=False
            )
            demo_blocks.append(
                render_prompt(demo_rec.prompt, delimiter=vocab.sep_id)
                + template_response_tokens(demo_kind, demo_spec, demo_grid, vocab, cfg.grid_side)
            )
        rec, kind, grid, spec = sampler.record(rng, f"pretrain-{i:05d}", biased=True)
        wrong = None
        if rng.random() >= competence:
            gold = derive_gold(kind, grid, spec, vocab)
            wrong = _plausible_wrong_answer(kind, gold, vocab, rng)
        resp = template_response_tokens(
            kind, spec, grid, vocab, cfg.grid_side, wrong_answer=wrong
        )
        query_block = render_prompt(rec.prompt, delimiter=vocab.sep_id)
        if context is not None:
            budget = context - len(query_block) - len(resp)
            while demo_blocks and sum(len(b) for b in demo_blocks) > budget:
                demo_blocks.pop(0)
        prompt = [t for block in demo_blocks for t in block] + query_block
        items.append((prompt, resp))
    return items
