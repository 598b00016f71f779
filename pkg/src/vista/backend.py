"""Model-backend contract plus a scripted replay backend for tests.

A backend is anything that can sample continuations, report teacher-forced
top-k next-token predictions, and expose per-layer attention allocation over
the prompt's role segments. The scripted backend never computes anything: it
replays responses, top-k tables and attention rows it was programmed with,
which makes pipeline tests fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Protocol, Sequence, runtime_checkable

from .core import (
    Finish,
    Role,
    SegmentedPrompt,
    TokenId,
    Trajectory,
    render_with_spans,
)
from .errors import BackendError, CapabilityError, ContextError, LayerError, UsageError


@dataclass(frozen=True)
class SampleParams:
    n: int = 1
    temperature: float = 1.0
    max_tokens: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise UsageError("n must be >= 1")
        if self.temperature < 0:
            raise UsageError("temperature must be non-negative")
        if self.max_tokens < 1:
            raise UsageError("max_tokens must be >= 1")


@dataclass(frozen=True)
class TopKPrediction:
    """Top-k next-token candidates at one continuation position.

    Entries are (token, logprob) sorted by logprob descending, ties broken
    by ascending token id.
    """

    position: int
    entries: tuple[tuple[TokenId, float], ...]

    def token_ids(self) -> list[TokenId]:
        return [t for t, _ in self.entries]

    @property
    def top1(self) -> TokenId:
        return self.entries[0][0]


def sort_topk(pairs: Sequence[tuple[TokenId, float]], k: int) -> tuple[tuple[TokenId, float], ...]:
    """Deterministic top-k ordering: logprob desc, then token id asc."""
    ranked = sorted(pairs, key=lambda p: (-p[1], p[0]))
    return tuple(ranked[:k])


class AttentionSpan(str, Enum):
    ALL_RESPONSE = "all"
    FIRST_TOKEN = "first"


@dataclass(frozen=True)
class AttentionAllocation:
    """Attention mass the output span assigns to each prompt role."""

    lambda_sys: float
    lambda_vis: float
    lambda_ins: float

    def __post_init__(self):
        for name in ("lambda_sys", "lambda_vis", "lambda_ins"):
            if getattr(self, name) < -1e-12:
                raise UsageError(f"{name} must be non-negative")

    @property
    def total(self) -> float:
        return self.lambda_sys + self.lambda_vis + self.lambda_ins

    def shares(self) -> tuple[float, float, float]:
        t = self.total
        if t <= 0:
            return (0.0, 0.0, 0.0)
        return (self.lambda_sys / t, self.lambda_vis / t, self.lambda_ins / t)


@dataclass(frozen=True)
class LayerSelector:
    """Middle layer (floor(L/2), zero-based) or an explicit layer index."""

    index: Optional[int] = None

    @classmethod
    def middle(cls) -> "LayerSelector":
        return cls(None)

    @classmethod
    def at(cls, index: int) -> "LayerSelector":
        return cls(int(index))

    @property
    def is_middle(self) -> bool:
        return self.index is None

    def resolve(self, layer_count: int) -> int:
        if self.index is None:
            return layer_count // 2
        if not 0 <= self.index < layer_count:
            raise LayerError(
                f"layer {self.index} out of range for {layer_count}-layer model"
            )
        return self.index


@dataclass(frozen=True)
class Capabilities:
    context_limit: int
    layer_count: int
    vocab_size: int
    single_flight: bool = False
    # extensions beyond the required four fields
    segment_delimiter: Optional[TokenId] = None
    embedding_noise: bool = False
    supports_decode: bool = True
    deterministic_sampling: bool = True


@runtime_checkable
class ModelBackend(Protocol):
    def capabilities(self) -> Capabilities: ...

    def sample(
        self, prompt_tokens: Sequence[TokenId], params: SampleParams
    ) -> list[Trajectory]: ...

    def teacher_forced_topk(
        self,
        prompt_tokens: Sequence[TokenId],
        continuation: Sequence[TokenId],
        k: int,
    ) -> list[TopKPrediction]: ...

    def segment_attention(
        self,
        prompt: SegmentedPrompt,
        response_tokens: Sequence[TokenId],
        layer: LayerSelector,
        span: AttentionSpan,
    ) -> AttentionAllocation: ...

    def layer_profile(
        self, prompt: SegmentedPrompt, response_first_token: TokenId
    ) -> list[AttentionAllocation]: ...

    def decode(self, tokens: Sequence[TokenId]) -> str: ...


def require_noise_support(backend: ModelBackend, prompt: SegmentedPrompt) -> None:
    if prompt.noise is not None and not backend.capabilities().embedding_noise:
        raise CapabilityError("backend does not support embedding noise")


# --- scripted backend -------------------------------------------------------


@dataclass(frozen=True)
class ScriptedResponse:
    tokens: tuple[TokenId, ...]
    text: str
    finish: Finish = Finish.STOP

    def trajectory(self) -> Trajectory:
        return Trajectory.from_text(list(self.tokens), self.text, self.finish)


def _key(tokens: Sequence[TokenId]) -> tuple[TokenId, ...]:
    return tuple(int(t) for t in tokens)


class ScriptedBackend:
    """Replay-only backend.

    Programs are keyed by exact prompt token tuples. For sampling, a
    per-seed override table is consulted first, then the prompt's response
    list (the j-th of n samples replays ``responses[j % len]``), then the
    default response. Top-k tables are stored at full width and truncated
    to the requested k, which makes prefix-consistency hold by construction.
    Attention is served from programmed per-position rows (uniform rows by
    default): every output token replays the same row over prompt positions.
    """

    def __init__(
        self,
        context_limit: int = 4096,
        layer_count: int = 4,
        vocab_size: int = 64,
        segment_delimiter: Optional[TokenId] = None,
        decode_fn: Optional[Callable[[Sequence[TokenId]], str]] = None,
        single_flight: bool = False,
    ):
        self._caps = Capabilities(
            context_limit=context_limit,
            layer_count=layer_count,
            vocab_size=vocab_size,
            single_flight=single_flight,
            segment_delimiter=segment_delimiter,
            embedding_noise=False,
        )
        self._decode = decode_fn or (lambda toks: " ".join(str(t) for t in toks))
        self._responses: dict[tuple, list[ScriptedResponse]] = {}
        self._responses_by_seed: dict[tuple, dict[int, ScriptedResponse]] = {}
        self._default_response: Optional[ScriptedResponse] = None
        self._topk: dict[tuple, list[list[tuple[TokenId, float]]]] = {}
        self._default_topk_row: Optional[list[tuple[TokenId, float]]] = None
        # attention rows: keys tried most-specific first
        self._rows: dict[tuple, list[float]] = {}

    # -- programming interface ------------------------------------------

    def program_sample(
        self,
        prompt_tokens: Sequence[TokenId],
        responses: Sequence[ScriptedResponse],
        by_seed: Optional[dict[int, ScriptedResponse]] = None,
    ) -> None:
        key = _key(prompt_tokens)
        self._responses[key] = list(responses)
        if by_seed:
            self._responses_by_seed.setdefault(key, {}).update(by_seed)

    def program_default_response(self, response: ScriptedResponse) -> None:
        self._default_response = response

    def program_topk(
        self,
        prompt_tokens: Sequence[TokenId],
        continuation: Sequence[TokenId],
        tables: Sequence[Sequence[tuple[TokenId, float]]],
    ) -> None:
        if len(tables) != len(continuation):
            raise UsageError("one table per continuation position required")
        self._topk[(_key(prompt_tokens), _key(continuation))] = [
            list(row) for row in tables
        ]

    def program_default_topk_row(self, row: Sequence[tuple[TokenId, float]]) -> None:
        self._default_topk_row = list(row)

    def program_attention_row(
        self,
        row: Sequence[float],
        prompt_tokens: Optional[Sequence[TokenId]] = None,
        response_tokens: Optional[Sequence[TokenId]] = None,
        layer: Optional[int] = None,
    ) -> None:
        key = (
            _key(prompt_tokens) if prompt_tokens is not None else None,
            _key(response_tokens) if response_tokens is not None else None,
            layer,
        )
        self._rows[key] = list(row)

    # -- backend contract -------------------------------------------------

    def capabilities(self) -> Capabilities:
        return self._caps

    def decode(self, tokens: Sequence[TokenId]) -> str:
        return self._decode(tokens)

    def _check_context(self, needed: int) -> None:
        if needed > self._caps.context_limit:
            raise ContextError(
                f"sequence of {needed} tokens exceeds context limit "
                f"{self._caps.context_limit}"
            )

    def sample(
        self, prompt_tokens: Sequence[TokenId], params: SampleParams
    ) -> list[Trajectory]:
        self._check_context(len(prompt_tokens) + params.max_tokens)
        key = _key(prompt_tokens)
        by_seed = self._responses_by_seed.get(key, {})
        if params.seed in by_seed:
            resp = by_seed[params.seed]
            return [resp.trajectory() for _ in range(params.n)]
        responses = self._responses.get(key)
        if responses:
            return [responses[j % len(responses)].trajectory() for j in range(params.n)]
        if self._default_response is not None:
            return [self._default_response.trajectory() for _ in range(params.n)]
        raise BackendError(f"no scripted response for prompt of {len(key)} tokens")

    def teacher_forced_topk(
        self,
        prompt_tokens: Sequence[TokenId],
        continuation: Sequence[TokenId],
        k: int,
    ) -> list[TopKPrediction]:
        if k < 1:
            raise UsageError("k must be >= 1")
        if not continuation:
            raise UsageError("continuation must be non-empty")
        self._check_context(len(prompt_tokens) + len(continuation))
        tables = self._topk.get((_key(prompt_tokens), _key(continuation)))
        if tables is None:
            if self._default_topk_row is None:
                raise BackendError("no scripted top-k table for this request")
            tables = [self._default_topk_row] * len(continuation)
        out = []
        for pos, table in enumerate(tables):
            out.append(TopKPrediction(position=pos, entries=sort_topk(table, k)))
        return out

    def _row_for(
        self,
        prompt_key: tuple,
        response_key: tuple,
        layer: int,
        width: int,
    ) -> list[float]:
        for key in (
            (prompt_key, response_key, layer),
            (prompt_key, response_key, None),
            (prompt_key, None, layer),
            (prompt_key, None, None),
            (None, None, None),
        ):
            if key in self._rows:
                row = self._rows[key]
                if len(row) != width:
                    raise UsageError(
                        f"programmed attention row has {len(row)} entries, "
                        f"prompt has {width} positions"
                    )
                return row
        return [1.0 / width] * width

    def attention_from_ranges(
        self,
        prompt_tokens: Sequence[TokenId],
        ranges: dict[Role, tuple[int, int]],
        response_tokens: Sequence[TokenId],
        layer_index: int,
        span: AttentionSpan,
    ) -> AttentionAllocation:
        if not response_tokens:
            raise UsageError("response_tokens must be non-empty")
        if not 0 <= layer_index < self._caps.layer_count:
            raise LayerError(f"layer {layer_index} out of range")
        row = self._row_for(
            _key(prompt_tokens), _key(response_tokens), layer_index, len(prompt_tokens)
        )
        n_rows = 1 if span == AttentionSpan.FIRST_TOKEN else len(response_tokens)
        sums = {}
        for role in (Role.SYSTEM, Role.VISUAL, Role.INSTRUCTION):
            lo, hi = ranges[role]
            sums[role] = n_rows * sum(row[lo:hi])
        return AttentionAllocation(
            lambda_sys=sums[Role.SYSTEM],
            lambda_vis=sums[Role.VISUAL],
            lambda_ins=sums[Role.INSTRUCTION],
        )

    def segment_attention(
        self,
        prompt: SegmentedPrompt,
        response_tokens: Sequence[TokenId],
        layer: LayerSelector,
        span: AttentionSpan,
    ) -> AttentionAllocation:
        require_noise_support(self, prompt)
        layer_idx = layer.resolve(self._caps.layer_count)
        tokens, spans = render_with_spans(
            prompt, delimiter=self._caps.segment_delimiter
        )
        return self.attention_from_ranges(tokens, spans, response_tokens, layer_idx, span)

    def profile_from_ranges(
        self,
        prompt_tokens: Sequence[TokenId],
        ranges: dict[Role, tuple[int, int]],
        first_token: TokenId,
    ) -> list[AttentionAllocation]:
        return [
            self.attention_from_ranges(
                prompt_tokens, ranges, [first_token], layer, AttentionSpan.FIRST_TOKEN
            )
            for layer in range(self._caps.layer_count)
        ]

    def layer_profile(
        self, prompt: SegmentedPrompt, response_first_token: TokenId
    ) -> list[AttentionAllocation]:
        require_noise_support(self, prompt)
        tokens, spans = render_with_spans(
            prompt, delimiter=self._caps.segment_delimiter
        )
        return self.profile_from_ranges(tokens, spans, response_first_token)
