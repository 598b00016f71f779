"""Self-improvement training-data pipeline with prefix resampling and
vision-aware attention filtering, plus a toy multimodal transformer for
desk-scale end-to-end verification."""

__version__ = "0.1.0"

from .core import (
    CandidatePool,
    DEFAULT_SYSTEM_PROMPT,
    Finish,
    Origin,
    QueryRecord,
    Role,
    Segment,
    SegmentedPrompt,
    Solution,
    Trajectory,
    extract_answer,
    normalize_answer,
    render_prompt,
    verify,
)
from .backend import (
    AttentionAllocation,
    AttentionSpan,
    Capabilities,
    LayerSelector,
    SampleParams,
    ScriptedBackend,
    ScriptedResponse,
    TopKPrediction,
)

__all__ = [
    "AttentionAllocation",
    "AttentionSpan",
    "CandidatePool",
    "Capabilities",
    "DEFAULT_SYSTEM_PROMPT",
    "Finish",
    "LayerSelector",
    "Origin",
    "QueryRecord",
    "Role",
    "SampleParams",
    "ScriptedBackend",
    "ScriptedResponse",
    "Segment",
    "SegmentedPrompt",
    "Solution",
    "TopKPrediction",
    "Trajectory",
    "extract_answer",
    "normalize_answer",
    "render_prompt",
    "verify",
]
