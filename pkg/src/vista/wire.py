"""Newline-delimited JSON protocol for out-of-process backends.

Requests: ``{"id": int, "op": str, "data": {...}}``. Responses:
``{"id": int, "ok": true, "data": {...}}`` or
``{"id": int, "ok": false, "error": {"code": str, "message": str}}``.

Core ops are ``capabilities``, ``sample``, ``topk``, ``attention`` and
``profile``; ``decode`` is an extension advertised through the
``supports_decode`` capability flag. Attention requests carry role segment
boundaries as half-open token-index ranges and responses return the three
aggregated lambda sums, keeping payloads small. Unknown ops answer
``ok=false`` with ``error.code == "unsupported"``.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import sys
import threading
from typing import Callable, Optional, Sequence

from .backend import (
    AttentionAllocation,
    AttentionSpan,
    Capabilities,
    LayerSelector,
    SampleParams,
    TopKPrediction,
)
from .core import (
    EmbeddingNoise,
    Finish,
    Role,
    SegmentedPrompt,
    TokenId,
    Trajectory,
    render_with_spans,
)
from .errors import (
    BackendError,
    CapabilityError,
    ContextError,
    LayerError,
    ProtocolError,
    UsageError,
)

_ERROR_CODES = {
    ContextError: "context",
    LayerError: "layer",
    CapabilityError: "capability",
    UsageError: "bad_request",
    BackendError: "backend",
}

_CODE_TO_ERROR = {
    "context": ContextError,
    "layer": LayerError,
    "capability": CapabilityError,
    "bad_request": UsageError,
    "unsupported": CapabilityError,
    "backend": BackendError,
}

_ROLE_KEYS = {Role.SYSTEM: "system", Role.VISUAL: "visual", Role.INSTRUCTION: "instruction"}


def encode_message(message: dict) -> str:
    """Canonical one-line encoding (sorted keys, no spaces)."""
    return json.dumps(message, sort_keys=True, separators=(",", ":"))


def decode_message(line: str) -> dict:
    try:
        message = json.loads(line)
    except json.JSONDecodeError as e:
        raise ProtocolError(f"malformed wire message: {e}") from e
    if not isinstance(message, dict):
        raise ProtocolError("wire message must be a JSON object")
    return message


def _ranges_payload(spans: dict[Role, tuple[int, int]]) -> dict:
    return {_ROLE_KEYS[role]: [lo, hi] for role, (lo, hi) in spans.items()}


def _ranges_from_payload(payload: dict) -> dict[Role, tuple[int, int]]:
    try:
        return {
            role: (int(payload[key][0]), int(payload[key][1]))
            for role, key in _ROLE_KEYS.items()
        }
    except (KeyError, IndexError, TypeError) as e:
        raise UsageError(f"bad segment ranges: {e}") from e


def _noise_payload(noise, span) -> dict:
    return {"sigma": noise.sigma, "seed": noise.seed, "lo": span[0], "hi": span[1]}


# --- server side --------------------------------------------------------------


class BackendServer:
    """Dispatches wire requests onto a local backend object."""

    def __init__(self, backend):
        self.backend = backend

    def handle_line(self, line: str) -> str:
        req_id = 0
        try:
            message = decode_message(line)
            req_id = int(message.get("id", 0))
            op = message.get("op")
            data = message.get("data", {}) or {}
            handler = getattr(self, f"_op_{op}", None)
            if handler is None:
                return encode_message(
                    {"id": req_id, "ok": False,
                     "error": {"code": "unsupported", "message": f"unknown op {op!r}"}}
                )
            return encode_message({"id": req_id, "ok": True, "data": handler(data)})
        except Exception as e:  # every failure becomes a protocol-level error
            code = "backend"
            for etype, ecode in _ERROR_CODES.items():
                if isinstance(e, etype):
                    code = ecode
                    break
            return encode_message(
                {"id": req_id, "ok": False, "error": {"code": code, "message": str(e)}}
            )

    def _op_capabilities(self, data: dict) -> dict:
        caps = self.backend.capabilities()
        return {
            "context_limit": caps.context_limit,
            "layer_count": caps.layer_count,
            "vocab_size": caps.vocab_size,
            "single_flight": caps.single_flight,
            "segment_delimiter": caps.segment_delimiter,
            "embedding_noise": caps.embedding_noise,
            "supports_decode": caps.supports_decode,
            "deterministic_sampling": caps.deterministic_sampling,
        }

    def _op_sample(self, data: dict) -> dict:
        p = data["params"]
        params = SampleParams(
            n=int(p.get("n", 1)),
            temperature=float(p.get("temperature", 1.0)),
            max_tokens=int(p.get("max_tokens", 128)),
            seed=int(p.get("seed", 0)),
        )
        trajectories = self.backend.sample([int(t) for t in data["prompt"]], params)
        return {
            "trajectories": [
                {"tokens": list(t.tokens), "text": t.text, "finish": t.finish.value}
                for t in trajectories
            ]
        }

    def _op_topk(self, data: dict) -> dict:
        kwargs = {}
        if data.get("noise") is not None:
            n = data["noise"]
            kwargs["noise"] = (
                EmbeddingNoise(sigma=float(n["sigma"]), seed=int(n["seed"])),
                (int(n["lo"]), int(n["hi"])),
            )
        predictions = self.backend.teacher_forced_topk(
            [int(t) for t in data["prompt"]],
            [int(t) for t in data["continuation"]],
            int(data["k"]),
            **kwargs,
        )
        return {
            "predictions": [
                {"position": p.position, "entries": [[t, lp] for t, lp in p.entries]}
                for p in predictions
            ]
        }

    def _layer_index(self, value, layer_count: int) -> int:
        if value == "middle" or value is None:
            return LayerSelector.middle().resolve(layer_count)
        return LayerSelector.at(int(value)).resolve(layer_count)

    def _op_attention(self, data: dict) -> dict:
        caps = self.backend.capabilities()
        layer_idx = self._layer_index(data.get("layer"), caps.layer_count)
        span = AttentionSpan(data.get("span", "all"))
        kwargs = {}
        if data.get("noise") is not None:
            n = data["noise"]
            kwargs["noise"] = (
                EmbeddingNoise(sigma=float(n["sigma"]), seed=int(n["seed"])),
                (int(n["lo"]), int(n["hi"])),
            )
        alloc = self.backend.attention_from_ranges(
            [int(t) for t in data["prompt"]],
            _ranges_from_payload(data["ranges"]),
            [int(t) for t in data["response"]],
            layer_idx,
            span,
            **kwargs,
        )
        return {
            "lambda_sys": alloc.lambda_sys,
            "lambda_vis": alloc.lambda_vis,
            "lambda_ins": alloc.lambda_ins,
        }

    def _op_profile(self, data: dict) -> dict:
        allocations = self.backend.profile_from_ranges(
            [int(t) for t in data["prompt"]],
            _ranges_from_payload(data["ranges"]),
            int(data["first_token"]),
        )
        return {
            "allocations": [
                {"lambda_sys": a.lambda_sys, "lambda_vis": a.lambda_vis,
                 "lambda_ins": a.lambda_ins}
                for a in allocations
            ]
        }

    def _op_decode(self, data: dict) -> dict:
        return {"text": self.backend.decode([int(t) for t in data["tokens"]])}


def serve(backend, stdin=None, stdout=None) -> None:
    """Blocking request loop over text streams (defaults: process stdio)."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    server = BackendServer(backend)
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        stdout.write(server.handle_line(line))
        stdout.write("\n")
        stdout.flush()


# --- client side ---------------------------------------------------------------


class SubprocessBackend:
    """Backend-contract client speaking the wire protocol to a child process."""

    def __init__(
        self,
        command: str | Sequence[str],
        local_decode: Optional[Callable[[Sequence[TokenId]], str]] = None,
    ):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        try:
            self._proc = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as e:
            raise BackendError(f"cannot launch backend {argv!r}: {e}") from e
        self._lock = threading.Lock()
        self._next_id = 0
        self._caps: Optional[Capabilities] = None
        self._local_decode = local_decode

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def __enter__(self) -> "SubprocessBackend":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def request(self, op: str, data: dict) -> dict:
        with self._lock:
            self._next_id += 1
            req_id = self._next_id
            line = encode_message({"id": req_id, "op": op, "data": data})
            try:
                self._proc.stdin.write(line + "\n")
                self._proc.stdin.flush()
                reply = self._proc.stdout.readline()
            except (OSError, ValueError) as e:
                raise BackendError(f"backend process I/O failed: {e}") from e
        if not reply:
            raise BackendError("backend process closed its output")
        message = decode_message(reply)
        if message.get("id") != req_id:
            raise ProtocolError(
                f"response id {message.get('id')} does not match request {req_id}"
            )
        if message.get("ok"):
            return message.get("data", {})
        error = message.get("error", {})
        exc_type = _CODE_TO_ERROR.get(error.get("code"), BackendError)
        raise exc_type(error.get("message", "backend error"))

    # -- backend contract ----------------------------------------------------

    def capabilities(self) -> Capabilities:
        if self._caps is None:
            data = self.request("capabilities", {})
            self._caps = Capabilities(
                context_limit=int(data["context_limit"]),
                layer_count=int(data["layer_count"]),
                vocab_size=int(data["vocab_size"]),
                single_flight=bool(data["single_flight"]),
                segment_delimiter=data.get("segment_delimiter"),
                embedding_noise=bool(data.get("embedding_noise", False)),
                supports_decode=bool(data.get("supports_decode", False)),
                deterministic_sampling=bool(data.get("deterministic_sampling", True)),
            )
        return self._caps

    def sample(
        self, prompt_tokens: Sequence[TokenId], params: SampleParams
    ) -> list[Trajectory]:
        data = self.request(
            "sample",
            {
                "prompt": [int(t) for t in prompt_tokens],
                "params": {
                    "n": params.n,
                    "temperature": params.temperature,
                    "max_tokens": params.max_tokens,
                    "seed": params.seed,
                },
            },
        )
        return [
            Trajectory.from_text(t["tokens"], t["text"], Finish(t["finish"]))
            for t in data["trajectories"]
        ]

    def teacher_forced_topk(
        self,
        prompt_tokens: Sequence[TokenId],
        continuation: Sequence[TokenId],
        k: int,
        noise=None,
    ) -> list[TopKPrediction]:
        payload = {
            "prompt": [int(t) for t in prompt_tokens],
            "continuation": [int(t) for t in continuation],
            "k": int(k),
        }
        if noise is not None:
            payload["noise"] = _noise_payload(noise[0], noise[1])
        data = self.request("topk", payload)
        return [
            TopKPrediction(
                position=int(p["position"]),
                entries=tuple((int(t), float(lp)) for t, lp in p["entries"]),
            )
            for p in data["predictions"]
        ]

    def _render(self, prompt: SegmentedPrompt):
        delim = self.capabilities().segment_delimiter
        tokens, spans = render_with_spans(prompt, delimiter=delim)
        noise_payload = None
        if prompt.noise is not None:
            if not self.capabilities().embedding_noise:
                raise CapabilityError("backend does not support embedding noise")
            noise_payload = _noise_payload(prompt.noise, spans[Role.VISUAL])
        return tokens, spans, noise_payload

    def segment_attention(
        self,
        prompt: SegmentedPrompt,
        response_tokens: Sequence[TokenId],
        layer: LayerSelector,
        span: AttentionSpan,
    ) -> AttentionAllocation:
        tokens, spans, noise_payload = self._render(prompt)
        payload = {
            "prompt": tokens,
            "ranges": _ranges_payload(spans),
            "response": [int(t) for t in response_tokens],
            "layer": "middle" if layer.is_middle else layer.index,
            "span": span.value,
        }
        if noise_payload is not None:
            payload["noise"] = noise_payload
        data = self.request("attention", payload)
        return AttentionAllocation(
            lambda_sys=float(data["lambda_sys"]),
            lambda_vis=float(data["lambda_vis"]),
            lambda_ins=float(data["lambda_ins"]),
        )

    def layer_profile(
        self, prompt: SegmentedPrompt, response_first_token: TokenId
    ) -> list[AttentionAllocation]:
        tokens, spans, _ = self._render(prompt)
        data = self.request(
            "profile",
            {
                "prompt": tokens,
                "ranges": _ranges_payload(spans),
                "first_token": int(response_first_token),
            },
        )
        return [
            AttentionAllocation(
                lambda_sys=float(a["lambda_sys"]),
                lambda_vis=float(a["lambda_vis"]),
                lambda_ins=float(a["lambda_ins"]),
            )
            for a in data["allocations"]
        ]

    def decode(self, tokens: Sequence[TokenId]) -> str:
        if self.capabilities().supports_decode:
            return self.request("decode", {"tokens": [int(t) for t in tokens]})["text"]
        if self._local_decode is not None:
            return self._local_decode(tokens)
        return " ".join(str(t) for t in tokens)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Serve a toy-model checkpoint over stdio."""
    import argparse

    from .toymodel import ModelCheckpoint
    from .toytask import SyntheticTaskConfig, build_vocab

    parser = argparse.ArgumentParser(description="serve a toy checkpoint on stdio")
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--task-config", default=None,
                        help="JSON synthetic-task config used to rebuild the vocabulary")
    args = parser.parse_args(argv)

    ckpt = ModelCheckpoint.load(args.checkpoint)
    vocab = None
    if args.task_config:
        with open(args.task_config, "r", encoding="utf-8") as f:
            vocab = build_vocab(SyntheticTaskConfig(**json.load(f)))
    serve(ckpt.to_model(vocab=vocab))
    return 0


if __name__ == "__main__":
    sys.exit(main())
