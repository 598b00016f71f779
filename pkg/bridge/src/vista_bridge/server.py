"""Newline-delimited JSON backend server over a Hugging Face causal LM.

Speaks the pipeline's wire protocol on stdio: ``capabilities``, ``sample``,
``topk``, ``attention`` and ``profile``, plus the advertised extensions
``decode`` (token ids to text) and ``render`` (role texts to prompt tokens
with recoverable per-role index ranges). Attention requests carry role
ranges and are answered with the three aggregated lambda sums, computed
server-side from head-averaged weights at the requested layer.

Role mapping: prompts are assembled as
``SYS: <system> VIS: <visual> INS: <instruction> OUT:`` where the marker
words are tokenizer vocabulary entries; the reported ranges cover exactly
the role-text tokens, so decoding a range reproduces the role's source
text. The marker strings are reported in the capabilities payload.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from transformers import AutoModelForCausalLM, AutoTokenizer

STOP_WORD = "</answer>"
ROLE_KEYS = ("system", "visual", "instruction")


def stable_hash(*parts) -> int:
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, int):
            h.update(b"i" + part.to_bytes(16, "little", signed=True))
        else:
            data = str(part).encode("utf-8")
            h.update(b"s" + len(data).to_bytes(4, "little") + data)
    return int.from_bytes(h.digest(), "little") & ((1 << 63) - 1)


class BridgeError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class BridgeConfig:
    model_path: str
    device: str = "cpu"
    max_context: Optional[int] = None
    marker_system: str = "SYS:"
    marker_visual: str = "VIS:"
    marker_instruction: str = "INS:"
    marker_output: str = "OUT:"


class HfBackend:
    """Model wrapper translating protocol requests into tensor operations."""

    def __init__(self, cfg: BridgeConfig):
        torch.set_num_threads(1)  # determinism on CPU
        self.cfg = cfg
        self.tokenizer = AutoTokenizer.from_pretrained(cfg.model_path)
        self.model = AutoModelForCausalLM.from_pretrained(
            cfg.model_path, attn_implementation="eager"
        )
        self.model.to(cfg.device)
        self.model.eval()
        mc = self.model.config
        self.layer_count = int(mc.num_hidden_layers)
        self.vocab_size = int(mc.vocab_size)
        self.context_limit = int(
            cfg.max_context or getattr(mc, "max_position_embeddings", 2048)
        )
        stop = self.tokenizer.convert_tokens_to_ids(STOP_WORD)
        unk = self.tokenizer.unk_token_id
        self.stop_id = None if stop is None or stop == unk else int(stop)
        if self.stop_id is None:
            self.stop_id = self.tokenizer.eos_token_id

    # -- helpers ---------------------------------------------------------

    def _check_context(self, needed: int) -> None:
        if needed > self.context_limit:
            raise BridgeError(
                "context",
                f"sequence of {needed} tokens exceeds context {self.context_limit}",
            )

    def _check_tokens(self, tokens: Sequence[int]) -> list[int]:
        out = []
        for t in tokens:
            t = int(t)
            if not 0 <= t < self.vocab_size:
                raise BridgeError("bad_request", f"token id {t} out of vocabulary")
            out.append(t)
        return out

    def _forward(self, tokens: Sequence[int], attentions: bool = False):
        ids = torch.tensor([list(tokens)], dtype=torch.long, device=self.cfg.device)
        with torch.no_grad():
            return self.model(ids, output_attentions=attentions)

    def decode(self, tokens: Sequence[int]) -> str:
        return self.tokenizer.decode(
            self._check_tokens(tokens), skip_special_tokens=False,
            clean_up_tokenization_spaces=False,
        )

    def _encode(self, text: str) -> list[int]:
        return self.tokenizer.encode(text, add_special_tokens=False)

    # -- protocol operations ----------------------------------------------

    def capabilities(self) -> dict:
        return {
            "context_limit": self.context_limit,
            "layer_count": self.layer_count,
            "vocab_size": self.vocab_size,
            "single_flight": True,
            "segment_delimiter": None,
            "embedding_noise": False,
            "supports_decode": True,
            "deterministic_sampling": self.cfg.device == "cpu",
            "template": {
                "system": self.cfg.marker_system,
                "visual": self.cfg.marker_visual,
                "instruction": self.cfg.marker_instruction,
                "output": self.cfg.marker_output,
            },
        }

    def render(self, segments: dict) -> dict:
        """Assemble role texts into prompt tokens with per-role ranges."""
        markers = {
            "system": self.cfg.marker_system,
            "visual": self.cfg.marker_visual,
            "instruction": self.cfg.marker_instruction,
        }
        tokens: list[int] = []
        ranges = {}
        for role in ROLE_KEYS:
            if role not in segments:
                raise BridgeError("bad_request", f"missing segment {role!r}")
            tokens.extend(self._encode(markers[role]))
            body = self._encode(str(segments[role]))
            ranges[role] = [len(tokens), len(tokens) + len(body)]
            tokens.extend(body)
        tokens.extend(self._encode(self.cfg.marker_output))
        self._check_context(len(tokens))
        return {"tokens": tokens, "ranges": ranges}

    def sample(self, prompt: Sequence[int], params: dict) -> list[dict]:
        prompt = self._check_tokens(prompt)
        n = int(params.get("n", 1))
        temperature = float(params.get("temperature", 1.0))
        max_tokens = int(params.get("max_tokens", 64))
        seed = int(params.get("seed", 0))
        self._check_context(len(prompt) + max_tokens)
        out = []
        for j in range(n):
            gen = torch.Generator(device="cpu")
            gen.manual_seed(stable_hash(seed, "sample", j) % (1 << 62))
            seq = list(prompt)
            generated: list[int] = []
            finish = "length_limit"
            for _ in range(max_tokens):
                logits = self._forward(seq).logits[0, -1]
                if temperature == 0.0:
                    nxt = int(torch.argmax(logits).item())
                else:
                    probs = torch.softmax(logits / temperature, dim=-1)
                    nxt = int(torch.multinomial(probs, 1, generator=gen).item())
                generated.append(nxt)
                seq.append(nxt)
                if self.stop_id is not None and nxt == self.stop_id:
                    finish = "stop"
                    break
            out.append(
                {"tokens": generated, "text": self.decode(generated), "finish": finish}
            )
        return out

    def topk(self, prompt: Sequence[int], continuation: Sequence[int], k: int) -> list[dict]:
        prompt = self._check_tokens(prompt)
        continuation = self._check_tokens(continuation)
        if k < 1:
            raise BridgeError("bad_request", "k must be >= 1")
        if not continuation:
            raise BridgeError("bad_request", "continuation must be non-empty")
        if not prompt:
            raise BridgeError("bad_request", "prompt must be non-empty")
        seq = prompt + continuation
        self._check_context(len(seq))
        logits = self._forward(seq).logits[0]
        positions = range(len(prompt) - 1, len(seq) - 1)
        lps = torch.log_softmax(logits, dim=-1).double().cpu().numpy()
        kk = min(k, self.vocab_size)
        predictions = []
        for i, pos in enumerate(positions):
            row = lps[pos]
            order = np.lexsort((np.arange(row.size), -row))[:kk]
            predictions.append(
                {
                    "position": i,
                    "entries": [[int(t), float(row[t])] for t in order],
                }
            )
        return predictions

    def _ranges(self, payload: dict) -> dict[str, tuple[int, int]]:
        try:
            return {
                role: (int(payload[role][0]), int(payload[role][1]))
                for role in ROLE_KEYS
            }
        except (KeyError, IndexError, TypeError) as e:
            raise BridgeError("bad_request", f"bad segment ranges: {e}") from e

    def _attention_matrix(self, tokens: Sequence[int], layer: int) -> np.ndarray:
        if not 0 <= layer < self.layer_count:
            raise BridgeError("layer", f"layer {layer} out of range")
        self._check_context(len(tokens))
        out = self._forward(tokens, attentions=True)
        # (heads, T, T) head-averaged
        return out.attentions[layer][0].double().mean(dim=0).cpu().numpy()

    def _resolve_layer(self, value) -> int:
        if value in ("middle", None):
            return self.layer_count // 2
        layer = int(value)
        if not 0 <= layer < self.layer_count:
            raise BridgeError("layer", f"layer {layer} out of range")
        return layer

    def attention(self, data: dict) -> dict:
        if data.get("noise") is not None:
            raise BridgeError("capability", "embedding noise is not supported")
        prompt = self._check_tokens(data["prompt"])
        response = self._check_tokens(data["response"])
        if not response:
            raise BridgeError("bad_request", "response must be non-empty")
        ranges = self._ranges(data["ranges"])
        layer = self._resolve_layer(data.get("layer"))
        attn = self._attention_matrix(prompt + response, layer)
        first = len(prompt)
        if data.get("span", "all") == "first":
            rows = attn[first : first + 1]
        else:
            rows = attn[first:]
        sums = {}
        for role, (lo, hi) in ranges.items():
            if not 0 <= lo <= hi <= len(prompt):
                raise BridgeError("bad_request", f"range for {role} exceeds prompt")
            sums[role] = float(rows[:, lo:hi].sum())
        return {
            "lambda_sys": sums["system"],
            "lambda_vis": sums["visual"],
            "lambda_ins": sums["instruction"],
        }

    def profile(self, data: dict) -> dict:
        prompt = self._check_tokens(data["prompt"])
        ranges = self._ranges(data["ranges"])
        first_token = int(data["first_token"])
        seq = prompt + [first_token]
        self._check_context(len(seq))
        out = self._forward(seq, attentions=True)
        allocations = []
        for layer in range(self.layer_count):
            row = out.attentions[layer][0].double().mean(dim=0).cpu().numpy()[-1]
            entry = {}
            for role, (lo, hi) in ranges.items():
                entry[role] = float(row[lo:hi].sum())
            allocations.append(
                {
                    "lambda_sys": entry["system"],
                    "lambda_vis": entry["visual"],
                    "lambda_ins": entry["instruction"],
                }
            )
        return {"allocations": allocations}


def encode_message(message: dict) -> str:
    return json.dumps(message, sort_keys=True, separators=(",", ":"))


class ProtocolServer:
    def __init__(self, backend: HfBackend):
        self.backend = backend

    def handle_line(self, line: str) -> str:
        req_id = 0
        try:
            try:
                message = json.loads(line)
            except json.JSONDecodeError as e:
                raise BridgeError("bad_request", f"malformed request: {e}") from e
            if not isinstance(message, dict):
                raise BridgeError("bad_request", "request must be a JSON object")
            req_id = int(message.get("id", 0))
            op = message.get("op")
            data = message.get("data", {}) or {}
            if op == "capabilities":
                result = self.backend.capabilities()
            elif op == "sample":
                result = {"trajectories": self.backend.sample(data["prompt"], data["params"])}
            elif op == "topk":
                if data.get("noise") is not None:
                    raise BridgeError("capability", "embedding noise is not supported")
                result = {
                    "predictions": self.backend.topk(
                        data["prompt"], data["continuation"], int(data["k"])
                    )
                }
            elif op == "attention":
                result = self.backend.attention(data)
            elif op == "profile":
                result = self.backend.profile(data)
            elif op == "decode":
                result = {"text": self.backend.decode(data["tokens"])}
            elif op == "render":
                result = self.backend.render(data)
            else:
                raise BridgeError("unsupported", f"unknown op {op!r}")
            return encode_message({"id": req_id, "ok": True, "data": result})
        except BridgeError as e:
            return encode_message(
                {"id": req_id, "ok": False, "error": {"code": e.code, "message": str(e)}}
            )
        except (KeyError, TypeError, ValueError) as e:
            return encode_message(
                {"id": req_id, "ok": False,
                 "error": {"code": "bad_request", "message": f"{type(e).__name__}: {e}"}}
            )
        except Exception as e:  # keep serving; report as backend failure
            return encode_message(
                {"id": req_id, "ok": False,
                 "error": {"code": "backend", "message": f"{type(e).__name__}: {e}"}}
            )


def serve(backend: HfBackend, stdin=None, stdout=None) -> None:
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    server = ProtocolServer(backend)
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        stdout.write(server.handle_line(line))
        stdout.write("\n")
        stdout.flush()


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="serve a causal LM over stdio")
    parser.add_argument("--model", required=True, help="model directory or identifier")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--max-context", type=int, default=None)
    args = parser.parse_args(argv)
    try:
        backend = HfBackend(
            BridgeConfig(model_path=args.model, device=args.device,
                         max_context=args.max_context)
        )
    except Exception as e:
        print(f"fatal: cannot load model: {e}", file=sys.stderr)
        return 3
    serve(backend)
    return 0


if __name__ == "__main__":
    sys.exit(main())
