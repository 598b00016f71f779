"""A tiny decoder-only transformer with exact analytic gradients.

Pure numpy, double precision, no autograd: the backward pass is written by
hand so that gradients of response log-likelihoods are exact and runs are
bit-reproducible. The model satisfies the full backend contract (sampling,
teacher-forced top-k, per-layer attention extraction) and additionally
exposes ``logprob_with_gradient`` for the training module.

Architecture: learned token + absolute positional embeddings, pre-LayerNorm
blocks of causal multi-head self-attention and a tanh MLP, final LayerNorm,
untied output head.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from .backend import (
    AttentionAllocation,
    AttentionSpan,
    Capabilities,
    LayerSelector,
    SampleParams,
    TopKPrediction,
    sort_topk,
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
from .errors import ConfigError, ContextError, IoError, LayerError, UsageError
from .seeds import stable_hash

LN_EPS = 1e-8
INIT_STD = 0.02


@dataclass(frozen=True)
class ToyModelConfig:
    vocab_size: int = 512
    d_model: int = 64
    heads: int = 4
    layers: int = 4
    context: int = 256
    visual_vocab_range: tuple[int, int] = (0, 0)
    init_seed: int = 0

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ConfigError("d_model must be divisible by heads")
        lo, hi = self.visual_vocab_range
        if not (0 <= lo <= hi <= self.vocab_size):
            raise ConfigError("visual_vocab_range must lie within the vocabulary")
        if min(self.vocab_size, self.d_model, self.heads, self.layers, self.context) < 1:
            raise ConfigError("all model dimensions must be positive")

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["visual_vocab_range"] = list(self.visual_vocab_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToyModelConfig":
        d = dict(d)
        d["visual_vocab_range"] = tuple(d.get("visual_vocab_range", (0, 0)))
        return cls(**d)


def param_spec(cfg: ToyModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) layout of the flat parameter vector."""
    V, d, ff, C = cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.context
    spec: list[tuple[str, tuple[int, ...]]] = [("emb", (V, d)), ("pos", (C, d))]
    for l in range(cfg.layers):
        spec += [
            (f"l{l}.ln1_g", (d,)),
            (f"l{l}.ln1_b", (d,)),
            (f"l{l}.wq", (d, d)),
            (f"l{l}.wk", (d, d)),
            (f"l{l}.wv", (d, d)),
            (f"l{l}.wo", (d, d)),
            (f"l{l}.ln2_g", (d,)),
            (f"l{l}.ln2_b", (d,)),
            (f"l{l}.w1", (d, ff)),
            (f"l{l}.b1", (ff,)),
            (f"l{l}.w2", (ff, d)),
            (f"l{l}.b2", (d,)),
        ]
    spec += [("lnf_g", (d,)), ("lnf_b", (d,)), ("head", (d, V))]
    return spec


class ParameterVector:
    """Flat float64 parameter array with named reshaped views."""

    def __init__(self, cfg: ToyModelConfig, flat: Optional[np.ndarray] = None):
        self.cfg = cfg
        self.spec = param_spec(cfg)
        self.offsets: dict[str, tuple[int, int, tuple[int, ...]]] = {}
        off = 0
        for name, shape in self.spec:
            size = int(np.prod(shape))
            self.offsets[name] = (off, off + size, shape)
            off += size
        self.size = off
        if flat is None:
            flat = np.zeros(self.size, dtype=np.float64)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ConfigError(f"expected {self.size} parameters, got {flat.shape}")
        self.flat = flat

    def view(self, name: str) -> np.ndarray:
        lo, hi, shape = self.offsets[name]
        return self.flat[lo:hi].reshape(shape)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.view(name)

    def names(self) -> list[str]:
        return [name for name, _ in self.spec]

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.cfg, self.flat.copy())

    def zeros_like(self) -> "ParameterVector":
        return ParameterVector(self.cfg, np.zeros(self.size, dtype=np.float64))

    def slice_of(self, name: str) -> slice:
        lo, hi, _ = self.offsets[name]
        return slice(lo, hi)

    @classmethod
    def initialized(cls, cfg: ToyModelConfig) -> "ParameterVector":
        rng = np.random.default_rng(cfg.init_seed)
        params = cls(cfg)
        for name, _ in params.spec:
            arr = params.view(name)
            if name.endswith("_g"):
                arr[:] = 1.0
            elif name.endswith("_b") or name.endswith(".b1") or name.endswith(".b2"):
                arr[:] = 0.0
            else:
                arr[:] = rng.normal(0.0, INIT_STD, size=arr.shape)
        return params


def _layernorm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    sigma = np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc / sigma
    return xhat * g + b, (xhat, sigma)


def _layernorm_backward(dy: np.ndarray, cache, g: np.ndarray):
    xhat, sigma = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) / sigma
    return dx, dg, db


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardResult:
    logits: np.ndarray                       # (T, V)
    attentions: Optional[list[np.ndarray]]   # per layer (H, T, T)
    cache: Optional[dict]


class ToyModel:
    """Backend-conformant tiny transformer over a synthetic vocabulary."""

    def __init__(self, cfg: ToyModelConfig, params: ParameterVector, vocab=None):
        if params.cfg != cfg:
            raise ConfigError("parameter vector was built for a different config")
        self.cfg = cfg
        self.params = params
        self.vocab = vocab

    @classmethod
    def build(cls, cfg: ToyModelConfig, vocab=None) -> "ToyModel":
        return cls(cfg, ParameterVector.initialized(cfg), vocab=vocab)

    def with_params(self, flat: np.ndarray) -> "ToyModel":
        return ToyModel(self.cfg, ParameterVector(self.cfg, np.asarray(flat)), self.vocab)

    # -- contract surface --------------------------------------------------

    def capabilities(self) -> Capabilities:
        return Capabilities(
            context_limit=self.cfg.context,
            layer_count=self.cfg.layers,
            vocab_size=self.cfg.vocab_size,
            single_flight=False,
            segment_delimiter=self.vocab.sep_id if self.vocab is not None else None,
            embedding_noise=True,
            supports_decode=self.vocab is not None,
        )

    def decode(self, tokens: Sequence[TokenId]) -> str:
        if self.vocab is None:
            return " ".join(str(t) for t in tokens)
        return self.vocab.decode(tokens)

    def _check_tokens(self, tokens: Sequence[TokenId]) -> np.ndarray:
        arr = np.asarray(tokens, dtype=np.int64)
        if arr.size and (arr.min() < 0 or arr.max() >= self.cfg.vocab_size):
            raise UsageError("token id out of vocabulary range")
        if arr.size > self.cfg.context:
            raise ContextError(
                f"sequence of {arr.size} tokens exceeds context {self.cfg.context}"
            )
        return arr

    def forward(
        self,
        tokens: Sequence[TokenId],
        noise: Optional[tuple[EmbeddingNoise, tuple[int, int]]] = None,
        need_cache: bool = False,
        need_attention: bool = False,
    ) -> ForwardResult:
        toks = self._check_tokens(tokens)
        if toks.size == 0:
            raise UsageError("empty sequence")
        p = self.params
        T = toks.size
        H, dh = self.cfg.heads, self.cfg.head_dim
        scale = 1.0 / np.sqrt(dh)

        x = p["emb"][toks] + p["pos"][:T]
        if noise is not None:
            spec, (lo, hi) = noise
            rng = np.random.default_rng(spec.seed)
            x = x.copy()
            x[lo:hi] += spec.sigma * rng.standard_normal((hi - lo, self.cfg.d_model))

        mask = np.tril(np.ones((T, T), dtype=bool))
        attentions: list[np.ndarray] = []
        layer_caches = []
        for l in range(self.cfg.layers):
            n1, ln1_cache = _layernorm(x, p[f"l{l}.ln1_g"], p[f"l{l}.ln1_b"])
            q = (n1 @ p[f"l{l}.wq"]).reshape(T, H, dh).transpose(1, 0, 2)
            k = (n1 @ p[f"l{l}.wk"]).reshape(T, H, dh).transpose(1, 0, 2)
            v = (n1 @ p[f"l{l}.wv"]).reshape(T, H, dh).transpose(1, 0, 2)
            scores = np.where(mask, (q @ k.transpose(0, 2, 1)) * scale, -np.inf)
            attn = _softmax_rows(scores)
            ctx = (attn @ v).transpose(1, 0, 2).reshape(T, self.cfg.d_model)
            x1 = x + ctx @ p[f"l{l}.wo"]
            n2, ln2_cache = _layernorm(x1, p[f"l{l}.ln2_g"], p[f"l{l}.ln2_b"])
            h = np.tanh(n2 @ p[f"l{l}.w1"] + p[f"l{l}.b1"])
            x2 = x1 + h @ p[f"l{l}.w2"] + p[f"l{l}.b2"]
            if need_attention:
                attentions.append(attn)
            if need_cache:
                layer_caches.append(
                    dict(x0=x, n1=n1, q=q, k=k, v=v, attn=attn, ctx=ctx, x1=x1,
                         n2=n2, h=h, ln1=ln1_cache, ln2=ln2_cache)
                )
            x = x2
        y, lnf_cache = _layernorm(x, p["lnf_g"], p["lnf_b"])
        logits = y @ p["head"]
        cache = None
        if need_cache:
            cache = dict(tokens=toks, layers=layer_caches, xf=x, y=y, lnf=lnf_cache)
        return ForwardResult(
            logits=logits,
            attentions=attentions if need_attention else None,
            cache=cache,
        )

    def backward(self, cache: dict, dlogits: np.ndarray) -> np.ndarray:
        """Gradient of a scalar with given dlogits, as a flat vector."""
        p = self.params
        grad = ParameterVector(self.cfg)
        toks = cache["tokens"]
        T = toks.size
        H, dh = self.cfg.heads, self.cfg.head_dim
        scale = 1.0 / np.sqrt(dh)

        grad.view("head")[:] = cache["y"].T @ dlogits
        dy = dlogits @ p["head"].T
        dx, dg, db = _layernorm_backward(dy, cache["lnf"], p["lnf_g"])
        grad.view("lnf_g")[:] = dg
        grad.view("lnf_b")[:] = db

        for l in reversed(range(self.cfg.layers)):
            c = cache["layers"][l]
            # MLP block: x2 = x1 + tanh(n2 @ w1 + b1) @ w2 + b2
            dm = dx
            grad.view(f"l{l}.w2")[:] = c["h"].T @ dm
            grad.view(f"l{l}.b2")[:] = dm.sum(axis=0)
            dh_act = dm @ p[f"l{l}.w2"].T
            dz = dh_act * (1.0 - c["h"] * c["h"])
            grad.view(f"l{l}.w1")[:] = c["n2"].T @ dz
            grad.view(f"l{l}.b1")[:] = dz.sum(axis=0)
            dn2 = dz @ p[f"l{l}.w1"].T
            dx1_ln, dg2, db2 = _layernorm_backward(dn2, c["ln2"], p[f"l{l}.ln2_g"])
            grad.view(f"l{l}.ln2_g")[:] = dg2
            grad.view(f"l{l}.ln2_b")[:] = db2
            dx1 = dx + dx1_ln
            # attention block: x1 = x0 + (attn @ v | heads) @ wo
            do = dx1
            grad.view(f"l{l}.wo")[:] = c["ctx"].T @ do
            dctx = (do @ p[f"l{l}.wo"].T).reshape(T, H, dh).transpose(1, 0, 2)
            dattn = dctx @ c["v"].transpose(0, 2, 1)
            dv = c["attn"].transpose(0, 2, 1) @ dctx
            a = c["attn"]
            dscores = a * (dattn - (dattn * a).sum(axis=-1, keepdims=True))
            dq = (dscores @ c["k"]) * scale
            dk = (dscores.transpose(0, 2, 1) @ c["q"]) * scale
            dq2 = dq.transpose(1, 0, 2).reshape(T, self.cfg.d_model)
            dk2 = dk.transpose(1, 0, 2).reshape(T, self.cfg.d_model)
            dv2 = dv.transpose(1, 0, 2).reshape(T, self.cfg.d_model)
            n1 = c["n1"]
            grad.view(f"l{l}.wq")[:] = n1.T @ dq2
            grad.view(f"l{l}.wk")[:] = n1.T @ dk2
            grad.view(f"l{l}.wv")[:] = n1.T @ dv2
            dn1 = dq2 @ p[f"l{l}.wq"].T + dk2 @ p[f"l{l}.wk"].T + dv2 @ p[f"l{l}.wv"].T
            dx0_ln, dg1, db1 = _layernorm_backward(dn1, c["ln1"], p[f"l{l}.ln1_g"])
            grad.view(f"l{l}.ln1_g")[:] = dg1
            grad.view(f"l{l}.ln1_b")[:] = db1
            dx = dx1 + dx0_ln

        demb = grad.view("emb")
        np.add.at(demb, toks, dx)
        grad.view("pos")[:T] += dx
        return grad.flat

    # -- log-likelihoods ----------------------------------------------------

    def _predict_positions(self, prompt_len: int, response_len: int) -> np.ndarray:
        if prompt_len < 1:
            raise UsageError("prompt must be non-empty")
        return np.arange(prompt_len - 1, prompt_len - 1 + response_len)

    def response_logprobs(
        self, prompt_tokens: Sequence[TokenId], response_tokens: Sequence[TokenId]
    ) -> np.ndarray:
        """Per-token log-probabilities of the response given the prompt."""
        seq = list(prompt_tokens) + list(response_tokens)
        out = self.forward(seq)
        pos = self._predict_positions(len(prompt_tokens), len(response_tokens))
        logits = out.logits[pos]
        logz = _logsumexp_rows(logits)
        targets = np.asarray(list(response_tokens), dtype=np.int64)
        return logits[np.arange(len(targets)), targets] - logz

    def logprob_with_gradient(
        self, prompt_tokens: Sequence[TokenId], response_tokens: Sequence[TokenId]
    ) -> tuple[np.ndarray, np.ndarray]:
        """Per-token response logprobs and the exact gradient of their sum."""
        if not response_tokens:
            raise UsageError("response must be non-empty")
        seq = list(prompt_tokens) + list(response_tokens)
        out = self.forward(seq, need_cache=True)
        pos = self._predict_positions(len(prompt_tokens), len(response_tokens))
        logits = out.logits[pos]
        logz = _logsumexp_rows(logits)
        targets = np.asarray(list(response_tokens), dtype=np.int64)
        lps = logits[np.arange(len(targets)), targets] - logz

        dlogits = np.zeros_like(out.logits)
        probs = np.exp(logits - logz[:, None])
        dsel = -probs
        dsel[np.arange(len(targets)), targets] += 1.0
        dlogits[pos] = dsel
        return lps, self.backward(out.cache, dlogits)

    # -- sampling ------------------------------------------------------------

    def _prefill_kv(self, tokens: Sequence[TokenId]):
        """Full forward capturing per-layer K/V caches and the last logits."""
        out = self.forward(tokens, need_cache=True)
        H, dh, C = self.cfg.heads, self.cfg.head_dim, self.cfg.context
        T = len(tokens)
        keys, values = [], []
        for layer in out.cache["layers"]:
            k = np.zeros((H, C, dh))
            v = np.zeros((H, C, dh))
            k[:, :T] = layer["k"]
            v[:, :T] = layer["v"]
            keys.append(k)
            values.append(v)
        return keys, values, T, out.logits[-1]

    def _decode_step(self, keys, values, pos: int, token: TokenId) -> np.ndarray:
        """Next-position logits via the KV cache; appends this position's K/V.

        Position activations are causal, so they match a full forward pass
        over the extended sequence.
        """
        p = self.params
        H, dh = self.cfg.heads, self.cfg.head_dim
        scale = 1.0 / np.sqrt(dh)
        x = (p["emb"][token] + p["pos"][pos]).reshape(1, -1)
        for l in range(self.cfg.layers):
            n1, _ = _layernorm(x, p[f"l{l}.ln1_g"], p[f"l{l}.ln1_b"])
            q = (n1 @ p[f"l{l}.wq"]).reshape(1, H, dh).transpose(1, 0, 2)
            k = (n1 @ p[f"l{l}.wk"]).reshape(1, H, dh).transpose(1, 0, 2)
            v = (n1 @ p[f"l{l}.wv"]).reshape(1, H, dh).transpose(1, 0, 2)
            keys[l][:, pos] = k[:, 0]
            values[l][:, pos] = v[:, 0]
            scores = (q @ keys[l][:, : pos + 1].transpose(0, 2, 1)) * scale
            attn = _softmax_rows(scores)
            ctx = (attn @ values[l][:, : pos + 1]).transpose(1, 0, 2).reshape(1, -1)
            x = x + ctx @ p[f"l{l}.wo"]
            n2, _ = _layernorm(x, p[f"l{l}.ln2_g"], p[f"l{l}.ln2_b"])
            h = np.tanh(n2 @ p[f"l{l}.w1"] + p[f"l{l}.b1"])
            x = x + h @ p[f"l{l}.w2"] + p[f"l{l}.b2"]
        y, _ = _layernorm(x, p["lnf_g"], p["lnf_b"])
        return (y @ p["head"])[0]

    def sample(
        self, prompt_tokens: Sequence[TokenId], params: SampleParams
    ) -> list[Trajectory]:
        prompt = list(int(t) for t in prompt_tokens)
        if not prompt:
            raise UsageError("prompt must be non-empty")
        if len(prompt) + params.max_tokens > self.cfg.context:
            raise ContextError(
                f"prompt {len(prompt)} + max_tokens {params.max_tokens} exceeds "
                f"context {self.cfg.context}"
            )
        stop_id = self.vocab.stop_id if self.vocab is not None else None
        out = []
        keys0, values0, pos0, logits0 = self._prefill_kv(prompt)
        for j in range(params.n):
            rng = np.random.default_rng(stable_hash(params.seed, "sample", j))
            keys = [k.copy() for k in keys0]
            values = [v.copy() for v in values0]
            pos, logits = pos0, logits0
            generated: list[int] = []
            finish = Finish.LENGTH_LIMIT
            for _ in range(params.max_tokens):
                if params.temperature == 0.0:
                    nxt = int(np.argmax(logits))
                else:
                    z = logits / params.temperature
                    z = z - z.max()
                    probs = np.exp(z)
                    probs /= probs.sum()
                    nxt = int(rng.choice(self.cfg.vocab_size, p=probs))
                generated.append(nxt)
                if stop_id is not None and nxt == stop_id:
                    finish = Finish.STOP
                    break
                if len(prompt) + len(generated) >= self.cfg.context:
                    break
                logits = self._decode_step(keys, values, pos, nxt)
                pos += 1
            out.append(Trajectory.from_text(generated, self.decode(generated), finish))
        return out

    # -- probing ---------------------------------------------------------------

    def teacher_forced_topk(
        self,
        prompt_tokens: Sequence[TokenId],
        continuation: Sequence[TokenId],
        k: int,
        noise: Optional[tuple[EmbeddingNoise, tuple[int, int]]] = None,
    ) -> list[TopKPrediction]:
        if k < 1:
            raise UsageError("k must be >= 1")
        if not continuation:
            raise UsageError("continuation must be non-empty")
        seq = list(prompt_tokens) + list(continuation)
        out = self.forward(seq, noise=noise)
        pos = self._predict_positions(len(prompt_tokens), len(continuation))
        logits = out.logits[pos]
        logz = _logsumexp_rows(logits)
        kk = min(k, self.cfg.vocab_size)
        preds = []
        for i in range(len(continuation)):
            lps = logits[i] - logz[i]
            # partial sort, then exact ordering with the tie-break rule
            cand = np.argpartition(-lps, kk - 1)[:kk] if kk < lps.size else np.arange(lps.size)
            pairs = [(int(t), float(lps[t])) for t in cand]
            preds.append(TopKPrediction(position=i, entries=sort_topk(pairs, kk)))
        return preds

    def _render(self, prompt: SegmentedPrompt):
        delim = self.vocab.sep_id if self.vocab is not None else None
        tokens, spans = render_with_spans(prompt, delimiter=delim)
        noise = None
        if prompt.noise is not None:
            noise = (prompt.noise, spans[Role.VISUAL])
        return tokens, spans, noise

    def attention_from_ranges(
        self,
        prompt_tokens: Sequence[TokenId],
        ranges: dict[Role, tuple[int, int]],
        response_tokens: Sequence[TokenId],
        layer_index: int,
        span: AttentionSpan,
        noise: Optional[tuple[EmbeddingNoise, tuple[int, int]]] = None,
    ) -> AttentionAllocation:
        """Range-based entry point shared with the wire protocol server."""
        if not response_tokens:
            raise UsageError("response_tokens must be non-empty")
        if not 0 <= layer_index < self.cfg.layers:
            raise LayerError(f"layer {layer_index} out of range")
        seq = list(prompt_tokens) + [int(t) for t in response_tokens]
        out = self.forward(seq, noise=noise, need_attention=True)
        attn = out.attentions[layer_index].mean(axis=0)  # head mean, (T, T)
        first = len(prompt_tokens)
        rows = (
            attn[first : first + 1]
            if span == AttentionSpan.FIRST_TOKEN
            else attn[first:]
        )
        sums = {}
        for role in (Role.SYSTEM, Role.VISUAL, Role.INSTRUCTION):
            lo, hi = ranges[role]
            sums[role] = float(rows[:, lo:hi].sum())
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
        layer_idx = layer.resolve(self.cfg.layers)
        tokens, spans, noise = self._render(prompt)
        return self.attention_from_ranges(
            tokens, spans, response_tokens, layer_idx, span, noise=noise
        )

    def profile_from_ranges(
        self,
        prompt_tokens: Sequence[TokenId],
        ranges: dict[Role, tuple[int, int]],
        first_token: TokenId,
        noise: Optional[tuple[EmbeddingNoise, tuple[int, int]]] = None,
    ) -> list[AttentionAllocation]:
        seq = list(prompt_tokens) + [int(first_token)]
        out = self.forward(seq, noise=noise, need_attention=True)
        allocations = []
        for layer_idx in range(self.cfg.layers):
            row = out.attentions[layer_idx].mean(axis=0)[-1]
            sums = {}
            for role in (Role.SYSTEM, Role.VISUAL, Role.INSTRUCTION):
                lo, hi = ranges[role]
                sums[role] = float(row[lo:hi].sum())
            allocations.append(
                AttentionAllocation(
                    lambda_sys=sums[Role.SYSTEM],
                    lambda_vis=sums[Role.VISUAL],
                    lambda_ins=sums[Role.INSTRUCTION],
                )
            )
        return allocations

    def layer_profile(
        self, prompt: SegmentedPrompt, response_first_token: TokenId
    ) -> list[AttentionAllocation]:
        tokens, spans, noise = self._render(prompt)
        return self.profile_from_ranges(tokens, spans, response_first_token, noise=noise)


def _logsumexp_rows(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1)
    return m + np.log(np.exp(logits - m[:, None]).sum(axis=-1))


# --- checkpoints -------------------------------------------------------------


def params_hash(params: ParameterVector) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(params.cfg.to_dict(), sort_keys=True).encode())
    h.update(params.flat.tobytes())
    return h.hexdigest()


@dataclass
class ModelCheckpoint:
    config: ToyModelConfig
    params: ParameterVector
    provenance: dict = field(default_factory=dict)

    @property
    def hash(self) -> str:
        return params_hash(self.params)

    def to_model(self, vocab=None) -> ToyModel:
        return ToyModel(self.config, self.params.copy(), vocab=vocab)

    def save(self, path) -> None:
        doc = {
            "kind": "toy-checkpoint",
            "version": 1,
            "config": self.config.to_dict(),
            "dtype": "float64",
            "params_b64": base64.b64encode(self.params.flat.tobytes()).decode("ascii"),
            "provenance": self.provenance,
        }
        try:
            with open(path, "w", encoding="utf-8") as f:
                json.dump(doc, f, sort_keys=True)
                f.write("\n")
        except OSError as e:
            raise IoError(f"cannot write checkpoint {path}: {e}") from e

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        try:
            with open(path, "r", encoding="utf-8") as f:
                doc = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise IoError(f"cannot read checkpoint {path}: {e}") from e
        if doc.get("kind") != "toy-checkpoint":
            raise IoError(f"{path} is not a toy checkpoint")
        cfg = ToyModelConfig.from_dict(doc["config"])
        flat = np.frombuffer(
            base64.b64decode(doc["params_b64"]), dtype=np.float64
        ).copy()
        return cls(cfg, ParameterVector(cfg, flat), provenance=doc.get("provenance", {}))


def build_toy_model(cfg: ToyModelConfig, vocab=None) -> ToyModel:
    return ToyModel.build(cfg, vocab=vocab)
