"""Loss functions and toy-model optimization.

SFT loss is the length-normalized NLL of the full tagged response (tag
tokens counted). The preference loss combines a sigmoid margin on
beta-scaled policy/reference logprob differences (sequence sums, no length
normalization) with an added length-normalized NLL on the chosen response.
Every iteration trains from the base checkpoint, never from the previous
iteration's model.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import QueryRecord, Solution, TokenId, render_prompt
from .errors import ConfigError, IoError, TrainError, UsageError
from .seeds import stable_hash
from .toymodel import ModelCheckpoint, ParameterVector, ToyModel, params_hash

log = logging.getLogger("vista.train")

SftItem = tuple[list[TokenId], list[TokenId]]            # (prompt, response)
PairItem = tuple[list[TokenId], list[TokenId], list[TokenId]]  # (+ rejected)

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    learning_rate: float = 1e-3
    batch_size: int = 8
    alpha: float = 0.5
    beta: float = 0.1
    seed: int = 0
    freeze_visual_embeddings: bool = True
    # non-default variant: length-normalize the logprobs inside the margin
    normalized_margin: bool = False

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError("alpha and beta must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


def sft_loss(
    model: ToyModel, prompt_tokens: Sequence[TokenId], response_tokens: Sequence[TokenId]
) -> tuple[float, np.ndarray]:
    """Length-normalized NLL of the response and its exact gradient."""
    if not response_tokens:
        raise UsageError("response must be non-empty")
    lps, grad = model.logprob_with_gradient(prompt_tokens, response_tokens)
    n = len(response_tokens)
    return float(-lps.sum() / n), -grad / n


def _neg_log_sigmoid(x: float) -> float:
    # -log(sigmoid(x)) = log(1 + exp(-x)), stable for both signs
    return float(np.logaddexp(0.0, -x))


def dpo_nll_loss(
    policy: ToyModel,
    reference: ToyModel,
    prompt_tokens: Sequence[TokenId],
    chosen_tokens: Sequence[TokenId],
    rejected_tokens: Sequence[TokenId],
    alpha: float,
    beta: float,
    normalized_margin: bool = False,
) -> tuple[float, np.ndarray]:
    """Sigmoid preference loss plus alpha times the chosen-response NLL.

    The margin uses summed sequence logprobs (policy minus frozen reference,
    scaled by beta); only the NLL regularizer is length-normalized.
    """
    if not chosen_tokens or not rejected_tokens:
        raise UsageError("pair responses must be non-empty")
    c_lps, c_grad = policy.logprob_with_gradient(prompt_tokens, chosen_tokens)
    r_lps, r_grad = policy.logprob_with_gradient(prompt_tokens, rejected_tokens)
    ref_c = float(reference.response_logprobs(prompt_tokens, chosen_tokens).sum())
    ref_r = float(reference.response_logprobs(prompt_tokens, rejected_tokens).sum())
    len_c = len(chosen_tokens)
    len_r = len(rejected_tokens)

    if normalized_margin:
        f_c = beta * (float(c_lps.sum()) - ref_c) / len_c
        f_r = beta * (float(r_lps.sum()) - ref_r) / len_r
        dmargin = beta * (c_grad / len_c - r_grad / len_r)
    else:
        f_c = beta * (float(c_lps.sum()) - ref_c)
        f_r = beta * (float(r_lps.sum()) - ref_r)
        dmargin = beta * (c_grad - r_grad)
    margin = f_c - f_r

    nll = -float(c_lps.sum()) / len_c
    loss = _neg_log_sigmoid(margin) + alpha * nll
    # d/dm of -log sigmoid(m) is -sigmoid(-m)
    sig_neg = 1.0 / (1.0 + np.exp(margin)) if margin > -30 else 1.0
    grad = -sig_neg * dmargin + alpha * (-c_grad / len_c)
    return float(loss), grad


def dataset_hash(items: Sequence) -> str:
    h = hashlib.sha256()
    for item in items:
        h.update(json.dumps([[int(t) for t in part] for part in item]).encode())
        h.update(b"\n")
    return h.hexdigest()


def _frozen_slice(params: ParameterVector) -> Optional[slice]:
    lo, hi = params.cfg.visual_vocab_range
    if hi <= lo:
        return None
    emb_lo, _, _ = params.offsets["emb"]
    d = params.cfg.d_model
    return slice(emb_lo + lo * d, emb_lo + hi * d)


def fit(
    base: ModelCheckpoint,
    dataset: Sequence,
    cfg: TrainConfig,
    objective: str = "sft",
    vocab=None,
    iteration: int = 0,
    log_path=None,
) -> ModelCheckpoint:
    """Adam fine-tuning from the base checkpoint.

    ``dataset`` holds SftItem tuples for "sft" and PairItem tuples for
    "dpo" (the reference model is the base itself). Shuffling, batching and
    updates are fully determined by cfg.seed.
    """
    if objective not in ("sft", "dpo"):
        raise ConfigError(f"unknown objective {objective!r}")
    if not dataset:
        raise UsageError("dataset must be non-empty")
    policy = ToyModel(base.config, base.params.copy(), vocab=vocab)
    reference = ToyModel(base.config, base.params, vocab=vocab) if objective == "dpo" else None

    frozen = _frozen_slice(policy.params) if cfg.freeze_visual_embeddings else None
    m = np.zeros(policy.params.size)
    v = np.zeros(policy.params.size)
    step = 0
    rng = np.random.default_rng(stable_hash(cfg.seed, "shuffle"))
    loss_rows: list[tuple[int, float]] = []

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), cfg.batch_size):
            batch = [dataset[i] for i in order[start : start + cfg.batch_size]]
            grad = np.zeros(policy.params.size)
            loss = 0.0
            for item in batch:
                if objective == "sft":
                    l, g = sft_loss(policy, item[0], item[1])
                else:
                    l, g = dpo_nll_loss(
                        policy, reference, item[0], item[1], item[2],
                        alpha=cfg.alpha, beta=cfg.beta,
                        normalized_margin=cfg.normalized_margin,
                    )
                loss += l
                grad += g
            loss /= len(batch)
            grad /= len(batch)
            step += 1
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainError(f"non-finite loss at step {step}", batch_id=step)
            if frozen is not None:
                grad[frozen] = 0.0
            m = ADAM_B1 * m + (1 - ADAM_B1) * grad
            v = ADAM_B2 * v + (1 - ADAM_B2) * grad * grad
            mhat = m / (1 - ADAM_B1**step)
            vhat = v / (1 - ADAM_B2**step)
            policy.params.flat -= cfg.learning_rate * mhat / (np.sqrt(vhat) + ADAM_EPS)
            loss_rows.append((step, loss))

    if log_path is not None:
        save_loss_log(loss_rows, log_path)
    provenance = {
        "iteration": iteration,
        "objective": objective,
        "base_hash": base.hash,
        "dataset_hash": dataset_hash(dataset),
        "steps": step,
    }
    return ModelCheckpoint(base.config, policy.params, provenance=provenance)


def save_loss_log(rows: Sequence[tuple[int, float]], path) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "loss"])
            for step, loss in rows:
                writer.writerow([step, repr(loss)])
    except OSError as e:
        raise IoError(f"cannot write training log {path}: {e}") from e


# --- dataset builders ---------------------------------------------------------


def sft_items(
    solutions: Sequence[Solution],
    queries: dict[str, QueryRecord],
    delimiter: Optional[TokenId],
) -> list[SftItem]:
    items: list[SftItem] = []
    for sol in solutions:
        prompt = render_prompt(queries[sol.query_id].prompt, delimiter=delimiter)
        items.append((prompt, list(sol.trajectory.tokens)))
    return items


def pair_items(
    pairs: Sequence,
    queries: dict[str, QueryRecord],
    delimiter: Optional[TokenId],
) -> list[PairItem]:
    items: list[PairItem] = []
    for pair in pairs:
        prompt = render_prompt(queries[pair.query_id].prompt, delimiter=delimiter)
        items.append(
            (prompt, list(pair.chosen.trajectory.tokens), list(pair.rejected.trajectory.tokens))
        )
    return items
