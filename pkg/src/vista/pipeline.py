"""End-to-end orchestration: seed-SFT, then per iteration collect, partition,
prefix-resample, VAS-score, filter, emit datasets, train from base, evaluate.

Every stage persists its artifacts under the run directory and records them
(with content hashes) in ``state.json``; a halted run resumes by skipping
stages whose artifacts are intact. All randomness is derived from the global
seed, so identical configs produce byte-identical artifacts.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

from .backend import LayerSelector, SampleParams, ScriptedBackend, ScriptedResponse
from .collect import (
    SeedConfig,
    build_seed_set,
    collect_candidates,
    difficulty_levels,
    evaluate_greedy,
    load_pool,
    save_pool,
    self_consistency,
)
from .core import (
    CandidatePool,
    Finish,
    QueryRecord,
    Role,
    SegmentedPrompt,
    Solution,
)
from .errors import BackendError, ConfigError, IoError, UsageError
from .organize import (
    build_pairs,
    build_sft_examples,
    dedup_and_cap,
    emit_pairs,
    emit_sft,
    read_jsonl,
)
from .resample import (
    PerturbStrategy,
    ResamplePolicy,
    resample_pool,
    resampling_report,
    save_audit,
)
from .seeds import stable_hash
from .toymodel import ModelCheckpoint, ToyModel, ToyModelConfig
from .toytask import SyntheticTaskConfig, build_vocab, generate_synthetic_tasks, make_demo_solutions
from .train import TrainConfig, fit, pair_items, sft_items
from .vas import (
    VasConfig,
    attention_profile_report,
    filter_by_vas,
    save_profile_csv,
    save_scores,
    score_solutions,
)
from .wire import SubprocessBackend

log = logging.getLogger("vista.pipeline")


# --- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class BackendSpec:
    kind: str  # "toy" | "scripted" | "subprocess"
    path: Optional[str] = None      # scripted fixture file
    command: Optional[str] = None   # subprocess command line

    def __post_init__(self):
        if self.kind not in ("toy", "scripted", "subprocess"):
            raise ConfigError(f"unknown backend kind {self.kind!r}")
        if self.kind == "scripted" and not self.path:
            raise ConfigError("scripted backend needs a fixture path")
        if self.kind == "subprocess" and not self.command:
            raise ConfigError("subprocess backend needs a command")


@dataclass(frozen=True)
class ModelSection:
    d_model: int = 64
    heads: int = 4
    layers: int = 4
    context: int = 256
    init_seed: int = 0
    vocab_size: Optional[int] = None  # default: exactly the task vocabulary


@dataclass(frozen=True)
class SeedSection:
    shots: int = 4
    samples_per_query: Optional[int] = None  # default: K
    demo_count: int = 4


@dataclass(frozen=True)
class PretrainSection:
    """Format pretraining that turns a fresh toy model into the base model.

    The base learns the tag template from noisy-answer examples (correct
    with probability ``competence``), standing in for a pretrained instruct
    model; 0 examples means the raw initialized model is the base.
    """

    examples: int = 384
    competence: float = 0.5
    epochs: int = 2
    learning_rate: float = 1e-3
    batch_size: int = 8
    max_shots: int = 2


@dataclass
class PipelineConfig:
    K: int = 10
    J: int = 3
    T: int = 1
    tau: float = -0.5
    detection_k: int = 5
    temperature: float = 1.0
    max_tokens: int = 128
    perturb: PerturbStrategy = field(default_factory=PerturbStrategy.swap)
    vas_layer: LayerSelector = field(default_factory=LayerSelector.middle)
    resample_policy: ResamplePolicy = field(default_factory=ResamplePolicy)
    objective: str = "sft"
    train: TrainConfig = field(default_factory=TrainConfig)
    global_seed: int = 0
    backend: BackendSpec = field(default_factory=lambda: BackendSpec("toy"))
    task: SyntheticTaskConfig = field(default_factory=SyntheticTaskConfig)
    model: ModelSection = field(default_factory=ModelSection)
    seed_section: SeedSection = field(default_factory=SeedSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    cap: Optional[int] = None
    accumulate: bool = False
    workers: int = 0
    profile_sample: int = 8
    self_consistency_n: Optional[int] = None
    # file-based inputs (required for scripted/subprocess backends)
    queries_path: Optional[str] = None
    testset_path: Optional[str] = None
    demos_path: Optional[str] = None

    def __post_init__(self):
        if self.K < 1 or self.J < 0 or self.T < 1:
            raise ConfigError("require K >= 1, J >= 0, T >= 1")
        if self.objective not in ("sft", "dpo"):
            raise ConfigError("objective must be 'sft' or 'dpo'")
        if self.resample_policy.correct_floor is None:
            self.resample_policy = ResamplePolicy(
                correct_floor=self.K,
                zero_first=self.resample_policy.zero_first,
                max_solutions_per_query=self.resample_policy.max_solutions_per_query,
            )

    # -- JSON round trip --------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "J": self.J,
            "T": self.T,
            "tau": "-inf" if math.isinf(self.tau) and self.tau < 0 else self.tau,
            "detection_k": self.detection_k,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "perturb": asdict(self.perturb),
            "vas_layer": "middle" if self.vas_layer.is_middle else self.vas_layer.index,
            "resample_policy": asdict(self.resample_policy),
            "objective": self.objective,
            "train": asdict(self.train),
            "global_seed": self.global_seed,
            "backend": asdict(self.backend),
            "task": {
                **asdict(self.task),
                "question_kinds": list(self.task.question_kinds),
                "difficulty_mix": list(self.task.difficulty_mix),
            },
            "model": asdict(self.model),
            "seed": asdict(self.seed_section),
            "pretrain": asdict(self.pretrain),
            "cap": self.cap,
            "accumulate": self.accumulate,
            "workers": self.workers,
            "profile_sample": self.profile_sample,
            "self_consistency_n": self.self_consistency_n,
            "queries_path": self.queries_path,
            "testset_path": self.testset_path,
            "demos_path": self.demos_path,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        kwargs: dict = {}
        for key in ("K", "J", "T", "detection_k", "temperature", "max_tokens",
                    "objective", "global_seed", "cap", "accumulate", "workers",
                    "profile_sample", "self_consistency_n",
                    "queries_path", "testset_path", "demos_path"):
            if key in d:
                kwargs[key] = d[key]
        tau = d.get("tau", -0.5)
        kwargs["tau"] = float("-inf") if tau in ("-inf", None) else float(tau)
        if "perturb" in d:
            kwargs["perturb"] = PerturbStrategy(**d["perturb"])
        if "vas_layer" in d:
            v = d["vas_layer"]
            kwargs["vas_layer"] = (
                LayerSelector.middle() if v in ("middle", None) else LayerSelector.at(int(v))
            )
        if "resample_policy" in d:
            kwargs["resample_policy"] = ResamplePolicy(**d["resample_policy"])
        if "train" in d:
            kwargs["train"] = TrainConfig(**d["train"])
        if "backend" in d:
            kwargs["backend"] = BackendSpec(**d["backend"])
        if "task" in d:
            task = dict(d["task"])
            if "question_kinds" in task:
                task["question_kinds"] = tuple(task["question_kinds"])
            if "difficulty_mix" in task:
                task["difficulty_mix"] = tuple(task["difficulty_mix"])
            kwargs["task"] = SyntheticTaskConfig(**task)
        if "model" in d:
            kwargs["model"] = ModelSection(**d["model"])
        if "seed" in d:
            kwargs["seed_section"] = SeedSection(**d["seed"])
        if "pretrain" in d:
            kwargs["pretrain"] = PretrainSection(**d["pretrain"])
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigError(f"bad config: {e}") from e

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                return cls.from_dict(json.load(f))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot load config {path}: {e}") from e


# --- query serialization ---------------------------------------------------------


def query_to_record(query: QueryRecord) -> dict:
    segs = {seg.role.value: list(seg.tokens) for seg in query.prompt.segments}
    return {
        "id": query.id,
        "gold_answer": query.gold_answer,
        "difficulty_level": query.difficulty_level,
        "segments": segs,
        "order": [seg.role.value for seg in query.prompt.segments],
    }


def query_from_record(rec: dict) -> QueryRecord:
    segs = rec["segments"]
    order = [Role(r) for r in rec.get("order", ["system", "visual", "instruction"])]
    prompt = SegmentedPrompt.build(
        segs["system"], segs["visual"], segs["instruction"],
        query_id=rec["id"], order=order,
    )
    return QueryRecord(
        id=rec["id"],
        prompt=prompt,
        gold_answer=rec["gold_answer"],
        difficulty_level=rec.get("difficulty_level"),
    )


def save_queries(queries: Sequence[QueryRecord], path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as f:
            for q in queries:
                f.write(json.dumps(query_to_record(q), sort_keys=True))
                f.write("\n")
    except OSError as e:
        raise IoError(f"cannot write queries {path}: {e}") from e


def load_queries(path) -> list[QueryRecord]:
    return [query_from_record(rec) for rec in read_jsonl(path)]


# --- scripted backend fixtures ---------------------------------------------------


def scripted_from_file(path) -> ScriptedBackend:
    """Build a replay backend from a JSON fixture document."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot load scripted fixture {path}: {e}") from e
    caps = doc.get("capabilities", {})
    words = {int(k): v for k, v in doc.get("decode_words", {}).items()}
    decode_fn = None
    if words:
        decode_fn = lambda toks: " ".join(words.get(int(t), str(t)) for t in toks)
    be = ScriptedBackend(
        context_limit=caps.get("context_limit", 4096),
        layer_count=caps.get("layer_count", 4),
        vocab_size=caps.get("vocab_size", 512),
        segment_delimiter=caps.get("segment_delimiter"),
        decode_fn=decode_fn,
    )

    def to_resp(r):
        return ScriptedResponse(
            tuple(r["tokens"]), r["text"], Finish(r.get("finish", "stop"))
        )

    if doc.get("default_response"):
        be.program_default_response(to_resp(doc["default_response"]))
    for prog in doc.get("programs", []):
        be.program_sample(
            prog["prompt"],
            [to_resp(r) for r in prog.get("responses", [])] or [to_resp(doc["default_response"])],
            by_seed={int(s): to_resp(r) for s, r in prog.get("by_seed", {}).items()},
        )
    if doc.get("default_topk_row"):
        be.program_default_topk_row([(int(t), float(lp)) for t, lp in doc["default_topk_row"]])
    for entry in doc.get("topk", []):
        be.program_topk(
            entry["prompt"],
            entry["continuation"],
            [[(int(t), float(lp)) for t, lp in row] for row in entry["tables"]],
        )
    for entry in doc.get("attention_rows", []):
        be.program_attention_row(
            entry["row"],
            prompt_tokens=entry.get("prompt"),
            response_tokens=entry.get("response"),
            layer=entry.get("layer"),
        )
    return be


# --- run state --------------------------------------------------------------------


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunState:
    stages: dict = field(default_factory=dict)
    iteration: int = 0
    config_hash: str = ""

    def stage(self, name: str) -> dict:
        return self.stages.setdefault(name, {"done": False, "artifacts": {}, "metrics": {}})

    def is_done(self, name: str, out_dir: Path) -> bool:
        info = self.stages.get(name)
        if not info or not info.get("done"):
            return False
        for art in info["artifacts"].values():
            p = out_dir / art["path"]
            if not p.exists() or file_sha256(p) != art["sha256"]:
                return False
        return True

    def record(self, name: str, out_dir: Path, artifacts: dict[str, Path],
               metrics: Optional[dict] = None) -> None:
        info = self.stage(name)
        info["artifacts"] = {
            key: {"path": str(p.relative_to(out_dir)), "sha256": file_sha256(p)}
            for key, p in artifacts.items()
        }
        if metrics:
            info["metrics"].update(metrics)
        info["done"] = True

    def artifact(self, name: str, key: str, out_dir: Path) -> Path:
        return out_dir / self.stages[name]["artifacts"][key]["path"]

    def metrics(self, name: str) -> dict:
        return self.stages.get(name, {}).get("metrics", {})

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(
                {"stages": self.stages, "iteration": self.iteration,
                 "config_hash": self.config_hash},
                f, sort_keys=True, indent=1,
            )
            f.write("\n")

    @classmethod
    def load(cls, path) -> "RunState":
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        return cls(stages=doc.get("stages", {}), iteration=doc.get("iteration", 0),
                   config_hash=doc.get("config_hash", ""))


# --- the runner ---------------------------------------------------------------------


class Runner:
    """Stage machine over a run directory."""

    def __init__(
        self,
        config: PipelineConfig,
        out_dir,
        queries: Optional[Sequence[QueryRecord]] = None,
        testset: Optional[Sequence[QueryRecord]] = None,
    ):
        self.config = config
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self._given_queries = list(queries) if queries is not None else None
        self._given_testset = list(testset) if testset is not None else None

        self.vocab = build_vocab(config.task) if config.backend.kind == "toy" else None
        self._static_backend = None
        if config.backend.kind == "scripted":
            self._static_backend = scripted_from_file(config.backend.path)
        elif config.backend.kind == "subprocess":
            self._static_backend = SubprocessBackend(config.backend.command)

        config_hash = hashlib.sha256(
            json.dumps(config.to_dict(), sort_keys=True).encode()
        ).hexdigest()
        state_path = self.out / "state.json"
        if state_path.exists():
            self.state = RunState.load(state_path)
            if self.state.config_hash and self.state.config_hash != config_hash:
                raise ConfigError("run directory was produced by a different config")
        else:
            self.state = RunState()
        self.state.config_hash = config_hash
        with open(self.out / "run_config.json", "w", encoding="utf-8") as f:
            json.dump(config.to_dict(), f, sort_keys=True, indent=1)
            f.write("\n")

        self.queries: list[QueryRecord] = []
        self.testset: list[QueryRecord] = []
        self.queries_by_id: dict[str, QueryRecord] = {}

    # -- helpers ---------------------------------------------------------

    def close(self) -> None:
        if isinstance(self._static_backend, SubprocessBackend):
            self._static_backend.close()

    def _save_state(self) -> None:
        self.state.save(self.out / "state.json")

    def _decode(self, tokens):
        if self.vocab is not None:
            return self.vocab.decode(tokens)
        return self._static_backend.decode(tokens)

    def _delimiter(self):
        if self.vocab is not None:
            return self.vocab.sep_id
        return self._static_backend.capabilities().segment_delimiter

    def _toy_config(self) -> ToyModelConfig:
        m = self.config.model
        vocab_size = m.vocab_size if m.vocab_size is not None else (
            len(self.vocab) if self.vocab is not None else None
        )
        if vocab_size is None:
            raise ConfigError("subprocess runs need model.vocab_size for toy training")
        if self.vocab is not None and vocab_size < len(self.vocab):
            raise ConfigError("model.vocab_size smaller than the task vocabulary")
        visual = self.vocab.visual_range if self.vocab is not None else (0, 0)
        return ToyModelConfig(
            vocab_size=vocab_size,
            d_model=m.d_model,
            heads=m.heads,
            layers=m.layers,
            context=m.context,
            visual_vocab_range=visual,
            init_seed=m.init_seed,
        )

    def _trainable(self) -> bool:
        return self.config.backend.kind in ("toy", "scripted")

    def _checkpoint(self, t: int) -> ModelCheckpoint:
        key = "base" if t < 0 else f"train_{t}"
        art = "checkpoint"
        return ModelCheckpoint.load(self.state.artifact(key, art, self.out))

    def _backend_for_model(self, t: int):
        """Backend whose generations reflect model M_t (toy mode only)."""
        if self.config.backend.kind == "toy":
            ckpt = self._checkpoint(t)
            return ToyModel(ckpt.config, ckpt.params, vocab=self.vocab)
        return self._static_backend

    def _sample_params(self) -> SampleParams:
        return SampleParams(
            n=1,
            temperature=self.config.temperature,
            max_tokens=self.config.max_tokens,
            seed=self.config.global_seed,
        )

    # -- stages ------------------------------------------------------------

    def stage_task(self) -> None:
        name = "task"
        q_path = self.out / "queries.jsonl"
        t_path = self.out / "test.jsonl"
        d_path = self.out / "demos.jsonl"
        if not self.state.is_done(name, self.out):
            if self._given_queries is not None:
                queries, testset = self._given_queries, self._given_testset or []
            elif self.config.queries_path:
                queries = load_queries(self.config.queries_path)
                testset = (
                    load_queries(self.config.testset_path)
                    if self.config.testset_path
                    else []
                )
            elif self.vocab is not None:
                queries, testset = generate_synthetic_tasks(self.config.task, self.vocab)
            else:
                raise ConfigError(
                    "non-toy backends need queries_path (or explicit queries)"
                )
            save_queries(queries, q_path)
            save_queries(testset, t_path)
            from .collect import solution_from_record, solution_to_record

            if self.vocab is not None:
                demos = make_demo_solutions(
                    self.config.task, self.config.seed_section.demo_count, self.vocab
                )
            elif self.config.demos_path:
                demos = [
                    (query_from_record(rec["query"]), solution_from_record(rec["solution"]))
                    for rec in read_jsonl(self.config.demos_path)
                ]
            else:
                demos = []
            with open(d_path, "w", encoding="utf-8") as f:
                for rec, sol in demos:
                    f.write(json.dumps(
                        {"query": query_to_record(rec), "solution": solution_to_record(sol)},
                        sort_keys=True,
                    ))
                    f.write("\n")
            self.state.record(
                name, self.out,
                {"queries": q_path, "testset": t_path, "demos": d_path},
                metrics={"n_queries": len(queries), "n_test": len(testset)},
            )
            self._save_state()
        self.queries = load_queries(q_path)
        self.testset = load_queries(t_path)
        self.queries_by_id = {q.id: q for q in self.queries}

    def _load_demos(self):
        from .collect import solution_from_record

        demos = []
        for rec in read_jsonl(self.out / "demos.jsonl"):
            demos.append((query_from_record(rec["query"]), solution_from_record(rec["solution"])))
        return demos

    def stage_base(self) -> None:
        name = "base"
        if not self._trainable():
            self.state.stage(name)["metrics"]["skipped"] = "backend is not trainable"
            self.state.stage(name)["done"] = True
            self._save_state()
            return
        path = self.out / "base.ckpt.json"
        if not self.state.is_done(name, self.out):
            model = ToyModel.build(self._toy_config(), vocab=self.vocab)
            ckpt = ModelCheckpoint(model.cfg, model.params, provenance={"iteration": -1})
            pre = self.config.pretrain
            if self.vocab is not None and pre.examples > 0:
                from .toytask import make_pretraining_items

                items = make_pretraining_items(
                    self.config.task, self.vocab, pre.examples,
                    seed=stable_hash(self.config.global_seed, "pretrain"),
                    competence=pre.competence,
                    max_shots=pre.max_shots,
                    context=self.config.model.context,
                )
                ckpt = fit(
                    ckpt, items,
                    TrainConfig(
                        epochs=pre.epochs,
                        learning_rate=pre.learning_rate,
                        batch_size=pre.batch_size,
                        seed=stable_hash(self.config.global_seed, "pretrain-fit"),
                    ),
                    vocab=self.vocab, iteration=-1,
                )
                ckpt.provenance["iteration"] = -1
                ckpt.provenance["format_pretraining"] = pre.examples
            ckpt.save(path)
            self.state.record(name, self.out, {"checkpoint": path})
            self._save_state()

    def stage_seed(self) -> None:
        name = "seed"
        pool_path = self.out / "seed_solutions.jsonl"
        sft_path = self.out / "seed_sft.jsonl"
        if self.state.is_done(name, self.out):
            return
        backend = self._backend_for_model(-1) if self._trainable() else self._static_backend
        demos = self._load_demos()
        shots = min(self.config.seed_section.shots, len(demos))
        seed_cfg = SeedConfig(
            demos=demos,
            shots=shots,
            seed_samples_per_query=(
                self.config.seed_section.samples_per_query or self.config.K
            ),
        )
        seed_set = build_seed_set(backend, self.queries, seed_cfg, self._sample_params())
        pool = CandidatePool()
        for sol in seed_set:
            pool.add(sol.query_id, sol)
        save_pool(pool, pool_path)
        examples, skipped = build_sft_examples(seed_set, self.queries_by_id, self._decode)
        n = emit_sft(examples, sft_path)
        self.state.record(
            name, self.out, {"pool": pool_path, "sft": sft_path},
            metrics={"n_seed": len(seed_set), "n_emitted": n, "n_malformed": len(skipped)},
        )
        self._save_state()

    def _fit_stage(self, name: str, dataset, objective: str, iteration: int) -> None:
        ckpt_path = self.out / f"m{iteration}.ckpt.json"
        log_path = self.out / f"train_{iteration}.csv"
        base = self._checkpoint(-1)
        cfg = TrainConfig(
            epochs=self.config.train.epochs,
            learning_rate=self.config.train.learning_rate,
            batch_size=self.config.train.batch_size,
            alpha=self.config.train.alpha,
            beta=self.config.train.beta,
            seed=stable_hash(self.config.global_seed, "train", iteration),
            freeze_visual_embeddings=self.config.train.freeze_visual_embeddings,
            normalized_margin=self.config.train.normalized_margin,
        )
        ckpt = fit(base, dataset, cfg, objective=objective, vocab=self.vocab,
                   iteration=iteration, log_path=log_path)
        ckpt.save(ckpt_path)
        self.state.record(
            name, self.out, {"checkpoint": ckpt_path, "log": log_path},
            metrics={"n_train": len(dataset), "base_hash": ckpt.provenance["base_hash"]},
        )
        self._save_state()

    def stage_train0(self) -> None:
        name = "train_0"
        if self.state.is_done(name, self.out):
            return
        if not self._trainable():
            self.state.stage(name)["metrics"]["skipped"] = "backend is not trainable"
            self.state.stage(name)["done"] = True
            self._save_state()
            return
        seed_pool = load_pool(self.state.artifact("seed", "pool", self.out))
        seed_set = [s for qid in sorted(seed_pool.query_ids()) for s in seed_pool.solutions(qid)]
        if not seed_set:
            raise UsageError("seed stage produced no correct solutions; cannot train M0")
        dataset = sft_items(seed_set, self.queries_by_id, self._delimiter())
        self._fit_stage(name, dataset, "sft", iteration=0)

    def _eval_stage(self, name: str, t: int) -> None:
        if self.state.is_done(name, self.out):
            return
        backend = self._backend_for_model(t) if self._trainable() else self._static_backend
        report = evaluate_greedy(backend, self.testset, max_tokens=self.config.max_tokens)
        path = self.out / f"eval_{t}.json"
        report.save(path)
        artifacts = {"report": path}
        metrics = {"accuracy": report.accuracy}
        if self.config.self_consistency_n:
            sc = self_consistency(
                backend, self.testset, n=self.config.self_consistency_n,
                temperature=self.config.temperature,
                max_tokens=self.config.max_tokens,
                seed=stable_hash(self.config.global_seed, "sc", t),
            )
            sc_path = self.out / f"eval_sc_{t}.json"
            sc.save(sc_path)
            artifacts["sc_report"] = sc_path
            metrics["sc_accuracy"] = sc.accuracy
        self.state.record(name, self.out, artifacts, metrics=metrics)
        self._save_state()

    def stage_eval0(self) -> None:
        self._eval_stage("eval_0", 0)

    def stage_collect(self, t: int) -> None:
        name = f"collect_{t}"
        if self.state.is_done(name, self.out):
            return
        backend = self._backend_for_model(t - 1) if self._trainable() else self._static_backend
        params = SampleParams(
            n=1, temperature=self.config.temperature,
            max_tokens=self.config.max_tokens,
            seed=stable_hash(self.config.global_seed, "collect", t),
        )
        pool = collect_candidates(
            backend, self.queries, self.config.K, params, workers=self.config.workers
        )
        if self.config.accumulate and t > 1:
            prev = load_pool(
                self.state.artifact(f"filter_{t-1}", "filtered", self.out),
                query_ids=pool.query_ids(),
            )
            for sol in prev.all_solutions():
                if sol.correct:
                    pool.add(sol.query_id, sol)
        path = self.out / f"pool_{t}.jsonl"
        save_pool(pool, path)
        report = difficulty_levels(pool)
        diff_path = self.out / f"difficulty_{t}.json"
        with open(diff_path, "w", encoding="utf-8") as f:
            json.dump(
                {"orientation": report.orientation,
                 "counts": report.counts,
                 "levels": {str(k): v for k, v in report.levels.items()},
                 "histogram": {str(k): v for k, v in report.histogram.items()}},
                f, sort_keys=True, indent=1,
            )
            f.write("\n")
        self.state.record(
            name, self.out, {"pool": path, "difficulty": diff_path},
            metrics={"n_solutions": len(pool),
                     "n_correct": sum(1 for s in pool.all_solutions() if s.correct)},
        )
        self._save_state()

    def stage_resample(self, t: int) -> None:
        name = f"resample_{t}"
        if self.state.is_done(name, self.out):
            return
        pool = load_pool(
            self.state.artifact(f"collect_{t}", "pool", self.out),
            query_ids=[q.id for q in self.queries],
        )
        backend = self._backend_for_model(t - 1) if self._trainable() else self._static_backend
        audit: list = []
        params = SampleParams(
            n=1, temperature=self.config.temperature,
            max_tokens=self.config.max_tokens,
            seed=stable_hash(self.config.global_seed, "resample", t),
        )
        rescued = resample_pool(
            backend, self.queries_by_id, pool,
            J=self.config.J, k=self.config.detection_k,
            strategy=self.config.perturb, params=params,
            policy=self.config.resample_policy,
            decode=self._decode, audit=audit,
        )
        merged = pool.copy()
        merged.extend(rescued)
        merged_path = self.out / f"merged_pool_{t}.jsonl"
        save_pool(merged, merged_path)
        audit_path = self.out / f"resample_audit_{t}.jsonl"
        save_audit(audit, audit_path)
        stats = resampling_report(pool, merged)
        stats_path = self.out / f"resample_stats_{t}.json"
        with open(stats_path, "w", encoding="utf-8") as f:
            json.dump(stats.to_dict(), f, sort_keys=True, indent=1)
            f.write("\n")
        self.state.record(
            name, self.out,
            {"merged": merged_path, "audit": audit_path, "stats": stats_path},
            metrics={"n_rescued": len(rescued), "n_attempts": len(audit)},
        )
        self._save_state()

    def stage_score(self, t: int) -> None:
        """Dedup positives, then VAS-score them (skipped when tau = -inf)."""
        name = f"score_{t}"
        if self.state.is_done(name, self.out):
            return
        merged = load_pool(
            self.state.artifact(f"resample_{t}", "merged", self.out),
            query_ids=[q.id for q in self.queries],
        )
        backend = self._backend_for_model(t - 1) if self._trainable() else self._static_backend
        vas_cfg = VasConfig(layer=self.config.vas_layer, tau=self.config.tau)
        skip_scoring = math.isinf(self.config.tau) and self.config.tau < 0

        deduped = CandidatePool()
        scores_by_query: dict[str, list] = {}
        dedup_removed = {}
        for qid in sorted(merged.query_ids()):
            positives = merged.positives(qid)
            result = dedup_and_cap(
                positives, cap=None,  # caps apply at emission, after VAS
                rng_seed=stable_hash(self.config.global_seed, "dedup", t),
            )
            dedup_removed[qid] = len(result.removed)
            for sol in result.kept:
                deduped.add(qid, sol)
            for sol in merged.negatives(qid):
                deduped.add(qid, sol)
            if result.kept and not skip_scoring:
                scores_by_query[qid] = score_solutions(
                    backend, self.queries_by_id[qid], result.kept, vas_cfg
                )
            else:
                scores_by_query[qid] = [None] * len(result.kept)

        deduped_path = self.out / f"deduped_pool_{t}.jsonl"
        save_pool(deduped, deduped_path)
        scores_path = self.out / f"scores_{t}.jsonl"
        with open(scores_path, "w", encoding="utf-8") as f:
            for qid in sorted(deduped.query_ids()):
                positives = deduped.positives(qid)
                scores = scores_by_query[qid]
                kept_flags = [s is None or s.z >= self.config.tau for s in scores]
                save_scores(qid, positives, scores, kept_flags, f)
        dedup_path = self.out / f"dedup_removed_{t}.json"
        with open(dedup_path, "w", encoding="utf-8") as f:
            json.dump(dedup_removed, f, sort_keys=True)
            f.write("\n")

        artifacts = {"deduped": deduped_path, "scores": scores_path,
                     "dedup_removed": dedup_path}
        profile_path = self.out / f"layer_profile_{t}.csv"
        try:
            sample = self.queries[: self.config.profile_sample]
            rows = attention_profile_report(backend, sample)
            save_profile_csv(rows, profile_path)
            artifacts["profile"] = profile_path
        except BackendError as e:
            log.warning("layer profile skipped: %s", e)
        self.state.record(
            name, self.out, artifacts,
            metrics={"scoring_skipped": skip_scoring,
                     "n_dedup_removed": sum(dedup_removed.values())},
        )
        self._save_state()

    def stage_filter(self, t: int) -> None:
        name = f"filter_{t}"
        if self.state.is_done(name, self.out):
            return
        deduped = load_pool(
            self.state.artifact(f"score_{t}", "deduped", self.out),
            query_ids=[q.id for q in self.queries],
        )
        score_rows = read_jsonl(self.state.artifact(f"score_{t}", "scores", self.out))
        kept_by_query: dict[str, list[bool]] = {}
        for row in score_rows:
            kept_by_query.setdefault(row["query_id"], []).append(bool(row["kept"]))

        merged = load_pool(
            self.state.artifact(f"resample_{t}", "merged", self.out),
            query_ids=[q.id for q in self.queries],
        )
        dedup_removed = read_jsonl(self.state.artifact(f"score_{t}", "dedup_removed", self.out))
        dedup_removed = dedup_removed[0] if dedup_removed else {}

        filtered = CandidatePool()
        conservation = {"per_query": {}, "totals": {}}
        totals = {"merged": 0, "dedup_removed": 0, "vas_removed": 0, "filtered": 0}
        for qid in sorted(deduped.query_ids()):
            positives = deduped.positives(qid)
            flags = kept_by_query.get(qid, [True] * len(positives))
            if len(flags) != len(positives):
                raise UsageError(f"score rows for {qid} do not align with positives")
            vas_removed = 0
            for sol, keep in zip(positives, flags):
                if keep:
                    filtered.add(qid, sol)
                else:
                    vas_removed += 1
            for sol in deduped.negatives(qid):
                filtered.add(qid, sol)
            row = {
                "merged": len(merged.positives(qid)),
                "dedup_removed": int(dedup_removed.get(qid, 0)),
                "vas_removed": vas_removed,
                "filtered": len(filtered.positives(qid)),
            }
            conservation["per_query"][qid] = row
            for key in totals:
                totals[key] += row[key]
        conservation["totals"] = totals
        filtered_path = self.out / f"filtered_{t}.jsonl"
        save_pool(filtered, filtered_path)
        cons_path = self.out / f"conservation_{t}.json"
        with open(cons_path, "w", encoding="utf-8") as f:
            json.dump(conservation, f, sort_keys=True, indent=1)
            f.write("\n")
        self.state.record(
            name, self.out, {"filtered": filtered_path, "conservation": cons_path},
            metrics={"n_filtered_positives": totals["filtered"],
                     "n_vas_removed": totals["vas_removed"]},
        )
        self._save_state()

    def _training_positives(self, filtered: CandidatePool, t: int) -> tuple[list[Solution], int]:
        """Filtered positives, capped per query for emission/training."""
        positives = [s for qid in sorted(filtered.query_ids()) for s in filtered.positives(qid)]
        if self.config.cap is None:
            return positives, 0
        result = dedup_and_cap(
            positives, cap=self.config.cap,
            rng_seed=stable_hash(self.config.global_seed, "cap", t),
        )
        return result.kept, len(result.removed)

    def stage_organize(self, t: int) -> None:
        name = f"organize_{t}"
        if self.state.is_done(name, self.out):
            return
        filtered = load_pool(
            self.state.artifact(f"filter_{t}", "filtered", self.out),
            query_ids=[q.id for q in self.queries],
        )
        positives, n_capped = self._training_positives(filtered, t)
        metrics: dict = {"n_cap_removed": n_capped}
        if self.config.objective == "sft":
            examples, skipped = build_sft_examples(positives, self.queries_by_id, self._decode)
            path = self.out / f"sft_{t}.jsonl"
            n = emit_sft(examples, path)
            metrics.update({"n_emitted": n, "n_malformed": len(skipped)})
            self.state.record(name, self.out, {"dataset": path}, metrics=metrics)
        else:
            negatives = [s for qid in sorted(filtered.query_ids()) for s in filtered.negatives(qid)]
            pairs = build_pairs(
                positives, negatives,
                rng_seed=stable_hash(self.config.global_seed, "pairs", t),
            )
            path = self.out / f"pairs_{t}.jsonl"
            n = emit_pairs(pairs, self.queries_by_id, self._decode, path)
            metrics.update({"n_emitted": n})
            self.state.record(name, self.out, {"dataset": path}, metrics=metrics)
        self._save_state()

    def stage_train(self, t: int) -> None:
        name = f"train_{t}"
        if self.state.is_done(name, self.out):
            return
        if not self._trainable():
            self.state.stage(name)["metrics"]["skipped"] = "backend is not trainable"
            self.state.stage(name)["done"] = True
            self._save_state()
            return
        filtered = load_pool(
            self.state.artifact(f"filter_{t}", "filtered", self.out),
            query_ids=[q.id for q in self.queries],
        )
        delim = self._delimiter()
        positives, _ = self._training_positives(filtered, t)
        if self.config.objective == "sft":
            from .core import matches_tag_grammar

            usable = [s for s in positives if matches_tag_grammar(s.trajectory.text)]
            if not usable:
                raise UsageError(f"iteration {t} has no usable SFT targets")
            dataset = sft_items(usable, self.queries_by_id, delim)
        else:
            negatives = [s for qid in sorted(filtered.query_ids()) for s in filtered.negatives(qid)]
            pairs = build_pairs(
                positives, negatives,
                rng_seed=stable_hash(self.config.global_seed, "pairs", t),
            )
            if not pairs:
                raise UsageError(f"iteration {t} produced no preference pairs")
            dataset = pair_items(pairs, self.queries_by_id, delim)
        self._fit_stage(name, dataset, self.config.objective, iteration=t)

    # -- the full loop -------------------------------------------------------

    def iteration_stages(self, t: int) -> list[str]:
        return [f"collect_{t}", f"resample_{t}", f"score_{t}", f"filter_{t}",
                f"organize_{t}", f"train_{t}", f"eval_{t}"]

    def run(self) -> RunState:
        try:
            self.stage_task()
            self.stage_base()
            self.stage_seed()
            self.stage_train0()
            if self.testset:
                self.stage_eval0()
            for t in range(1, self.config.T + 1):
                self.stage_collect(t)
                self.stage_resample(t)
                self.stage_score(t)
                self.stage_filter(t)
                self.stage_organize(t)
                self.stage_train(t)
                if self.testset:
                    self._eval_stage(f"eval_{t}", t)
                self.state.iteration = t
                self._save_state()
        finally:
            self._save_state()
        return self.state


def run(config: PipelineConfig, out_dir, queries=None, testset=None) -> RunState:
    runner = Runner(config, out_dir, queries=queries, testset=testset)
    try:
        return runner.run()
    finally:
        runner.close()
