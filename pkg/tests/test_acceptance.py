"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
lines; the heavy end-to-end criteria are marked ``slow`` but run by default.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from vista.backend import (
    AttentionAllocation,
    AttentionSpan,
    LayerSelector,
    SampleParams,
    ScriptedBackend,
    ScriptedResponse,
)
from vista.collect import evaluate_greedy, hard_queries, load_pool, self_consistency
from vista.core import Finish, Origin, QueryRecord, Role, SegmentedPrompt, Solution, Trajectory
from vista.pipeline import PipelineConfig, run
from vista.resample import PerturbStrategy, locate_critical_token, perturb
from vista.toymodel import ToyModel, ToyModelConfig
from vista.train import TrainConfig, dpo_nll_loss, sft_loss
from vista.vas import VasConfig, filter_by_vas, score_solutions

from fixtures import build_fixture
from oracles import (
    finite_difference_gradient,
    max_relative_error,
    naive_forward,
    naive_segment_lambdas,
    scan_critical_token,
)


def report_pass(name: str, started: float, detail: str = "") -> None:
    elapsed = time.monotonic() - started
    suffix = f" ({detail})" if detail else ""
    print(f"[ACCEPTANCE] {name}: PASS in {elapsed:.1f}s{suffix}")


def make_prompt(rng, v, sys_n=2, vis_n=3, ins_n=4, query_id="q"):
    def seg(n):
        return tuple(int(t) for t in rng.integers(0, v, n))
    return SegmentedPrompt.build(seg(sys_n), seg(vis_n), seg(ins_n), query_id=query_id)


class TestCriterion1CriticalTokenOracle:
    def test_locate_matches_brute_force_on_1000_cases(self):
        started = time.monotonic()
        rng = np.random.default_rng(20240813)
        V = 64
        width = 50
        checked = 0
        for case in range(1000):
            k = int(rng.choice([1, 5, 10, 50]))
            n_tokens = int(rng.integers(1, 14))
            tables = []
            traj_tokens = []
            for _ in range(n_tokens):
                ids = rng.permutation(V)[:width]
                lps = np.sort(rng.uniform(-9.0, 0.0, width))[::-1]
                if rng.random() < 0.15:  # exercise the tie-break rule
                    lps = np.round(lps, 1)
                    lps = np.sort(lps)[::-1]
                tables.append([(int(t), float(lp)) for t, lp in zip(ids, lps)])
                # bias tokens toward the table's head so "not found" happens
                if rng.random() < 0.8:
                    traj_tokens.append(int(ids[rng.integers(0, min(8, width))]))
                else:
                    traj_tokens.append(int(rng.integers(0, V)))
            prompt = make_prompt(rng, V)
            swapped = perturb(prompt, PerturbStrategy.swap())
            swapped_tokens = [t for seg in swapped.segments for t in seg.tokens]
            be = ScriptedBackend(vocab_size=V)
            be.program_topk(swapped_tokens, traj_tokens, tables)
            traj = Trajectory.from_text(traj_tokens, "x", Finish.STOP)
            got = locate_critical_token(be, swapped, traj, k=k)
            want_found, want_idx, want_repl = scan_critical_token(tables, traj_tokens, k)
            assert got.found == want_found, f"case {case}"
            assert got.index == want_idx, f"case {case}"
            assert got.replacement == want_repl, f"case {case}"
            checked += 1
        elapsed = time.monotonic() - started
        assert elapsed < 10.0, f"criterion budget exceeded: {elapsed:.1f}s"
        report_pass("critical-token oracle equivalence", started, f"{checked} cases")


class _PlantedAttentionBackend:
    """Minimal backend stub returning planted visual-share allocations."""

    def __init__(self, raw_by_tokens: dict):
        self.raw_by_tokens = raw_by_tokens

    def segment_attention(self, prompt, response_tokens, layer, span):
        raw = self.raw_by_tokens[tuple(response_tokens)]
        return AttentionAllocation(
            lambda_sys=(1.0 - raw) / 2, lambda_vis=raw, lambda_ins=(1.0 - raw) / 2
        )


class TestCriterion2VasNormalization:
    def test_500_random_groups(self):
        started = time.monotonic()
        rng = np.random.default_rng(77)
        taus = (-0.75, -0.5, 0.0, 0.5, 0.75)
        for g in range(500):
            size = int(rng.integers(2, 17))
            raws = rng.uniform(0.02, 0.98, size)
            while np.std(raws) == 0:
                raws = rng.uniform(0.02, 0.98, size)
            qid = f"g{g}"
            prompt = make_prompt(rng, 32, query_id=qid)
            query = QueryRecord(id=qid, prompt=prompt, gold_answer="yes")
            positives = []
            planted = {}
            for i, raw in enumerate(raws):
                tokens = (100 + i,)
                planted[tokens] = float(raw)
                traj = Trajectory.from_text(
                    list(tokens), "<think>t</think><answer>yes</answer>", Finish.STOP
                )
                positives.append(
                    Solution(query_id=qid, trajectory=traj, correct=True,
                             origin=Origin.DIRECT, sample_index=i)
                )
            backend = _PlantedAttentionBackend(planted)
            scores = score_solutions(backend, query, positives, VasConfig())
            zs = np.array([s.z for s in scores])
            assert abs(zs.mean()) <= 1e-9
            assert abs(zs.std() - 1.0) <= 1e-9
            assert list(np.argsort(zs, kind="stable")) == list(
                np.argsort(raws, kind="stable")
            )
            previous = None
            for tau in taus:
                kept = {s.sample_index for s in filter_by_vas(positives, scores, tau).kept}
                if previous is not None:
                    assert kept <= previous
                previous = kept
        elapsed = time.monotonic() - started
        assert elapsed < 5.0, f"criterion budget exceeded: {elapsed:.1f}s"
        report_pass("VAS normalization", started, "500 groups, tau sweep")


class TestCriterion3AttentionSumOracle:
    def test_100_random_prompts_within_1e9(self):
        started = time.monotonic()
        cfg = ToyModelConfig(vocab_size=48, d_model=32, heads=2, layers=3,
                             context=96, visual_vocab_range=(40, 48), init_seed=11)
        model = ToyModel.build(cfg)
        rng = np.random.default_rng(5)
        for case in range(100):
            prompt = make_prompt(
                rng, cfg.vocab_size,
                sys_n=int(rng.integers(1, 4)),
                vis_n=int(rng.integers(2, 8)),
                ins_n=int(rng.integers(2, 7)),
            )
            response = [int(t) for t in rng.integers(0, cfg.vocab_size, rng.integers(1, 7))]
            span = AttentionSpan.ALL_RESPONSE if case % 2 == 0 else AttentionSpan.FIRST_TOKEN
            layer = LayerSelector.middle() if case % 3 == 0 else LayerSelector.at(
                int(rng.integers(0, cfg.layers))
            )
            alloc = model.segment_attention(prompt, response, layer, span)
            tokens = [t for seg in prompt.segments for t in seg.tokens]
            spans = {}
            off = 0
            for seg in prompt.segments:
                spans[seg.role] = (off, off + len(seg.tokens))
                off += len(seg.tokens)
            _, attns = naive_forward(model.params, cfg, tokens + response)
            ref = naive_segment_lambdas(
                attns[layer.resolve(cfg.layers)], spans, len(tokens),
                "first" if span == AttentionSpan.FIRST_TOKEN else "all",
            )
            assert abs(alloc.lambda_sys - ref[Role.SYSTEM]) <= 1e-9
            assert abs(alloc.lambda_vis - ref[Role.VISUAL]) <= 1e-9
            assert abs(alloc.lambda_ins - ref[Role.INSTRUCTION]) <= 1e-9
        elapsed = time.monotonic() - started
        assert elapsed < 30.0, f"criterion budget exceeded: {elapsed:.1f}s"
        report_pass("attention-sum oracle", started, "100 prompts")


class TestCriterion4LossCorrectness:
    @staticmethod
    def _sft_loss_value(model, prompt, response):
        # forward-only recomputation of the loss for finite differencing
        lps = model.response_logprobs(prompt, response)
        return float(-lps.sum() / len(response))

    @staticmethod
    def _dpo_loss_value(policy, reference, prompt, chosen, rejected, alpha, beta):
        c = float(policy.response_logprobs(prompt, chosen).sum())
        r = float(policy.response_logprobs(prompt, rejected).sum())
        ref_c = float(reference.response_logprobs(prompt, chosen).sum())
        ref_r = float(reference.response_logprobs(prompt, rejected).sum())
        margin = beta * (c - ref_c) - beta * (r - ref_r)
        return float(np.logaddexp(0.0, -margin) + alpha * (-c / len(chosen)))

    def test_gradient_checks_and_identities(self):
        started = time.monotonic()
        rng = np.random.default_rng(99)
        max_err_seen = 0.0
        for trial in range(20):
            v = int(rng.integers(9, 13))
            cfg = ToyModelConfig(
                vocab_size=v,
                d_model=8,
                heads=int(rng.choice([1, 2])),
                layers=1,
                context=14,
                visual_vocab_range=(v - 2, v),
                init_seed=int(rng.integers(1 << 30)),
            )
            prompt = [int(t) for t in rng.integers(0, v, int(rng.integers(1, 4)))]
            chosen = [int(t) for t in rng.integers(0, v, int(rng.integers(1, 4)))]
            if trial % 2 == 0:
                model = ToyModel.build(cfg)
                loss, grad = sft_loss(model, prompt, chosen)
                assert abs(loss - self._sft_loss_value(model, prompt, chosen)) <= 1e-12

                def f():
                    return self._sft_loss_value(model, prompt, chosen)

                fd = finite_difference_gradient(f, model.params.flat, eps=1e-5)
                err = max_relative_error(grad, fd)
            else:
                policy = ToyModel.build(cfg)
                ref_cfg = ToyModelConfig(**{**cfg.to_dict(),
                                            "visual_vocab_range": tuple(cfg.visual_vocab_range),
                                            "init_seed": cfg.init_seed + 1})
                reference = ToyModel.build(ref_cfg)
                rejected = [int(t) for t in rng.integers(0, v, int(rng.integers(1, 4)))]
                loss, grad = dpo_nll_loss(policy, reference, prompt, chosen, rejected,
                                          alpha=0.5, beta=0.1)
                recomputed = self._dpo_loss_value(
                    policy, reference, prompt, chosen, rejected, 0.5, 0.1
                )
                assert abs(loss - recomputed) <= 1e-12

                def f():
                    return self._dpo_loss_value(
                        policy, reference, prompt, chosen, rejected, 0.5, 0.1
                    )

                fd = finite_difference_gradient(f, policy.params.flat, eps=1e-5)
                err = max_relative_error(grad, fd)
            max_err_seen = max(max_err_seen, err)
            assert err <= 1e-4, f"trial {trial}: rel err {err:.2e}"

        # identity: policy == reference makes the preference term ln 2
        cfg = ToyModelConfig(vocab_size=12, d_model=8, heads=2, layers=1,
                             context=16, visual_vocab_range=(10, 12), init_seed=4)
        model = ToyModel.build(cfg)
        loss, _ = dpo_nll_loss(model, model, [1, 2], [3, 4], [5, 6], alpha=0.5, beta=0.1)
        nll = sft_loss(model, [1, 2], [3, 4])[0]
        assert abs((loss - 0.5 * nll) - np.log(2)) <= 1e-9

        # identity: the all-zero-parameter model is uniform, NLL = ln V
        ucfg = ToyModelConfig(vocab_size=512, d_model=8, heads=2, layers=1,
                              context=16, visual_vocab_range=(0, 0), init_seed=0)
        uniform = ToyModel.build(ucfg)
        uniform.params.flat[:] = 0.0
        uloss, _ = sft_loss(uniform, [1, 2], [3, 4, 5])
        assert abs(uloss - np.log(512)) <= 1e-9

        elapsed = time.monotonic() - started
        assert elapsed < 60.0, f"criterion budget exceeded: {elapsed:.1f}s"
        report_pass("loss correctness", started,
                    f"20 gradient checks, max rel err {max_err_seen:.2e}")


class TestCriterion5PipelineDeterminism:
    def test_byte_identical_runs_and_conservation(self, tmp_path):
        started = time.monotonic()
        config = build_fixture(tmp_path)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        run(config, out_a)
        run(PipelineConfig.from_dict(config.to_dict()), out_b)
        compared = 0
        for p in sorted(out_a.rglob("*")):
            if p.is_file() and p.suffix in (".jsonl", ".json", ".csv"):
                other = out_b / p.relative_to(out_a)
                assert other.exists(), p.name
                assert p.read_bytes() == other.read_bytes(), p.name
                compared += 1
        cons = json.loads((out_a / "conservation_1.json").read_text())
        totals = cons["totals"]
        assert totals["filtered"] == (
            totals["merged"] - totals["dedup_removed"] - totals["vas_removed"]
        )
        for qid, row in cons["per_query"].items():
            assert row["filtered"] == row["merged"] - row["dedup_removed"] - row["vas_removed"]
        report_pass("pipeline determinism and conservation", started,
                    f"{compared} artifacts byte-identical")


def _toy_stack(task, pretrain_examples=768, pretrain_epochs=3, seed_samples=4,
               m0_epochs=3, m0_lr=1e-3, max_tokens=28):
    """Pretrained base + seed-SFT M0 + K=10 pool on a synthetic task."""
    from vista.collect import SeedConfig, build_seed_set, collect_candidates
    from vista.toymodel import ModelCheckpoint
    from vista.toytask import (build_vocab, generate_synthetic_tasks,
                               make_demo_solutions, make_pretraining_items)
    from vista.train import fit, sft_items

    vocab = build_vocab(task)
    train, test = generate_synthetic_tasks(task, vocab)
    qbyid = {q.id: q for q in train}
    mcfg = ToyModelConfig(
        vocab_size=len(vocab), d_model=64, heads=4, layers=4, context=256,
        visual_vocab_range=vocab.visual_range, init_seed=0,
    )
    ckpt0 = ModelCheckpoint(mcfg, ToyModel.build(mcfg, vocab=vocab).params)
    items = make_pretraining_items(task, vocab, pretrain_examples, seed=123,
                                   competence=0.5, max_shots=2, context=mcfg.context)
    base_ckpt = fit(ckpt0, items,
                    TrainConfig(epochs=pretrain_epochs, learning_rate=1.5e-3,
                                batch_size=8, seed=9), vocab=vocab)
    base = ToyModel(mcfg, base_ckpt.params, vocab=vocab)
    demos = make_demo_solutions(task, 2, vocab)
    from vista.backend import SampleParams as SP

    seed_set = build_seed_set(
        base, train,
        SeedConfig(demos=demos, shots=2, seed_samples_per_query=seed_samples),
        SP(n=1, temperature=1.0, max_tokens=max_tokens, seed=0),
    )
    m0_ckpt = fit(base_ckpt, sft_items(seed_set, qbyid, vocab.sep_id),
                  TrainConfig(epochs=m0_epochs, learning_rate=m0_lr,
                              batch_size=8, seed=1), vocab=vocab)
    m0 = ToyModel(mcfg, m0_ckpt.params, vocab=vocab)
    pool = collect_candidates(
        m0, train, K=10, params=SP(n=1, temperature=1.0, max_tokens=max_tokens, seed=2)
    )
    return vocab, train, test, qbyid, m0, pool


class TestCriterion6ResamplingEfficacy:
    def test_zero_correct_rescue_rate(self):
        from vista.resample import ResamplePolicy, resample_pool, resampling_report
        from vista.toytask import SyntheticTaskConfig

        started = time.monotonic()
        task = SyntheticTaskConfig(
            grid_side=4, attribute_count=6, dataset_seed=7,
            train_size=96, test_size=16, majority_bias=0.3,
            question_kinds=("count", "identify", "compare"),
            difficulty_mix=(0.6, 0.2, 0.2),
        )
        vocab, train, _, qbyid, m0, pool = _toy_stack(task)
        zero = hard_queries(pool)
        zero_fraction = len(zero) / len(train)
        assert zero_fraction >= 0.20, f"zero-correct fraction {zero_fraction:.2%}"

        audit = []
        rescued = resample_pool(
            m0, qbyid, pool, J=3, k=5, strategy=PerturbStrategy.swap(),
            params=SampleParams(n=1, temperature=1.0, max_tokens=28, seed=3),
            policy=ResamplePolicy(correct_floor=10),
            decode=vocab.decode, audit=audit,
        )
        merged = pool.copy()
        merged.extend(rescued)
        stats = resampling_report(pool, merged)
        assert stats.success_rate >= 0.25, f"rescue rate {stats.success_rate:.2%}"
        assert stats.mean_correct_after > stats.mean_correct_before
        elapsed = time.monotonic() - started
        assert elapsed < 900.0, f"criterion budget exceeded: {elapsed:.1f}s"
        report_pass(
            "resampling efficacy", started,
            f"zero-correct {zero_fraction:.0%}, rescue {stats.success_rate:.0%}, "
            f"mean {stats.mean_correct_before:.2f}->{stats.mean_correct_after:.2f}",
        )


class TestCriterion8SelfConsistencyDegenerate:
    def _scripted_backend_and_queries(self):
        queries = []
        be = ScriptedBackend()
        for i in range(4):
            prompt = SegmentedPrompt.build(
                (1, 2), (10 + i,), (20 + i, 21 + i), query_id=f"q{i}"
            )
            queries.append(QueryRecord(id=f"q{i}", prompt=prompt, gold_answer="yes"))
            answer = "yes" if i % 2 == 0 else "no"
            be.program_sample(
                [t for seg in prompt.segments for t in seg.tokens],
                [ScriptedResponse((40 + i,), f"<think>t</think><answer>{answer}</answer>")],
            )
        return be, queries

    def test_equals_greedy_on_scripted_and_toy_backends(self):
        started = time.monotonic()
        be, queries = self._scripted_backend_and_queries()
        greedy = evaluate_greedy(be, queries)
        sc = self_consistency(be, queries, n=1, temperature=0.0)
        assert sc.accuracy == greedy.accuracy
        assert [r["correct"] for r in sc.per_query] == [r["correct"] for r in greedy.per_query]

        from vista.toytask import SyntheticTaskConfig, build_vocab, generate_synthetic_tasks

        task = SyntheticTaskConfig(grid_side=3, attribute_count=6, dataset_seed=3,
                                   train_size=4, test_size=6)
        vocab = build_vocab(task)
        _, test = generate_synthetic_tasks(task, vocab)
        cfg = ToyModelConfig(vocab_size=len(vocab), d_model=16, heads=2, layers=2,
                             context=128, visual_vocab_range=vocab.visual_range, init_seed=1)
        model = ToyModel.build(cfg, vocab=vocab)
        greedy = evaluate_greedy(model, test, max_tokens=20)
        sc = self_consistency(model, test, n=1, temperature=0.0, max_tokens=20)
        assert sc.accuracy == greedy.accuracy
        assert [r["answer"] for r in sc.per_query] == [r["answer"] for r in greedy.per_query]
        report_pass("self-consistency degenerate case", started, "scripted + toy backends")
