"""Scripted end-to-end pipeline fixture.

Three train queries (all gold "yes") plus two test queries:

* q0: collect yields two identical correct responses (dedup fodder) and two
  identical wrong ones whose critical-token scan finds nothing.
* q1: two distinct correct responses with programmed attention rows, one
  visually grounded and one not, so VAS z-scores split to +1/-1.
* q2: all-wrong collection; its wrong trajectory has a programmed critical
  token at position 4, and the corrected prefix completes to gold.

Numbers with the default fixture config: merged positives 6, dedup removes
2, VAS removes 1, filtered 3.
"""

import json

from vista.core import QueryRecord, SegmentedPrompt
from vista.pipeline import (
    BackendSpec,
    ModelSection,
    PipelineConfig,
    SeedSection,
    save_queries,
)
from vista.resample import ResamplePolicy
from vista.seeds import stable_hash

WORDS = {
    60: "<think>", 61: "t", 62: "</think>", 63: "<answer>", 64: "yes",
    65: "</answer>", 66: "no", 67: "u",
}

R_GOLD = [60, 61, 62, 63, 64, 65]
R_WRONG = [60, 61, 62, 63, 66, 65]
R_VAR_A = [60, 61, 62, 63, 64, 65]
R_VAR_B = [60, 67, 62, 63, 64, 65]


def decode(tokens):
    return " ".join(WORDS.get(int(t), str(t)) for t in tokens)


def response(tokens):
    return {"tokens": list(tokens), "text": decode(tokens), "finish": "stop"}


def train_queries():
    out = []
    for i in range(3):
        prompt = SegmentedPrompt.build(
            (1, 2), (10 + 3 * i, 11 + 3 * i, 12 + 3 * i), (30 + 2 * i, 31 + 2 * i),
            query_id=f"q{i}",
        )
        out.append(QueryRecord(id=f"q{i}", prompt=prompt, gold_answer="yes"))
    return out


def test_queries():
    golds = ["yes", "no"]
    out = []
    for i in range(2):
        prompt = SegmentedPrompt.build(
            (1, 2), (40 + 3 * i, 41 + 3 * i, 42 + 3 * i), (50 + 2 * i, 51 + 2 * i),
            query_id=f"e{i}",
        )
        out.append(QueryRecord(id=f"e{i}", prompt=prompt, gold_answer=golds[i]))
    return out


def prompt_tokens(q):
    return [t for seg in q.prompt.segments for t in seg.tokens]


def swapped_tokens(q):
    segs = {seg.role.value: list(seg.tokens) for seg in q.prompt.segments}
    return segs["system"] + segs["instruction"] + segs["visual"]


def notfound_tables(trajectory):
    return [[(int(tok), -0.1), (55, -0.9)] for tok in trajectory]


def critical_tables(trajectory, index, replacement):
    tables = []
    for n, tok in enumerate(trajectory):
        if n == index:
            tables.append([(replacement, -0.1), (56, -0.9)])
        else:
            tables.append([(int(tok), -0.1), (55, -0.9)])
    return tables


def build_fixture(tmp_path, global_seed=0):
    """Write the scripted fixture + queries and return a PipelineConfig."""
    train = train_queries()
    test = test_queries()
    q0, q1, q2 = train
    K, J, T = 4, 2, 1

    programs = []
    collect_seed = stable_hash(global_seed, "collect", 1)
    outcome = {
        "q0": [R_GOLD, R_GOLD, R_WRONG, R_WRONG],
        "q1": [R_VAR_A, R_VAR_B, R_WRONG, R_WRONG],
        "q2": [R_WRONG, R_WRONG, R_WRONG, R_WRONG],
    }
    for q in train:
        by_seed = {}
        for i in range(K):
            by_seed[str(stable_hash(collect_seed, q.id, i))] = response(outcome[q.id][i])
        for i in range(2):  # seed-phase samples, all gold
            by_seed[str(stable_hash(global_seed, "seed", q.id, i))] = response(R_GOLD)
        programs.append(
            {"prompt": prompt_tokens(q), "responses": [response(R_WRONG)],
             "by_seed": by_seed}
        )
    for q, resp in zip(test, (R_GOLD, R_GOLD)):
        programs.append({"prompt": prompt_tokens(q), "responses": [response(resp)]})

    # corrected-prefix continuations for q2 (critical token at 4 -> 64)
    prefix = prompt_tokens(q2) + R_WRONG[:4] + [64]
    programs.append({"prompt": prefix, "responses": [response([65])]})

    topk = [
        {"prompt": swapped_tokens(q0), "continuation": R_WRONG,
         "tables": notfound_tables(R_WRONG)},
        {"prompt": swapped_tokens(q1), "continuation": R_WRONG,
         "tables": notfound_tables(R_WRONG)},
        {"prompt": swapped_tokens(q2), "continuation": R_WRONG,
         "tables": critical_tables(R_WRONG, 4, 64)},
    ]

    attention_rows = [
        {"prompt": prompt_tokens(q1), "response": R_VAR_A,
         "row": [0.1, 0.1, 0.2, 0.2, 0.2, 0.1, 0.1]},
        {"prompt": prompt_tokens(q1), "response": R_VAR_B,
         "row": [0.2, 0.2, 0.05, 0.05, 0.05, 0.2, 0.25]},
    ]

    fixture = {
        "capabilities": {"context_limit": 4096, "layer_count": 4, "vocab_size": 128,
                         "segment_delimiter": None},
        "decode_words": {str(k): v for k, v in WORDS.items()},
        "programs": programs,
        "topk": topk,
        "attention_rows": attention_rows,
        "default_response": response(R_WRONG),
    }
    fixture_path = tmp_path / "scripted_fixture.json"
    fixture_path.write_text(json.dumps(fixture, sort_keys=True, indent=1))
    queries_path = tmp_path / "fixture_queries.jsonl"
    testset_path = tmp_path / "fixture_test.jsonl"
    save_queries(train, queries_path)
    save_queries(test, testset_path)

    config = PipelineConfig(
        K=K, J=J, T=T, tau=-0.5, detection_k=2, temperature=1.0, max_tokens=8,
        global_seed=global_seed,
        backend=BackendSpec("scripted", path=str(fixture_path)),
        model=ModelSection(d_model=16, heads=2, layers=2, context=64, vocab_size=128),
        seed_section=SeedSection(shots=0, samples_per_query=2, demo_count=0),
        resample_policy=ResamplePolicy(max_solutions_per_query=1),
        queries_path=str(queries_path),
        testset_path=str(testset_path),
        profile_sample=2,
        workers=0,
    )
    from vista.train import TrainConfig

    config.train = TrainConfig(epochs=1, learning_rate=1e-3, batch_size=4)
    return config
