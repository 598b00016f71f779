"""Command-line interface.

Stage commands (seed, collect, resample, score, filter, pair, train, eval)
operate on a run directory and are resumable; ``run`` executes the whole
loop. Exit codes: 0 success, 2 configuration error, 3 backend error,
4 training divergence. Set VISTA_LOG=DEBUG|INFO|WARNING for log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import BackendError, ConfigError, TrainError, UsageError, VistaError
from .pipeline import BackendSpec, PipelineConfig, Runner, RunState
from .report import compare_baselines, report

log = logging.getLogger("vista")


def _setup_logging() -> None:
    level = os.environ.get("VISTA_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def _parse_backend(spec: str) -> BackendSpec:
    if spec == "toy":
        return BackendSpec("toy")
    if spec.startswith("scripted:"):
        return BackendSpec("scripted", path=spec.split(":", 1)[1])
    if spec.startswith("subprocess:"):
        return BackendSpec("subprocess", command=spec.split(":", 1)[1])
    raise ConfigError(
        f"bad backend spec {spec!r}; use toy, scripted:<path> or subprocess:<command>"
    )


def _load_config(args) -> PipelineConfig:
    if args.config:
        config = PipelineConfig.load(args.config)
    else:
        config = PipelineConfig()
    if args.seed is not None:
        config.global_seed = args.seed
    if args.backend is not None:
        config.backend = _parse_backend(args.backend)
    return config


def _runner(args) -> Runner:
    config = _load_config(args)
    runner = Runner(config, args.out)
    runner.stage_task()
    return runner


def _iteration(args, runner: Runner) -> int:
    if args.iteration is not None:
        return args.iteration
    return runner.state.iteration + 1


def cmd_seed(args) -> int:
    runner = _runner(args)
    try:
        runner.stage_base()
        runner.stage_seed()
    finally:
        runner.close()
    print(f"seed set: {runner.state.metrics('seed').get('n_seed')} solutions")
    return 0


def cmd_collect(args) -> int:
    runner = _runner(args)
    try:
        runner.stage_collect(_iteration(args, runner))
    finally:
        runner.close()
    return 0


def cmd_resample(args) -> int:
    runner = _runner(args)
    try:
        runner.stage_resample(_iteration(args, runner))
    finally:
        runner.close()
    return 0


def cmd_score(args) -> int:
    runner = _runner(args)
    try:
        runner.stage_score(_iteration(args, runner))
    finally:
        runner.close()
    return 0


def cmd_filter(args) -> int:
    runner = _runner(args)
    try:
        runner.stage_filter(_iteration(args, runner))
    finally:
        runner.close()
    return 0


def cmd_pair(args) -> int:
    runner = _runner(args)
    try:
        runner.stage_organize(_iteration(args, runner))
    finally:
        runner.close()
    return 0


def cmd_train(args) -> int:
    runner = _runner(args)
    try:
        t = args.iteration if args.iteration is not None else runner.state.iteration + 1
        if t == 0:
            runner.stage_train0()
        else:
            runner.stage_train(t)
    finally:
        runner.close()
    return 0


def cmd_eval(args) -> int:
    runner = _runner(args)
    try:
        t = args.iteration if args.iteration is not None else runner.state.iteration
        runner._eval_stage(f"eval_{t}", t)
        acc = runner.state.metrics(f"eval_{t}").get("accuracy")
        print(f"iteration {t} greedy accuracy: {acc}")
    finally:
        runner.close()
    return 0


def cmd_run(args) -> int:
    config = _load_config(args)
    runner = Runner(config, args.out)
    try:
        state = runner.run()
    finally:
        runner.close()
    for t in range(0, config.T + 1):
        acc = state.metrics(f"eval_{t}").get("accuracy")
        if acc is not None:
            print(f"iteration {t}: accuracy {acc:.4f}")
    return 0


def cmd_report(args) -> int:
    summary = report(args.out)
    print(json.dumps(summary, sort_keys=True, indent=1))
    return 0


def cmd_compare(args) -> int:
    config = _load_config(args)
    rows = compare_baselines(config, args.out, methods=args.methods.split(","))
    for row in rows:
        print(
            f"{row['method']:8s} iter {row['iteration']}: "
            f"accuracy={row['accuracy']} train_size={row['train_size']}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vista", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, needs_iteration=False, needs_out=True):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="pipeline config JSON")
        p.add_argument("--seed", type=int, default=None, help="override global seed")
        p.add_argument("--backend", default=None,
                       help="toy | scripted:<path> | subprocess:<command>")
        if needs_out:
            p.add_argument("--out", required=True, help="run directory")
        if needs_iteration:
            p.add_argument("--iteration", type=int, default=None)
        p.set_defaults(fn=fn)
        return p

    add("seed", cmd_seed)
    add("collect", cmd_collect, needs_iteration=True)
    add("resample", cmd_resample, needs_iteration=True)
    add("score", cmd_score, needs_iteration=True)
    add("filter", cmd_filter, needs_iteration=True)
    add("pair", cmd_pair, needs_iteration=True)
    add("train", cmd_train, needs_iteration=True)
    add("eval", cmd_eval, needs_iteration=True)
    add("run", cmd_run)
    p = sub.add_parser("report")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)
    p = add("compare", cmd_compare)
    p.add_argument("--methods", default="star,restem,rft,vista")
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except TrainError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 4
    except BackendError as e:
        print(f"backend error: {e}", file=sys.stderr)
        return 3
    except (UsageError, VistaError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
