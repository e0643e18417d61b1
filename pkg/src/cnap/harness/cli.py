"""Command line entry point: ``cnap <subcommand> ...``.

Exit codes: 0 success, 2 config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..agent import Agent
from .config import ConfigError, expand_grid, load_config, load_raw, resolve
from .plot import emit_plot
from .runner import RunFailure, evaluate, pretrain_executor_from_config, run_experiment, write_pretrain_metrics

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    out = resolve(cfg.executor.checkpoint or f"runs/executors/{cfg.executor_regime()}-k{cfg.hidden}.ckpt")
    out.parent.mkdir(parents=True, exist_ok=True)
    result = pretrain_executor_from_config(cfg)
    result.executor.export_processor(out)
    write_pretrain_metrics(result, out.with_suffix(".json"))
    print(json.dumps({"checkpoint": str(out), "heldout_mse": result.heldout_mse,
                      "large_mse": result.large_mse}))
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    summary = run_experiment(cfg)
    print(json.dumps({k: summary[k] for k in ("name", "fingerprint", "seeds", "seed_mean",
                                              "seed_std", "episode_mean", "episode_std")}))
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    try:
        agent = Agent.load(args.checkpoint)
    except (OSError, ValueError, KeyError) as err:
        raise RunFailure(f"cannot load {args.checkpoint}: {err}") from err
    rng = np.random.default_rng(args.seed)
    mean, std, returns = evaluate(agent, cfg.env, cfg.eval_episodes, rng)
    print(json.dumps({"episodes": len(returns), "mean_reward": mean, "std_reward": std}))
    return 0


def cmd_ablate(args) -> int:
    configs = expand_grid(load_raw(args.config))
    for cfg in configs:
        summary = run_experiment(cfg)
        print(json.dumps({"name": cfg.name, "seed_mean": summary["seed_mean"],
                          "seed_std": summary["seed_std"]}))
    return 0


def cmd_plot(args) -> int:
    root = Path(args.dir)
    curves = sorted(root.rglob("curves.csv"))
    if not curves:
        raise ConfigError("dir", f"no curves.csv under {root}")
    out = emit_plot(curves, args.output or root / "learning_curves.svg", title=args.title)
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cnap", description="Planning-executor PPO experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain-executor", help="pretrain and export an executor processor")
    s.add_argument("config")
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("train", help="train and evaluate every seed of a config")
    s.add_argument("config")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("evaluate", help="evaluate a saved agent checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("config")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("ablate", help="run the cross product of a grid config")
    s.add_argument("config")
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("plot", help="render learning curves found under a directory")
    s.add_argument("dir")
    s.add_argument("-o", "--output")
    s.add_argument("--title")
    s.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except RunFailure as err:
        where = f" (seed {err.seed})" if err.seed is not None else ""
        print(f"run failed{where}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as err:
        print(f"run failed: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
