"""Command-line entry point.

    fosp gen-data      --config C --out DATA
    fosp train-offline --config C --dataset DATA --out DIR
    fosp finetune      --config C --checkpoint DIR/offline.ckpt --dataset DATA --out DIR2
    fosp eval          --checkpoint CKPT [--config C]
    fosp audit

Exit codes: 0 success, 1 validation error (bad flags, config, files), 2
numerical abort during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from fosp import approx, audit, datastore, trainer
from fosp.config import ConfigError, ExperimentConfig

log = logging.getLogger("fosp")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="experiment config file (key = value)")
    common.add_argument("--seed", type=int, metavar="N", help="override the config seed")
    common.add_argument("--out", metavar="PATH", help="output file (gen-data) or directory")
    common.add_argument("--dataset", metavar="PATH", help="trajectory file")
    common.add_argument("--checkpoint", metavar="PATH", help="checkpoint file")
    parser = _Parser(prog="fosp", description="Safe offline-to-online model-based RL on small CMDPs.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="generate the 1:1:1 behavior dataset")
    sub.add_parser("train-offline", parents=[common], help="offline training on a dataset")
    sub.add_parser("finetune", parents=[common], help="online fine-tuning from an offline checkpoint")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint with mode actions")
    ev.add_argument("--episodes", type=int, help="evaluation episodes (default: config eval_episodes)")
    ev.add_argument("--env", help="environment to evaluate on (default: the checkpoint's)")
    ev.add_argument("--frozen", action="store_true", help="evaluate the frozen offline policy of an online checkpoint")
    au = sub.add_parser("audit", parents=[common], help="run the gradient and oracle property suites")
    au.add_argument("--suite", action="append", choices=list(audit.SUITES), help="run only these suites")
    return parser


def _config(args) -> ExperimentConfig:
    if args.config:
        if not Path(args.config).exists():
            raise ConfigError(f"--config path does not exist: {args.config}")
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.dataset:
        cfg = cfg.replace(dataset=args.dataset)
    return cfg


def _checkpoint(args) -> dict:
    if not args.checkpoint:
        raise ConfigError("a checkpoint is required (--checkpoint PATH)")
    if not Path(args.checkpoint).exists():
        raise ConfigError(f"--checkpoint path does not exist: {args.checkpoint}")
    return approx.load_checkpoint(args.checkpoint)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if not args.out:
        raise ConfigError("an output path is required (--out PATH)")
    data = trainer.generate(cfg, args.out)
    print(json.dumps({"trajectories": len(data.trajectories), "out": args.out}))
    return EXIT_OK


def cmd_train_offline(args) -> int:
    cfg = _config(args)
    data = trainer.load_dataset(cfg, cfg.dataset)
    out = args.out or "fosp-offline"
    Path(out).mkdir(parents=True, exist_ok=True)
    cfg.save(Path(out) / "config.txt")
    res = trainer.train_offline(cfg, data, out)
    summary = {"checkpoint": str(Path(out) / "offline.ckpt")}
    if res.evaluation is not None:
        summary.update(zip(("reward", "cost", "cost_regret"), res.evaluation))
    print(json.dumps(summary))
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _config(args)
    segments = _checkpoint(args)
    data = trainer.load_dataset(cfg, cfg.dataset) if cfg.dataset else None
    out = args.out or "fosp-online"
    Path(out).mkdir(parents=True, exist_ok=True)
    cfg.save(Path(out) / "config.txt")
    res = trainer.finetune_online(cfg, segments, data, out)
    print(json.dumps({"checkpoint": str(Path(out) / "online.ckpt"), "before": res.before,
                      "after": res.after, "cost_regret": res.cost_regret}))
    return EXIT_OK


def cmd_eval(args) -> int:
    segments = _checkpoint(args)
    stored = trainer.config_from_segments(segments)
    cfg = ExperimentConfig.load(args.config) if args.config else stored
    episodes = args.episodes if args.episodes is not None else cfg.eval_episodes
    if episodes < 1:
        raise ConfigError("--episodes must be >= 1")
    seed = cfg.seed if args.seed is None else args.seed
    env = trainer.make_env(args.env or stored.env, cfg.slip)
    which = "frozen" if args.frozen else "auto"
    reward, cost, regret = trainer.evaluate(segments, env, episodes, seed, which)
    print(json.dumps({"reward": reward, "cost": cost, "cost_regret": regret, "episodes": episodes}))
    return EXIT_OK


def cmd_audit(args) -> int:
    results = audit.run_all(args.suite)
    for r in results:
        print(r.line(), flush=True)
    return EXIT_OK if all(r.passed for r in results) else EXIT_INVALID


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-offline": cmd_train_offline,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "audit": cmd_audit,
}


def main(argv=None) -> int:
    trainer.configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except trainer.NumericalAbort as err:
        log.error("numerical abort: %s %s", err, err.components)
        return EXIT_NUMERICAL
    except (ConfigError, datastore.SamplingError, approx.CheckpointError, datastore.DataFormatError,
            FileNotFoundError) as err:
        log.error("%s", err)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
