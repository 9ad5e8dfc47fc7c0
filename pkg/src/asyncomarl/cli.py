"""``asyncomarl train|evaluate|inspect`` entry point.

Exit codes: 0 ok, 2 configuration error, 3 numeric divergence, 4 checkpoint
error. Every output goes under the run directory (``run_dir`` in the config,
overridden by ``ASYNCOMARL_RUN_DIR``).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import torch

from . import evalkit, trainer
from .config import ConfigError, load_config
from .neuralcore import CheckpointError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECKPOINT = 0, 2, 3, 4

log = logging.getLogger("asyncomarl")


def _parse_tau(text: str | None) -> list:
    if not text:
        return []
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        out.append(part if part in ("first", "middle", "last") else int(part))
    return out


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    run_dir = Path(os.environ.get("ASYNCOMARL_RUN_DIR") or cfg.run_dir)
    return cfg, run_dir


def cmd_train(args) -> int:
    cfg, run_dir = _load(args)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.to_text())

    def progress(ts, roll, report):
        log.info("update %d env_steps %d success %.1f%% grad_norm %.3f", ts.update, ts.env_steps,
                 evalkit.success_rate(roll.logs), report["grad_norm"])

    trainer.train(cfg, run_dir, resume=args.ckpt, progress=progress)
    return EXIT_OK


def _policy_from(cfg, ckpt):
    if ckpt is None:
        raise CheckpointError("a checkpoint is required (--ckpt)")
    ts = trainer.load_train_state(ckpt, cfg)
    return ts


def cmd_evaluate(args) -> int:
    cfg, run_dir = _load(args)
    torch.set_num_threads(1)
    ts = _policy_from(cfg, args.ckpt)
    metrics = evalkit.evaluate(ts.policy, cfg, ts.value_stats)
    run_dir.mkdir(parents=True, exist_ok=True)
    out = run_dir / "metrics.csv"
    out.write_text(metrics.to_csv())
    print(metrics.to_csv(), end="")
    return EXIT_OK


def cmd_inspect(args) -> int:
    cfg, run_dir = _load(args)
    torch.set_num_threads(1)
    ts = _policy_from(cfg, args.ckpt)
    run_dir.mkdir(parents=True, exist_ok=True)
    out = run_dir / f"attention_agent{args.agent}.json"
    evalkit.dump_attention(ts.policy, cfg, ts.value_stats, args.agent, _parse_tau(args.tau), path=out)
    print(out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="asyncomarl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train", "evaluate", "inspect"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--ckpt", default=None, help="checkpoint to resume from (train) or to load")
        s.add_argument("--seed", type=int, default=None)
        if name == "inspect":
            s.add_argument("--agent", type=int, default=0)
            s.add_argument("--tau", default="", help="comma-separated action indices or first,middle,last")
    return p


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "inspect": cmd_inspect}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (trainer.RolloutDivergence, trainer.UpdateRejected, FloatingPointError) as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
