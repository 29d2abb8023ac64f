"""Command-line entry point: ``behaviorkit {train,sweep,eval,dump-traj,mi-dims}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from .metrics import mi_per_dimension, write_trajectories, PolicySampler

log = logging.getLogger("behaviorkit")


def parse_set(items) -> list[tuple[str, object]]:
    """``key=value`` pairs; values are parsed as JSON when possible, else kept as strings."""
    out = []
    for item in items or []:
        if "=" not in item:
            raise ex.ConfigError(f"--set {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out.append((key.strip(), value))
    return out


def _config_with_overrides(path, overrides) -> dict:
    config = ex.load_config(path)
    for key, value in parse_set(overrides):
        ex.set_dotted(config, key, value)
    return ex.resolve_config(config, Path(path).parent)


def _progress(line):
    log.info("step %d  reward %s  score %s  kl %.4f", line["step"],
             "n/a" if line["episode_reward"] is None else f"{line['episode_reward']:.3f}",
             "n/a" if line["episode_score"] is None else f"{line['episode_score']:.3f}", line["kl"])


def cmd_train(args):
    config = _config_with_overrides(args.config, args.set)
    seeds = [args.seed] if args.seed is not None else None
    out = ex.run(config, args.out, seeds=seeds, log=None if args.quiet else _progress)
    for seed, report in sorted(ex.final_reports(out).items()):
        print(f"seed {seed}: " + json.dumps(report.to_dict()["metrics"], sort_keys=True))
    print(out)


def cmd_sweep(args):
    path = Path(args.spec)
    if not path.exists():
        raise ex.ConfigError(f"sweep spec not found: {path}")
    spec = json.loads(path.read_text())
    if args.out:
        spec["out"] = str(Path(args.out).resolve())
    out = ex.sweep(spec, path.parent, log=None if args.quiet else _progress)
    print((out / "summary.csv").read_text(), end="")


def _load_config_arg(path):
    return ex.load_config(path) if path else None


def cmd_eval(args):
    config = _load_config_arg(args.config)
    if args.trajectories:
        if config is None:
            raise ex.ConfigError("--config is required with --trajectories")
        report = ex.evaluate_trajectory_file(args.trajectories, config)
    else:
        if not args.checkpoint:
            raise ex.ConfigError("eval needs --checkpoint or --trajectories")
        report = ex.evaluate_checkpoint(args.checkpoint, config, args.seed)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def cmd_dump_traj(args):
    exp = ex.load_experiment(args.checkpoint, _load_config_arg(args.config))
    rng = np.random.default_rng(args.seed)
    write_trajectories(args.out, exp.record_episodes(args.episodes, rng))
    print(args.out)


def cmd_mi_dims(args):
    exp = ex.load_experiment(args.checkpoint, _load_config_arg(args.config))
    if exp.skills is None:
        raise ex.ConfigError("mi-dims needs a skill-conditioned (mimax) checkpoint")
    dims = [int(d) for d in args.dims.split(",")] if args.dims else list(range(exp.env.obs_dim))
    ev = exp.eval_settings
    full = ex.FeatureExtractor(tuple(range(exp.env.obs_dim)))
    sampler = PolicySampler(exp.env, exp.state.policy, full, exp.skills, ev.deterministic)
    result = mi_per_dimension(sampler, exp.skills, dims, ev.num_intents, ev.episodes,
                              exp.env.horizon, ev.spec(1), np.random.default_rng(ev.seed))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dim", "MI", "H", "H_cond"])
        for d in dims:
            w.writerow([d, *result[d]])
    print(Path(args.out).read_text(), end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="behaviorkit", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train every seed of a config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None, help="run only this seed")
    t.add_argument("--out", default=None, help="run directory (default: config 'out')")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-key override")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="run a Cartesian-product sweep and write summary.csv")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", default=None)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a trajectories CSV")
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--config", default=None)
    e.add_argument("--trajectories", default=None)
    e.add_argument("--seed", type=int, default=None, help="eval seed override")
    e.add_argument("--out", default=None, help="also write the report here")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("dump-traj", help="roll out a checkpoint and write trajectories.csv")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--episodes", type=int, required=True)
    d.add_argument("--config", default=None)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", default="trajectories.csv")
    d.set_defaults(func=cmd_dump_traj)

    m = sub.add_parser("mi-dims", help="per-dimension MI of a skill-conditioned checkpoint")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--config", default=None)
    m.add_argument("--dims", default=None, help="comma-separated observation indices")
    m.add_argument("--out", default="mi_dims.csv")
    m.set_defaults(func=cmd_mi_dims)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        args.func(args)
    except (ex.ConfigError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
