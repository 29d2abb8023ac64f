"""Configuration-driven training, evaluation and sweeps.

An experiment config is a JSON object::

    {
      "env": "descriptors/point_mass.json",   # path (relative to the config) or inline descriptor
      "family": "mimax",                      # task | mimax | dmin
      "mimax": {"algorithm": "DIAYN", "obs_indices": [0, 1]},
      "ppo": {"total_steps": 500000},
      "eval": {"episodes": 8},
      "seeds": [0],
      "eval_every": 10,
      "out": "runs/diayn"
    }

Missing keys take the defaults of the corresponding dataclasses; the fully
resolved config (descriptor inlined) is written next to every run so that
the snapshot plus a seed reproduces it.
"""
from __future__ import annotations

import copy
import csv
import itertools
import json
import math
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import neural
from .dmin import DminConfig, DminRewarder
from .envcore import Environment, FeatureExtractor, compose, load_descriptor
from .metrics import (EvalContext, EvalSettings, MetricReport, PolicySampler, evaluate_all,
                      evaluate_trajectories, fingerprint, read_trajectories, write_trajectories)
from .mimax import FixedPosterior, LearnedPosterior, MimaxConfig, MimaxRewarder
from .ppo import (GaussianPolicy, PpoConfig, PpoState, RunningNorm, identity_reward, rollout, start_envs,
                  train_step)

FAMILIES = ("task", "mimax", "dmin")
SUMMARY_METRICS = [("MI(s,z)", "MI(s,z)", 1.0), ("H(s)", "H(s)", 1.0), ("−LGR", "LGR", -1.0),
                   ("−Energy Distance", "energy_distance", -1.0),
                   ("episode_reward", "episode_reward", 1.0), ("episode_score", "episode_score", 1.0)]


class ConfigError(ValueError):
    """Invalid experiment configuration; the message starts with the failing key path."""


def _build(cls, data: Optional[dict], path: str):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown key")
    try:
        return cls(**data)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def resolve_config(config: dict, base_dir: Optional[Path] = None) -> dict:
    """Validate a config and fill in every default. Descriptor paths are inlined."""
    config = copy.deepcopy(config)
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    if "env" not in config:
        raise ConfigError("env: missing environment descriptor")
    env_ref = config["env"]
    if isinstance(env_ref, str):
        path = Path(env_ref)
        if not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise ConfigError(f"env: descriptor file not found: {path}")
        try:
            descriptor = load_descriptor(path)
        except ValueError as exc:
            raise ConfigError(f"env: {path}: {exc}") from None
    elif isinstance(env_ref, dict):
        descriptor = env_ref
    else:
        raise ConfigError("env: must be a descriptor path or an inline descriptor object")
    try:
        env = compose(descriptor)
    except ValueError as exc:
        raise ConfigError(f"env: {exc}") from None

    family = config.get("family", "task")
    if family not in FAMILIES:
        raise ConfigError(f"family: must be one of {FAMILIES}, got {family!r}")
    seeds = config.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds: must be a non-empty list of integers")
    eval_every = config.get("eval_every", 10)
    if not isinstance(eval_every, int) or eval_every < 1:
        raise ConfigError("eval_every: must be a positive integer")

    resolved: dict[str, Any] = {
        "env": descriptor,
        "family": family,
        "ppo": asdict(_build(PpoConfig, config.get("ppo"), "ppo")),
        "eval": asdict(_build(EvalSettings, config.get("eval"), "eval")),
        "seeds": seeds,
        "eval_every": eval_every,
        "out": str(config.get("out", "runs/experiment")),
    }
    if family == "mimax":
        mc = _build(MimaxConfig, config.get("mimax"), "mimax")
        try:
            mc.feature_extractor(env.obs_dim)
        except (IndexError, ValueError) as exc:
            raise ConfigError(f"mimax.obs_indices: {exc}") from None
        resolved["mimax"] = asdict(mc)
    elif config.get("mimax") is not None:
        raise ConfigError("mimax: only valid with family 'mimax'")
    if family == "dmin":
        dc = _build(DminConfig, config.get("dmin"), "dmin")
        resolved["dmin"] = asdict(dc)
    elif config.get("dmin") is not None:
        raise ConfigError("dmin: only valid with family 'dmin'")
    for extra in set(config) - set(resolved) - {"mimax", "dmin", "name"}:
        raise ConfigError(f"{extra}: unknown key")
    if "name" in config:
        resolved["name"] = config["name"]
    return _jsonable(resolved)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        raw = json.load(fh)
    return resolve_config(raw, path.parent)


def set_dotted(config: dict, key: str, value):
    """Set ``a.b.c`` in a nested dict; every segment but the last must already exist."""
    parts = key.split(".")
    node = config
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"{key}: does not resolve in the config")
        node = node[p]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"{key}: does not resolve in the config")
    node[parts[-1]] = value


def default_indices(env: Environment, space: str = "pos") -> tuple:
    """Observation indices of the first actuated component's position or velocity."""
    name = env.component_names[int(np.flatnonzero(env.actuated)[0])]
    lo, hi = env.layout[f"{name}.{space}"]
    return tuple(range(lo, hi))


# -- experiment assembly -------------------------------------------------------

class Experiment:
    """A resolved config turned into live objects for one seed."""

    def __init__(self, config: dict, seed: int):
        self.config = config
        self.seed = seed
        self.env = compose(config["env"])
        self.family = config["family"]
        self.ppo_config = PpoConfig(**config["ppo"])
        self.eval_settings = EvalSettings(**config["eval"])
        self.rng = np.random.default_rng(seed)
        self.skills = None
        self.rewarder = None
        self.fx = None
        self.target = None
        if self.family == "mimax":
            mc = dict(config["mimax"])
            if mc["obs_indices"] is None and mc["algorithm"] != "DIAYN_FULL":
                mc["obs_indices"] = default_indices(self.env)
            self.mimax_config = MimaxConfig(**mc)
            self.rewarder = MimaxRewarder(self.mimax_config, self.env.obs_dim, self.rng)
            self.skills = self.rewarder.prior
            self.fx = self.rewarder.fx
        elif self.family == "dmin":
            dc = DminConfig(**config["dmin"])
            indices = dc.obs_indices or default_indices(self.env, dc.target.get("space", "pos"))
            self.rewarder = DminRewarder(dc, self.env.obs_dim, self.rng, FeatureExtractor(indices))
            self.fx = self.rewarder.fx
            self.target = self.rewarder.target
        enc = self.skills.encoding_dim if self.skills is not None else 0
        self.state = PpoState.create(self.env.obs_dim + enc, self.env.action_dim, self.ppo_config,
                                     self.rng)
        self.fingerprint = fingerprint({k: v for k, v in config.items() if k != "out"})

    @property
    def reward_synth(self):
        return self.rewarder if self.rewarder is not None else identity_reward

    def eval_fx(self) -> FeatureExtractor:
        idx = self.eval_settings.obs_indices
        if idx is None:
            idx = self.fx.obs_indices if (self.fx is not None and self.fx.dim <= 2) else default_indices(self.env)
        return FeatureExtractor(idx).check(self.env.obs_dim)

    def eval_context(self) -> EvalContext:
        infer = None
        if self.family == "mimax":
            eval_fx = self.eval_fx()
            if eval_fx.obs_indices == self.fx.obs_indices:
                infer = self.rewarder.infer
        return EvalContext(self.env, self.state.policy, self.family, self.eval_fx(), self.skills,
                           infer, self.target, self.fingerprint)

    def evaluate(self, step: int) -> MetricReport:
        return evaluate_all(self.eval_context(), self.eval_settings, step)

    # -- checkpoints --

    def tensors(self) -> dict:
        out = neural.mlp_to_tensors("policy", self.state.policy.net)
        out["policy.log_std"] = self.state.policy.log_std
        norm = self.state.policy.norm
        if norm is not None:
            out["policy.norm_count"] = np.array([norm.count])
            out["policy.norm_mean"] = norm.mean
            out["policy.norm_var"] = norm.var
        out.update(neural.mlp_to_tensors("value", self.state.value))
        head = getattr(self.rewarder, "head", None)
        if isinstance(head, LearnedPosterior):
            out.update(neural.mlp_to_tensors("posterior", head.params))
            for i, u in enumerate(head.u):
                out[f"posterior.u{i}"] = u
        disc = getattr(self.rewarder, "disc", None)
        if disc is not None:
            out.update(neural.mlp_to_tensors("discriminator", disc.params))
        return out

    def load_tensors(self, tensors: dict):
        def check(prefix, current):
            loaded = neural.mlp_from_tensors(prefix, tensors, current.activation)
            if loaded.sizes != current.sizes:
                raise ValueError(f"checkpoint {prefix} has layer sizes {loaded.sizes}, "
                                 f"config expects {current.sizes}")
            return loaded
        net = check("policy", self.state.policy.net)
        log_std = tensors["policy.log_std"]
        if log_std.shape != self.state.policy.log_std.shape:
            raise ValueError("checkpoint policy.log_std shape does not match the config")
        value = check("value", self.state.value)
        norm = self.state.policy.norm
        if norm is None and "policy.norm_mean" in tensors:
            raise ValueError("checkpoint has an observation normalizer but the config disables it")
        if norm is not None:
            if "policy.norm_mean" not in tensors:
                raise ValueError("config normalizes observations but the checkpoint has no normalizer")
            norm = RunningNorm(float(tensors["policy.norm_count"][0]),
                               np.asarray(tensors["policy.norm_mean"], dtype=np.float64),
                               np.asarray(tensors["policy.norm_var"], dtype=np.float64))
            if norm.mean.shape != self.state.policy.norm.mean.shape:
                raise ValueError("checkpoint normalizer width does not match the config")
        self.state = PpoState(GaussianPolicy(net, log_std, norm), value, self.state.policy_opt,
                              self.state.value_opt)
        head = getattr(self.rewarder, "head", None)
        if isinstance(head, LearnedPosterior):
            params = check("posterior", head.params)
            us = [tensors[f"posterior.u{i}"] for i in range(len(head.u))]
            self.rewarder.head = LearnedPosterior(params, head.output, head.spectral_norm, us, head.opt)
        disc = getattr(self.rewarder, "disc", None)
        if disc is not None:
            disc.params = check("discriminator", disc.params)

    def save_checkpoint(self, path) -> Path:
        return neural.save_tensors(path, self.tensors(), {"seed": self.seed, "config": self.config})

    # -- trajectories --

    def record_episodes(self, episodes: int, rng=None) -> list[dict]:
        rng = rng if rng is not None else np.random.default_rng(self.eval_settings.seed)
        sampler = PolicySampler(self.env, self.state.policy, self.eval_fx(), self.skills,
                                self.eval_settings.deterministic)
        if self.skills is not None:
            zs = self.skills.sample(rng, episodes)
        else:
            zs = np.zeros((episodes, 0))
        traj = sampler.rollout(zs, 1, self.env.horizon, rng)
        out = []
        for i in range(episodes):
            z = traj["z"][i]
            out.append({"z": z if z.size else np.int64(0), "obs": traj["obs"][i],
                        "actions": traj["actions"][i], "reward": traj["reward"][i],
                        "score": traj["score"][i]})
        return out


def train(exp: Experiment, out_dir: Optional[Path] = None, log=None) -> list[MetricReport]:
    """Run PPO with the experiment's reward family; write logs to ``out_dir`` if given."""
    cfg = exp.ppo_config
    rng = exp.rng
    carry = start_envs(exp.env, cfg.num_envs, rng, exp.skills)
    n_batches = max(1, math.ceil(cfg.total_steps / cfg.steps_per_batch))
    reports = []
    metrics_fh = stats_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "w")
        stats_fh = open(out_dir / "train_stats.jsonl", "w")
    try:
        steps = 0
        for b in range(n_batches):
            batch, carry = rollout(exp.state.policy, exp.state.value, exp.reward_synth, exp.env, carry,
                                   cfg.unroll_length, rng, exp.fx, exp.skills)
            steps += batch.num_steps
            extra = {}
            if exp.family == "mimax":
                n = batch.rewards.size
                extra = exp.rewarder.update(batch.features.reshape(n, -1),
                                            batch.z.reshape(n, *batch.z.shape[2:]), rng)
            elif exp.family == "dmin":
                extra = exp.rewarder.update(batch.features.reshape(batch.rewards.size, -1), rng)
            exp.state, stats = train_step(exp.state, batch, cfg, rng, b / n_batches)
            ep = batch.episodes
            line = {
                "step": steps,
                "episode_reward": float(np.mean([e[0] for e in ep])) if ep else None,
                "episode_score": float(np.mean([e[1] for e in ep])) if ep else None,
                "synth_reward": float(np.mean(batch.rewards)),
                "losses": {"policy": stats["policy_loss"], "value": stats["value_loss"], **extra},
                "kl": stats["approx_kl"],
                "clip_fraction": stats["clip_fraction"],
            }
            if stats_fh:
                stats_fh.write(json.dumps(line, sort_keys=True) + "\n")
            if log:
                log(line)
            if (b + 1) % exp.config["eval_every"] == 0 or b == n_batches - 1:
                report = exp.evaluate(steps)
                reports.append(report)
                if metrics_fh:
                    metrics_fh.write(report.to_json() + "\n")
                    metrics_fh.flush()
    finally:
        if metrics_fh:
            metrics_fh.close()
        if stats_fh:
            stats_fh.close()
    return reports


def run(config: dict, out: Optional[str] = None, seeds: Optional[list] = None, log=None) -> Path:
    """Train every seed of a resolved config; returns the run directory."""
    out_dir = Path(out or config["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = seeds if seeds is not None else config["seeds"]
    for seed in seeds:
        seed_dir = out_dir / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        snapshot = dict(config, seeds=[seed], out=str(out_dir))
        (seed_dir / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True))
        exp = Experiment(config, seed)
        train(exp, seed_dir, log)
        exp.save_checkpoint(seed_dir / "checkpoint")
        write_trajectories(seed_dir / "trajectories.csv",
                           exp.record_episodes(config["eval"]["episodes"]))
    return out_dir


def load_experiment(checkpoint, config: Optional[dict] = None) -> Experiment:
    tensors, meta = neural.load_tensors(checkpoint)
    config = config or meta.get("config")
    if config is None:
        raise ConfigError("checkpoint carries no config; pass one explicitly")
    exp = Experiment(config, int(meta.get("seed", config["seeds"][0])))
    exp.load_tensors(tensors)
    return exp


def evaluate_checkpoint(checkpoint, config: Optional[dict] = None, seed: Optional[int] = None) -> MetricReport:
    exp = load_experiment(checkpoint, config)
    if seed is not None:
        exp.eval_settings = EvalSettings(**{**asdict(exp.eval_settings), "seed": seed})
    return exp.evaluate(step=0)


def evaluate_trajectory_file(path, config: dict) -> MetricReport:
    """Metrics for externally produced trajectories, no environment stepping involved."""
    exp = Experiment(config, config["seeds"][0])
    ev = exp.eval_settings
    return evaluate_trajectories(read_trajectories(path), exp.eval_fx(), ev.spec(exp.eval_fx().dim),
                                 exp.target, ev.max_samples, np.random.default_rng(ev.seed))


# -- sweeps ------------------------------------------------------------------------

def final_reports(run_dir: Path) -> dict[int, MetricReport]:
    out = {}
    for seed_dir in sorted(run_dir.glob("seed_*")):
        lines = (seed_dir / "metrics.jsonl").read_text().splitlines()
        if lines:
            out[int(seed_dir.name.split("_")[1])] = MetricReport.from_dict(json.loads(lines[-1]))
    return out


def summarize(reports: dict[int, MetricReport]) -> dict[str, tuple[float, float]]:
    """Mean and population std across seeds of the table metrics (signs as in the tables)."""
    out = {}
    for column, key, sign in SUMMARY_METRICS:
        vals = [sign * r.value(key) for r in reports.values() if key in r.metrics]
        if vals:
            out[column] = (float(np.mean(vals)), float(np.std(vals)))
    return out


def sweep(spec: dict, base_dir: Optional[Path] = None, log=None) -> Path:
    """Run the Cartesian product of ``spec['grid']`` over ``spec['base']``; write summary.csv."""
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    base = spec.get("base")
    if isinstance(base, str):
        base_path = base_dir / base
        base = load_config(base_path)
    elif isinstance(base, dict):
        base = resolve_config(base, base_dir)
    else:
        raise ConfigError("base: must be a config path or object")
    grid = spec.get("grid", {})
    if not isinstance(grid, dict):
        raise ConfigError("grid: must map dotted keys to value lists")
    for key, values in grid.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid.{key}: must be a non-empty list")
        set_dotted(copy.deepcopy(base), key, values[0])
    out_dir = Path(spec.get("out") or base["out"])
    if not out_dir.is_absolute():
        out_dir = base_dir / out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    keys = list(grid)
    rows = []
    for i, combo in enumerate(itertools.product(*[grid[k] for k in keys])):
        variant = copy.deepcopy(base)
        for k, v in zip(keys, combo):
            set_dotted(variant, k, v)
        row = {"variant": i, **{k: json.dumps(v) for k, v in zip(keys, combo)}}
        try:
            variant = resolve_config(variant, base_dir)
            vdir = run(variant, str(out_dir / f"variant_{i}"), log=log)
            summary = summarize(final_reports(vdir))
            row["status"] = "ok"
            for column, _, _ in SUMMARY_METRICS:
                if column in summary:
                    row[column], row[column + " std"] = summary[column]
        except Exception as exc:  # recorded, the sweep continues
            row["status"] = f"error: {type(exc).__name__}: {exc}"
        rows.append(row)
    columns = ["variant", *keys, "status"]
    for column, _, _ in SUMMARY_METRICS:
        if any(column in r for r in rows):
            columns += [column, column + " std"]
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c, "") for c in columns})
    return out_dir
