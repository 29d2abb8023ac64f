"""Stationary evaluation metrics for reward-free behavior.

* histogram (particle) mutual information between skills and features
* energy distance between policy features and target samples
* latent goal reaching (LGR)

Metric functions take a *sampler* so the same code scores live policies
and synthetic stand-ins. A sampler is any callable
``sampler(zs, M, T, rng) -> array (len(zs), M * T, feature_dim)`` returning
the features visited by ``M`` episodes of ``T`` steps under each skill.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels


@dataclass(frozen=True)
class HistogramSpec:
    bins: int = 16
    low: float | tuple = -5.0
    high: float | tuple = 5.0
    dims: int = 2

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("need at least 2 bins")
        if self.dims not in (1, 2):
            raise ValueError("histogram entropy supports 1 or 2 dimensions")
        if np.any(np.asarray(self.lows) >= np.asarray(self.highs)):
            raise ValueError("range must satisfy low < high")

    @property
    def lows(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.low, dtype=np.float64), (self.dims,)).copy()

    @property
    def highs(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.high, dtype=np.float64), (self.dims,)).copy()

    def with_dims(self, dims: int) -> "HistogramSpec":
        low = self.low if np.ndim(self.low) == 0 else tuple(np.asarray(self.low)[:dims])
        high = self.high if np.ndim(self.high) == 0 else tuple(np.asarray(self.high)[:dims])
        return HistogramSpec(self.bins, low, high, dims)


def histogram_entropy(samples, spec: HistogramSpec) -> tuple[float, float]:
    """Plug-in entropy (nats) of the binned samples.

    Samples outside the range are dropped; returns ``(entropy, excluded_fraction)``.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] == 0:
        raise ValueError("no samples")
    if x.shape[1] != spec.dims:
        raise ValueError(f"samples have {x.shape[1]} dims, spec expects {spec.dims}")
    counts, excluded = kernels.bin_counts(x, spec.lows, spec.highs, spec.bins)
    kept = counts.sum()
    if kept == 0:
        raise ValueError("every sample fell outside the histogram range")
    p = counts[counts > 0] / kept
    return float(-np.sum(p * np.log(p))), excluded / x.shape[0]


def intents(prior, n: int, rng: np.random.Generator):
    """Skills to evaluate: the full support for categorical priors, else ``n`` prior draws."""
    if prior.discrete:
        return np.arange(prior.num_skills)
    return prior.sample(rng, n)


def mi_from_features(per_intent: Sequence[np.ndarray], spec: HistogramSpec):
    """``(MI, H(o), mean_n H(o|z_n))`` from per-intent feature samples."""
    hs = [histogram_entropy(f, spec)[0] for f in per_intent]
    h, _ = histogram_entropy(np.concatenate([np.asarray(f).reshape(len(f), -1) for f in per_intent]), spec)
    h_cond = float(np.mean(hs))
    return max(h - h_cond, 0.0), h, h_cond


def particle_mi(sampler, prior, N: int, M: int, T: int, spec: HistogramSpec,
                rng: Optional[np.random.Generator] = None, return_parts: bool = False):
    """Histogram estimate of MI between skills and visited features."""
    if N < 2 and not prior.discrete:
        raise ValueError("need N >= 2 intents")
    if M < 1:
        raise ValueError("need M >= 1 episodes")
    rng = rng if rng is not None else np.random.default_rng(0)
    zs = intents(prior, N, rng)
    feats = sampler(zs, M, T, rng)
    mi, h, hc = mi_from_features(list(feats), spec)
    return (mi, h, hc) if return_parts else mi


def mi_per_dimension(sampler, prior, dims: Sequence[int], N: int, M: int, T: int,
                     spec: HistogramSpec, rng: Optional[np.random.Generator] = None,
                     features=None):
    """1-D MI, marginal and conditional entropies for each feature dimension.

    All dimensions share one set of rollouts (pass ``features`` to reuse
    rollouts collected elsewhere).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if features is None:
        zs = intents(prior, N, rng)
        features = sampler(zs, M, T, rng)
    spec1 = spec.with_dims(1)
    out = {}
    for d in dims:
        mi, h, hc = mi_from_features([f[:, d] for f in features], spec1)
        out[int(d)] = (mi, h, hc)
    return out


def energy_distance(samples_p, samples_q) -> float:
    """``2 E|x-y| - E|x-x'| - E|y-y'|`` with plain double sums over all pairs."""
    p = np.asarray(samples_p, dtype=np.float64)
    q = np.asarray(samples_q, dtype=np.float64)
    if p.ndim == 1:
        p = p[:, None]
    if q.ndim == 1:
        q = q[:, None]
    cross = kernels.mean_pairwise_distance(p, q)
    within_p = kernels.mean_pairwise_distance(p, p)
    within_q = kernels.mean_pairwise_distance(q, q)
    return 2.0 * cross - within_p - within_q


def lgr(sampler, goals, infer: Callable, sigma: float = 1.0, M: int = 8, T: int = 100,
        rng: Optional[np.random.Generator] = None) -> float:
    """Latent goal reaching: infer a skill per goal, roll it out, score squared misses.

    Returns the mean over goals, episodes and steps of ``-|goal - o(s_t)|^2 / sigma^2``.
    """
    goals = np.asarray(goals, dtype=np.float64)
    if goals.ndim != 2 or goals.shape[0] == 0:
        raise ValueError("need a non-empty (L, d) array of goals")
    rng = rng if rng is not None else np.random.default_rng(0)
    zs = infer(goals)
    feats = np.asarray(sampler(zs, M, T, rng), dtype=np.float64)
    sq = np.sum((feats - goals[:, None, :]) ** 2, axis=-1)
    return float(-np.mean(sq) / sigma ** 2)


@dataclass
class MetricReport:
    metrics: dict
    step: int = 0
    fingerprint: str = ""

    def add(self, name: str, value: float, std: float = 0.0):
        self.metrics[name] = {"value": float(value), "std": float(std)}

    def value(self, name: str) -> float:
        return self.metrics[name]["value"]

    def to_dict(self) -> dict:
        return {"step": int(self.step), "config_fingerprint": self.fingerprint,
                "metrics": {k: self.metrics[k] for k in sorted(self.metrics)}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(dict(d["metrics"]), int(d.get("step", 0)), d.get("config_fingerprint", ""))

    def check_finite(self):
        bad = [k for k, v in self.metrics.items() if not math.isfinite(v["value"])]
        if bad:
            raise FloatingPointError(f"non-finite metrics: {bad}")
        return self


def fingerprint(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


# -- trajectories on disk ----------------------------------------------------

def format_z(z) -> str:
    z = np.asarray(z)
    if z.ndim == 0:
        return str(int(z)) if np.issubdtype(z.dtype, np.integer) else repr(float(z))
    return ";".join(repr(float(v)) for v in z.reshape(-1))


def parse_z(text: str):
    if ";" in text:
        return np.array([float(v) for v in text.split(";")])
    try:
        return int(text)
    except ValueError:
        return np.array([float(text)])


def write_trajectories(path, episodes: Sequence[dict]):
    """Write episodes (dicts with z, obs (T, k), actions (T, j), reward (T,), score (T,))."""
    if not episodes:
        raise ValueError("no episodes to write")
    k = episodes[0]["obs"].shape[1]
    j = episodes[0]["actions"].shape[1]
    header = (["episode", "t", "z"] + [f"obs_{i}" for i in range(k)]
              + [f"action_{i}" for i in range(j)] + ["reward", "score"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for e, ep in enumerate(episodes):
            zs = format_z(ep["z"])
            for t in range(ep["obs"].shape[0]):
                w.writerow([e, t, zs] + [repr(float(v)) for v in ep["obs"][t]]
                           + [repr(float(v)) for v in ep["actions"][t]]
                           + [repr(float(ep["reward"][t])), repr(float(ep["score"][t]))])


def read_trajectories(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"empty trajectory file: {path}")
    header, body = rows[0], rows[1:]
    obs_cols = [i for i, h in enumerate(header) if h.startswith("obs_")]
    act_cols = [i for i, h in enumerate(header) if h.startswith("action_")]
    ri, si = header.index("reward"), header.index("score")
    episodes: dict[int, dict] = {}
    for row in body:
        e = int(row[0])
        ep = episodes.setdefault(e, {"z": row[2], "obs": [], "actions": [], "reward": [], "score": []})
        ep["obs"].append([float(row[i]) for i in obs_cols])
        ep["actions"].append([float(row[i]) for i in act_cols])
        ep["reward"].append(float(row[ri]))
        ep["score"].append(float(row[si]))
    out = []
    for e in sorted(episodes):
        ep = episodes[e]
        out.append({"z": ep["z"], "obs": np.array(ep["obs"]), "actions": np.array(ep["actions"]),
                    "reward": np.array(ep["reward"]), "score": np.array(ep["score"])})
    return out


def evaluate_trajectories(episodes: Sequence[dict], fx, spec: HistogramSpec, target=None,
                          max_samples: int = 4096, rng=None) -> MetricReport:
    """Score recorded episodes without an environment (no LGR: it needs the policy)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    report = MetricReport({})
    report.add("episode_reward", np.mean([ep["reward"].sum() for ep in episodes]))
    report.add("episode_score", np.mean([ep["score"].sum() for ep in episodes]))
    groups: dict[str, list] = {}
    for ep in episodes:
        groups.setdefault(str(ep["z"]), []).append(fx(ep["obs"]))
    per_intent = [np.concatenate(v) for _, v in sorted(groups.items())]
    spec = spec.with_dims(per_intent[0].shape[1]) if per_intent[0].shape[1] in (1, 2) else spec
    mi, h, hc = mi_from_features(per_intent, spec)
    report.add("MI(s,z)", mi)
    report.add("H(s)", h)
    report.add("H(s|z)", hc)
    if target is not None:
        from .dmin import sample_target
        pooled = np.concatenate(per_intent)
        if pooled.shape[0] > max_samples:
            pooled = pooled[rng.choice(pooled.shape[0], max_samples, replace=False)]
        report.add("energy_distance", energy_distance(pooled, sample_target(target, max_samples, rng)))
    return report


# -- live policies -------------------------------------------------------------

class PolicySampler:
    """Roll a (skill-conditioned) policy and record features of the visited states.

    Episodes for every (skill, repeat) pair run in lockstep. The states
    recorded are those reached after each of the ``T`` actions.
    """

    def __init__(self, env, policy, fx, skills=None, deterministic: bool = False):
        self.env = env
        self.policy = policy
        self.fx = fx
        self.skills = skills
        self.deterministic = deterministic
        self.last_returns = None

    def rollout(self, zs, M: int, T: int, rng: np.random.Generator):
        from .ppo import policy_input, SkillSource
        skills = self.skills or SkillSource()
        K = len(zs)
        T = min(int(T), self.env.horizon)
        z_rep = np.repeat(np.asarray(zs), M, axis=0)
        state = self.env.reset(rng.integers(0, 2**31 - 1, size=K * M))
        obs = self.env.observe(state)
        obs_hist, act_hist, rew, sco = [], [], [], []
        for _ in range(T):
            pin = policy_input(obs, z_rep, skills)
            if self.deterministic:
                action = self.policy.act(pin, deterministic=True)
            else:
                action = self.policy.act(pin, rng)
            state, res = self.env.step(state, action)
            obs = res.observation
            obs_hist.append(obs)
            act_hist.append(action)
            rew.append(res.reward)
            sco.append(res.score)
        return {"z": z_rep, "obs": np.stack(obs_hist, axis=1), "actions": np.stack(act_hist, axis=1),
                "reward": np.stack(rew, axis=1), "score": np.stack(sco, axis=1)}

    def __call__(self, zs, M: int, T: int, rng: np.random.Generator):
        traj = self.rollout(zs, M, T, rng)
        self.last_returns = (traj["reward"].sum(axis=1), traj["score"].sum(axis=1))
        feats = self.fx(traj["obs"])
        K = len(zs)
        return feats.reshape(K, -1, feats.shape[-1])


@dataclass
class EvalSettings:
    bins: int = 16
    low: float = -5.0
    high: float = 5.0
    num_intents: int = 8
    episodes: int = 8
    num_goals: int = 10
    sigma_lgr: float = 1.0
    goal_std: float = 1.0
    seed: int = 0
    max_samples: int = 4096
    horizon: Optional[int] = None
    obs_indices: Optional[tuple] = None
    deterministic: bool = False

    def spec(self, dims: int) -> HistogramSpec:
        return HistogramSpec(self.bins, self.low, self.high, dims)


@dataclass
class EvalContext:
    """What :func:`evaluate_all` needs to know about an experiment."""

    env: object
    policy: object
    family: str                      # "task" | "mimax" | "dmin"
    fx: object                       # evaluation feature extractor (1 or 2 dims)
    skills: object = None            # SkillPrior for mimax runs
    infer: Optional[Callable] = None  # goal features -> skill, for LGR
    target: object = None            # TargetDistribution for dmin runs
    fingerprint: str = ""


def evaluate_all(ctx: EvalContext, settings: EvalSettings = EvalSettings(), step: int = 0) -> MetricReport:
    """Full metric report for the current policy, deterministic given ``settings.seed``."""
    rng = np.random.default_rng(settings.seed)
    T = settings.horizon or ctx.env.horizon
    spec = settings.spec(ctx.fx.dim)
    sampler = PolicySampler(ctx.env, ctx.policy, ctx.fx, ctx.skills, settings.deterministic)
    report = MetricReport({}, step, ctx.fingerprint)
    if ctx.family == "mimax":
        zs = intents(ctx.skills, settings.num_intents, rng)
        feats = sampler(zs, settings.episodes, T, rng)
        mi, h, hc = mi_from_features(list(feats), spec)
    else:
        # unconditioned policy: a single intent, MI is zero by construction
        feats = sampler(np.zeros((settings.num_intents * settings.episodes, 0)), 1, T, rng)
        pooled = feats.reshape(-1, feats.shape[-1])
        h, _ = histogram_entropy(pooled, spec)
        mi, hc = 0.0, h
    rewards, scores = sampler.last_returns
    report.add("episode_reward", float(np.mean(rewards)))
    report.add("episode_score", float(np.mean(scores)))
    report.add("MI(s,z)", mi)
    report.add("H(s)", h)
    report.add("H(s|z)", hc)
    if ctx.family == "mimax" and ctx.infer is not None:
        goals = settings.goal_std * rng.standard_normal((settings.num_goals, ctx.fx.dim))
        report.add("LGR", lgr(sampler, goals, ctx.infer, settings.sigma_lgr, settings.episodes, T, rng))
    if ctx.family == "dmin" and ctx.target is not None:
        from .dmin import sample_target
        pooled = feats.reshape(-1, feats.shape[-1])
        if pooled.shape[0] > settings.max_samples:
            pooled = pooled[rng.choice(pooled.shape[0], settings.max_samples, replace=False)]
        tgt = sample_target(ctx.target, settings.max_samples, rng)
        report.add("energy_distance", energy_distance(pooled, tgt))
    return report.check_finite()
