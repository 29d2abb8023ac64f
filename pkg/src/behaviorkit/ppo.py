"""Clipped-surrogate PPO with GAE over lockstep environment batches.

Every reward family trains through this module: the rollout takes a
``reward_synth(features, z, env_reward) -> reward`` callable and stores
the synthesized reward next to the raw environment reward and score.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import kernels
from .envcore import Environment, FeatureExtractor
from .neural import (AdamState, MlpParams, adam_init, adam_step, clip_by_global_norm,
                     init_mlp, mlp_backward, mlp_forward, mlp_forward_cached)

LOG_2PI = math.log(2.0 * math.pi)
NORM_CLIP = 10.0  # standardized inputs are clipped to this magnitude

RewardSynth = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def identity_reward(features, z, env_reward):
    return np.asarray(env_reward, dtype=np.float64)


@dataclass
class PpoConfig:
    num_envs: int = 64
    unroll_length: int = 128
    total_steps: int = 200_000
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 4
    minibatch_size: int = 512
    lr: float = 3e-4
    anneal_lr: bool = False           # decay lr linearly to 0 over total_steps
    entropy_coef: float = 1e-2
    max_grad_norm: float = 0.5
    reward_scaling: float = 1.0
    init_log_std: float = 0.0
    normalize_observations: bool = False
    policy_hidden: tuple = (32, 32, 32, 32)
    value_hidden: tuple = (256, 256, 256, 256, 256)
    dtype: str = "float32"

    def __post_init__(self):
        self.policy_hidden = tuple(self.policy_hidden)
        self.value_hidden = tuple(self.value_hidden)
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.gae_lambda <= 1.0):
            raise ValueError("gamma and gae_lambda must lie in (0, 1]")
        if self.clip_eps < 0:
            raise ValueError("clip_eps must be >= 0")
        if self.num_envs < 1 or self.unroll_length < 1 or self.minibatch_size < 1:
            raise ValueError("num_envs, unroll_length and minibatch_size must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "PpoConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ppo keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def steps_per_batch(self) -> int:
        return self.num_envs * self.unroll_length


@dataclass(frozen=True)
class RunningNorm:
    """Running per-dimension mean and variance of network inputs.

    An empty normalizer (``count == 0``) is the identity map.
    """

    count: float
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def create(cls, dim: int) -> "RunningNorm":
        return cls(0.0, np.zeros(dim), np.ones(dim))

    def update(self, x) -> "RunningNorm":
        """Merge a batch of rows into the statistics (parallel-variance formula)."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.mean.shape[0])
        n = x.shape[0]
        if n == 0:
            return self
        b_mean = x.mean(axis=0)
        b_var = x.var(axis=0)
        if self.count == 0:
            return RunningNorm(float(n), b_mean, b_var)
        total = self.count + n
        delta = b_mean - self.mean
        m2 = self.var * self.count + b_var * n + delta ** 2 * self.count * n / total
        return RunningNorm(total, self.mean + delta * n / total, m2 / total)

    def apply(self, x, dtype=None):
        if self.count == 0:
            out = np.asarray(x)
        else:
            out = np.clip((np.asarray(x, dtype=np.float64) - self.mean) / np.sqrt(self.var + 1e-8),
                          -NORM_CLIP, NORM_CLIP)
        return out.astype(dtype) if dtype is not None else out


@dataclass
class GaussianPolicy:
    """Diagonal Gaussian with an MLP mean and a state-independent log-std.

    With ``norm`` set, inputs are standardized before the MLP; the value
    network shares the same normalizer through :meth:`inputs`.
    """

    net: MlpParams
    log_std: np.ndarray
    norm: Optional[RunningNorm] = None

    @classmethod
    def create(cls, obs_dim, action_dim, hidden, rng, init_log_std=0.0, dtype=np.float32,
               normalize: bool = False):
        net = init_mlp([obs_dim, *hidden, action_dim], rng, dtype=dtype, output_scale=0.01)
        norm = RunningNorm.create(obs_dim) if normalize else None
        return cls(net, np.full(action_dim, init_log_std, dtype=dtype), norm)

    def inputs(self, obs) -> np.ndarray:
        """Network input for raw policy observations."""
        if self.norm is None:
            return obs
        return self.norm.apply(obs, self.net.weights[0].dtype)

    def mean(self, obs) -> np.ndarray:
        return mlp_forward(self.net, self.inputs(obs))

    def sample(self, obs, rng: np.random.Generator):
        mu = self.mean(obs).astype(np.float64)
        std = np.exp(self.log_std.astype(np.float64))
        eps = rng.standard_normal(mu.shape)
        action = mu + std * eps
        logp = -0.5 * np.sum(eps * eps, axis=-1) - np.sum(np.log(std)) - 0.5 * mu.shape[-1] * LOG_2PI
        return action, logp

    def log_prob(self, obs, actions) -> np.ndarray:
        mu = self.mean(obs).astype(np.float64)
        return gaussian_log_prob(mu, self.log_std.astype(np.float64), actions)

    def entropy(self) -> float:
        ls = self.log_std.astype(np.float64)
        return float(np.sum(ls) + 0.5 * ls.shape[0] * (1.0 + LOG_2PI))

    def act(self, obs, rng=None, deterministic=False) -> np.ndarray:
        """Environment action: sampled (or mean) then clipped to [-1, 1]."""
        if deterministic or rng is None:
            a = self.mean(obs).astype(np.float64)
        else:
            a = self.sample(obs, rng)[0]
        return np.clip(a, -1.0, 1.0)

    def arrays(self):
        return self.net.arrays() + [self.log_std]

    def with_arrays(self, arrays):
        return GaussianPolicy(self.net.with_arrays(arrays[:-1]), arrays[-1], self.norm)


def gaussian_log_prob(mu, log_std, actions):
    std = np.exp(log_std)
    z = (np.asarray(actions, dtype=np.float64) - mu) / std
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * mu.shape[-1] * LOG_2PI


@dataclass
class RolloutBatch:
    """Arrays shaped ``(T, num_envs, ...)``."""

    obs: np.ndarray            # policy input, skill encoding appended
    env_obs: np.ndarray
    features: np.ndarray       # o(s') of the state reached by each action
    actions: np.ndarray        # raw Gaussian samples (pre-clip)
    log_probs: np.ndarray
    env_rewards: np.ndarray
    scores: np.ndarray
    rewards: np.ndarray        # synthesized training reward
    values: np.ndarray
    dones: np.ndarray
    z: np.ndarray
    last_values: np.ndarray    # (num_envs,) bootstrap values
    episodes: list = field(default_factory=list)  # (episode_reward, episode_score) of finished episodes

    @property
    def num_steps(self) -> int:
        return self.rewards.size


class SkillSource:
    """What the rollout needs from a skill prior: sampling and policy encoding."""

    encoding_dim = 0
    z_shape: tuple = ()

    def sample(self, rng, n):
        return np.zeros((n, *self.z_shape))

    def encode(self, z):
        return np.zeros((len(z), 0))


@dataclass
class EnvCarry:
    """Environment-side state that persists across rollouts."""

    env_state: object
    obs: np.ndarray
    z: np.ndarray
    ep_reward: np.ndarray
    ep_score: np.ndarray


def start_envs(env: Environment, num_envs: int, rng: np.random.Generator,
               skills: Optional[SkillSource] = None) -> EnvCarry:
    skills = skills or SkillSource()
    seeds = rng.integers(0, 2**31 - 1, size=num_envs)
    state = env.reset(seeds)
    return EnvCarry(state, env.observe(state), skills.sample(rng, num_envs),
                    np.zeros(num_envs), np.zeros(num_envs))


def policy_input(obs, z, skills: SkillSource):
    enc = skills.encode(z)
    if enc.shape[-1] == 0:
        return obs
    return np.concatenate([obs, enc], axis=-1)


def rollout(policy: GaussianPolicy, value_fn: MlpParams, reward_synth: RewardSynth,
            env: Environment, carry: EnvCarry, T: int, rng: np.random.Generator,
            fx: Optional[FeatureExtractor] = None, skills: Optional[SkillSource] = None):
    """Step ``carry``'s environments ``T`` times in lockstep.

    Finished episodes are reset in place with fresh seeds and skills drawn
    from ``rng``. Returns ``(batch, new_carry)``.
    """
    skills = skills or SkillSource()
    E = carry.obs.shape[0]
    state, obs, z = carry.env_state, carry.obs, carry.z
    ep_r, ep_s = carry.ep_reward.copy(), carry.ep_score.copy()
    buf = {k: [] for k in ("obs", "env_obs", "next_obs", "actions", "log_probs", "env_rewards",
                           "scores", "dones", "z")}
    episodes = []
    for _ in range(T):
        pin = policy_input(obs, z, skills)
        raw, logp = policy.sample(pin, rng)
        state, res = env.step(state, np.clip(raw, -1.0, 1.0))
        ep_r += res.reward
        ep_s += res.score
        buf["obs"].append(pin)
        buf["env_obs"].append(obs)
        buf["next_obs"].append(res.observation)
        buf["actions"].append(raw)
        buf["log_probs"].append(logp)
        buf["env_rewards"].append(res.reward)
        buf["scores"].append(res.score)
        buf["dones"].append(res.done.astype(np.float64))
        buf["z"].append(z)
        obs = res.observation
        if res.done.any():
            idx = np.flatnonzero(res.done)
            for i in idx:
                episodes.append((float(ep_r[i]), float(ep_s[i])))
            ep_r[idx] = 0.0
            ep_s[idx] = 0.0
            fresh = env.reset(rng.integers(0, 2**31 - 1, size=idx.size))
            pos = state.position.copy()
            vel = state.velocity.copy()
            steps = np.array(state.step_index, copy=True)
            seeds = np.array(state.rng_state, copy=True)
            pos[idx], vel[idx], steps[idx], seeds[idx] = (fresh.position, fresh.velocity,
                                                         fresh.step_index, fresh.rng_state)
            state = type(state)(pos, vel, steps, seeds, state.components)
            obs = obs.copy()
            obs[idx] = env.observe(fresh)
            z = z.copy()
            z[idx] = skills.sample(rng, idx.size)

    arr = {k: np.stack(v) for k, v in buf.items()}
    flat = lambda a: a.reshape(T * E, *a.shape[2:])
    features = fx(arr["next_obs"]) if fx is not None else arr["next_obs"]
    rewards = np.asarray(reward_synth(flat(features), flat(arr["z"]), flat(arr["env_rewards"])),
                         dtype=np.float64).reshape(T, E)
    if not np.all(np.isfinite(rewards)):
        raise FloatingPointError("reward synthesis produced non-finite rewards")
    values = mlp_forward(value_fn, policy.inputs(flat(arr["obs"])))[:, 0].astype(np.float64).reshape(T, E)
    last_values = mlp_forward(value_fn, policy.inputs(policy_input(obs, z, skills)))[:, 0].astype(np.float64)
    batch = RolloutBatch(
        obs=arr["obs"], env_obs=arr["env_obs"], features=features, actions=arr["actions"],
        log_probs=arr["log_probs"], env_rewards=arr["env_rewards"], scores=arr["scores"],
        rewards=rewards, values=values, dones=arr["dones"], z=arr["z"],
        last_values=last_values, episodes=episodes,
    )
    return batch, EnvCarry(state, obs, z, ep_r, ep_s)


def gae(rewards, values, dones, last_values, gamma, lam):
    """Generalized advantage estimates and returns, arrays shaped ``(T, num_envs)``."""
    return kernels.gae(rewards, values, dones, last_values, gamma, lam)


def normalize_advantages(adv, floor: float = 1e-6):
    adv = np.asarray(adv, dtype=np.float64)
    return (adv - adv.mean()) / max(float(adv.std()), floor)


@dataclass
class PpoState:
    policy: GaussianPolicy
    value: MlpParams
    policy_opt: AdamState
    value_opt: AdamState

    @classmethod
    def create(cls, obs_dim: int, action_dim: int, config: PpoConfig, rng: np.random.Generator):
        dtype = np.dtype(config.dtype)
        policy = GaussianPolicy.create(obs_dim, action_dim, config.policy_hidden, rng,
                                       config.init_log_std, dtype, config.normalize_observations)
        value = init_mlp([obs_dim, *config.value_hidden, 1], rng, dtype=dtype)
        return cls(policy, value, adam_init(policy.arrays()), adam_init(value.arrays()))


class PpoDivergence(FloatingPointError):
    """A PPO loss became non-finite."""


def surrogate_terms(policy: GaussianPolicy, obs, actions, old_logp, adv, clip_eps):
    """Clipped surrogate objective and its gradient w.r.t. new log-probs.

    Returns ``(objective, dobj_dlogp, ratio, clipped_mask)``; the objective
    is the batch mean of ``min(r A, clip(r, 1-eps, 1+eps) A)``.
    """
    logp = policy.log_prob(obs, actions)
    ratio = np.exp(logp - old_logp)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    # ties go to the unclipped branch so eps = 0 recovers the vanilla gradient
    use_unclipped = unclipped <= clipped
    obj = np.where(use_unclipped, unclipped, clipped)
    n = adv.shape[0]
    dlogp = np.where(use_unclipped, adv * ratio, 0.0) / n
    return float(obj.mean()), dlogp, ratio, ~use_unclipped


def policy_loss_grad(policy: GaussianPolicy, obs, actions, old_logp, adv, clip_eps, entropy_coef):
    """Loss ``-(surrogate + entropy_coef * entropy)`` and its gradients (policy array layout)."""
    mu, cache = mlp_forward_cached(policy.net, policy.inputs(obs))
    mu = mu.astype(np.float64)
    log_std = policy.log_std.astype(np.float64)
    std = np.exp(log_std)
    actions = np.asarray(actions, dtype=np.float64)
    logp = gaussian_log_prob(mu, log_std, actions)
    ratio = np.exp(logp - old_logp)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    use_unclipped = unclipped <= clipped
    n = adv.shape[0]
    surrogate = float(np.where(use_unclipped, unclipped, clipped).mean())
    entropy = float(np.sum(log_std) + 0.5 * log_std.shape[0] * (1.0 + LOG_2PI))
    loss = -(surrogate + entropy_coef * entropy)

    dlogp = -np.where(use_unclipped, adv * ratio, 0.0) / n      # dloss/dlogp
    zs = (actions - mu) / std
    dmu = dlogp[:, None] * zs / std
    dlog_std = (dlogp[:, None] * (zs * zs - 1.0)).sum(axis=0) - entropy_coef
    dtype = policy.net.weights[0].dtype
    grads, _ = mlp_backward(policy.net, cache, dmu.astype(dtype))
    grads.append(dlog_std.astype(dtype))
    stats = {
        "surrogate": surrogate,
        "entropy": entropy,
        "approx_kl": float(np.mean((ratio - 1.0) - np.log(ratio))),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > clip_eps)),
    }
    return loss, grads, stats


def value_loss_grad(value: MlpParams, obs, returns):
    pred, cache = mlp_forward_cached(value, obs)
    err = pred[:, 0].astype(np.float64) - returns
    loss = 0.5 * float(np.mean(err * err))
    upstream = (err / err.shape[0])[:, None].astype(value.weights[0].dtype)
    grads, _ = mlp_backward(value, cache, upstream)
    return loss, grads


def ppo_update(state: PpoState, batch: RolloutBatch, advantages, returns, config: PpoConfig,
               rng: np.random.Generator, lr: Optional[float] = None):
    """Several epochs of minibatch PPO on one rollout batch.

    ``advantages`` must already be normalized. ``lr`` overrides ``config.lr``.
    Returns ``(new_state, stats)``.
    """
    lr = config.lr if lr is None else lr
    n = batch.rewards.size
    obs = batch.obs.reshape(n, -1)
    actions = batch.actions.reshape(n, -1)
    old_logp = batch.log_probs.reshape(n)
    adv = np.asarray(advantages, dtype=np.float64).reshape(n)
    ret = np.asarray(returns, dtype=np.float64).reshape(n)
    dtype = state.policy.net.weights[0].dtype
    obs = obs.astype(dtype)

    policy, value = state.policy, state.value
    popt, vopt = state.policy_opt, state.value_opt
    acc = {"policy_loss": [], "value_loss": [], "approx_kl": [], "clip_fraction": [], "entropy": []}
    mb = min(config.minibatch_size, n)
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n - mb + 1, mb):
            idx = perm[start:start + mb]
            ploss, pgrads, pst = policy_loss_grad(policy, obs[idx], actions[idx], old_logp[idx],
                                                  adv[idx], config.clip_eps, config.entropy_coef)
            vloss, vgrads = value_loss_grad(value, policy.inputs(obs[idx]), ret[idx])
            if not (math.isfinite(ploss) and math.isfinite(vloss)):
                raise PpoDivergence(
                    f"non-finite PPO loss (policy={ploss}, value={vloss}); "
                    f"|adv|max={np.abs(adv[idx]).max():.3g} |ret|max={np.abs(ret[idx]).max():.3g} "
                    f"log_std={policy.log_std.tolist()}"
                )
            pgrads, _ = clip_by_global_norm(pgrads, config.max_grad_norm)
            vgrads, _ = clip_by_global_norm(vgrads, config.max_grad_norm)
            new_p, popt = adam_step(policy.arrays(), pgrads, popt, lr)
            policy = policy.with_arrays(new_p)
            new_v, vopt = adam_step(value.arrays(), vgrads, vopt, lr)
            value = value.with_arrays(new_v)
            acc["policy_loss"].append(ploss)
            acc["value_loss"].append(vloss)
            acc["approx_kl"].append(pst["approx_kl"])
            acc["clip_fraction"].append(pst["clip_fraction"])
            acc["entropy"].append(pst["entropy"])
    stats = {k: float(np.mean(v)) for k, v in acc.items()}
    return PpoState(policy, value, popt, vopt), stats


def learning_rate(config: PpoConfig, progress: float) -> float:
    """PPO step size after a fraction ``progress`` of training."""
    if not config.anneal_lr:
        return config.lr
    return config.lr * max(0.0, 1.0 - progress)


def train_step(state: PpoState, batch: RolloutBatch, config: PpoConfig, rng, progress: float = 0.0):
    """GAE, advantage normalization and one :func:`ppo_update` on a fresh batch.

    ``progress`` is the fraction of training completed before this batch.

    The observation normalizer (if any) absorbs the batch after the update,
    so the log-probs stored during the rollout stay valid inside it.
    """
    scale = config.reward_scaling
    adv, ret = gae(batch.rewards * scale, batch.values, batch.dones, batch.last_values,
                   config.gamma, config.gae_lambda)
    state, stats = ppo_update(state, batch, normalize_advantages(adv), ret, config, rng,
                              learning_rate(config, progress))
    policy = state.policy
    if policy.norm is not None:
        policy = GaussianPolicy(policy.net, policy.log_std, policy.norm.update(batch.obs))
        state = PpoState(policy, state.value, state.policy_opt, state.value_opt)
    return state, stats
