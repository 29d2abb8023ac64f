"""Mutual-information reward synthesis (GCRL, DIAYN, cDIAYN, DIAYN_FULL).

The training reward for a skill ``z`` and features ``o`` of the reached
state is the per-sample variational bound

    log q(z | o) - log p(z) + offset

optionally plus ``env_reward_multiplier * env_reward``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .envcore import FeatureExtractor
from .neural import (AdamState, MlpParams, SpectralNormMlp, adam_init, adam_step, init_mlp,
                     mlp_forward, mlp_grad, power_iteration)

LOG_2PI = math.log(2.0 * math.pi)
ALGORITHMS = ("GCRL", "DIAYN", "cDIAYN", "DIAYN_FULL")


@dataclass(frozen=True)
class SkillPrior:
    """Uniform categorical over ``num_skills`` or standard normal of dimension ``z_dim``."""

    kind: str
    num_skills: int = 0
    z_dim: int = 0

    def __post_init__(self):
        if self.kind == "categorical" and self.num_skills < 2:
            raise ValueError("categorical prior needs num_skills >= 2")
        if self.kind == "gaussian" and self.z_dim < 1:
            raise ValueError("gaussian prior needs z_dim >= 1")
        if self.kind not in ("categorical", "gaussian"):
            raise ValueError(f"unknown prior kind {self.kind!r}")

    @classmethod
    def categorical(cls, n: int) -> "SkillPrior":
        return cls("categorical", num_skills=n)

    @classmethod
    def gaussian(cls, d: int) -> "SkillPrior":
        return cls("gaussian", z_dim=d)

    @property
    def discrete(self) -> bool:
        return self.kind == "categorical"

    @property
    def z_shape(self) -> tuple:
        return () if self.discrete else (self.z_dim,)

    @property
    def encoding_dim(self) -> int:
        return self.num_skills if self.discrete else self.z_dim

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.discrete:
            return rng.integers(0, self.num_skills, size=n)
        return rng.standard_normal((n, self.z_dim))

    def encode(self, z) -> np.ndarray:
        """Policy-side skill encoding: one-hot for categorical, the raw vector otherwise."""
        if self.discrete:
            z = np.asarray(z, dtype=np.int64).reshape(-1)
            return np.eye(self.num_skills)[z]
        return np.asarray(z, dtype=np.float64).reshape(-1, self.z_dim)

    def log_prob(self, z) -> np.ndarray:
        if self.discrete:
            z = np.asarray(z)
            return np.full(z.shape, -math.log(self.num_skills))
        z = np.asarray(z, dtype=np.float64)
        return -0.5 * np.sum(z * z, axis=-1) - 0.5 * self.z_dim * LOG_2PI


def sample_skill(prior: SkillPrior, rng: np.random.Generator, n: Optional[int] = None):
    """One skill (``n=None``) or an array of ``n`` skills."""
    if n is None:
        z = prior.sample(rng, 1)[0]
        return int(z) if prior.discrete else z
    return prior.sample(rng, n)


@dataclass(frozen=True)
class FixedPosterior:
    """GCRL posterior ``q(z|o) = Normal(o, sigma^2 I)``."""

    sigma: float = 0.25

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")

    def log_q(self, o, z) -> np.ndarray:
        o = np.asarray(o, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        if o.shape[-1] != z.shape[-1]:
            raise ValueError(f"skill dim {z.shape[-1]} != feature dim {o.shape[-1]}")
        d = o.shape[-1]
        sq = np.sum((z - o) ** 2, axis=-1)
        return -sq / (2.0 * self.sigma ** 2) - 0.5 * d * math.log(2.0 * math.pi * self.sigma ** 2)

    def infer(self, o) -> np.ndarray:
        return np.asarray(o, dtype=np.float64)


@dataclass
class LearnedPosterior:
    """MLP posterior: categorical logits over skills, or a unit-variance Gaussian mean.

    With ``spectral_norm`` every weight matrix is divided by its power-iteration
    spectral norm estimate at forward time; ``u`` holds the persistent vectors.
    """

    params: MlpParams
    output: str                       # "categorical" | "gaussian"
    spectral_norm: bool = True
    u: list = field(default_factory=list)
    opt: Optional[AdamState] = None

    @classmethod
    def create(cls, in_dim: int, prior: SkillPrior, rng: np.random.Generator,
               hidden=(32, 32), spectral_norm: bool = True, dtype=np.float64):
        out = prior.num_skills if prior.discrete else prior.z_dim
        params = init_mlp([in_dim, *hidden, out], rng, dtype=dtype)
        head = cls(params, "categorical" if prior.discrete else "gaussian", spectral_norm)
        if spectral_norm:
            head.u = SpectralNormMlp.create(params, rng).u
        head.opt = adam_init(params.arrays())
        return head

    def _sn(self) -> SpectralNormMlp:
        return SpectralNormMlp(self.params, self.u)

    def effective(self) -> MlpParams:
        return self._sn().effective() if self.spectral_norm else self.params

    def outputs(self, o) -> np.ndarray:
        return mlp_forward(self.effective(), o).astype(np.float64)

    def log_q(self, o, z) -> np.ndarray:
        out = self.outputs(o)
        if self.output == "categorical":
            z = np.asarray(z, dtype=np.int64)
            if np.any((z < 0) | (z >= out.shape[-1])):
                raise ValueError("skill index out of range for posterior head")
            logp = out - _logsumexp(out)
            return np.take_along_axis(logp, z[..., None], axis=-1)[..., 0]
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != out.shape[-1]:
            raise ValueError(f"skill dim {z.shape[-1]} != posterior output dim {out.shape[-1]}")
        d = out.shape[-1]
        return -0.5 * np.sum((z - out) ** 2, axis=-1) - 0.5 * d * LOG_2PI

    def infer(self, o) -> np.ndarray:
        """Deterministic read of the posterior: argmax skill or Gaussian mean."""
        out = self.outputs(o)
        if self.output == "categorical":
            return np.argmax(out, axis=-1)
        return out

    def sigmas(self) -> list[float]:
        """Fresh power-iteration spectral norms of the weights actually used at forward time."""
        return [spectral_norm_estimate(w) for w in self.effective().weights]


def spectral_norm_estimate(w, iters: int = 50) -> float:
    rng = np.random.default_rng(0)
    u = rng.normal(size=w.shape[0])
    return power_iteration(w, u / np.linalg.norm(u), iters)[0]


def _logsumexp(x):
    m = np.max(x, axis=-1, keepdims=True)
    return m + np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True))


def mimax_reward(head, prior: SkillPrior, o_s, z, offset: float = 0.0) -> np.ndarray:
    """``log q(z|o_s) - log p(z) + offset`` elementwise over a batch."""
    return head.log_q(o_s, z) - prior.log_prob(z) + offset


def posterior_loss_grad(head: LearnedPosterior, o, z):
    """Mean negative log-likelihood of ``z`` under the head and its parameter gradients."""
    o = np.asarray(o, dtype=head.params.weights[0].dtype)
    n = o.shape[0]
    out = mlp_forward(head.effective(), o).astype(np.float64)
    if head.output == "categorical":
        z = np.asarray(z, dtype=np.int64)
        logp = out - _logsumexp(out)
        loss = -float(np.mean(logp[np.arange(n), z]))
        upstream = np.exp(logp)
        upstream[np.arange(n), z] -= 1.0
    else:
        z = np.asarray(z, dtype=np.float64)
        d = out.shape[-1]
        loss = float(np.mean(0.5 * np.sum((z - out) ** 2, axis=-1) + 0.5 * d * LOG_2PI))
        upstream = out - z
    upstream = (upstream / n).astype(head.params.weights[0].dtype)
    if head.spectral_norm:
        grads, _ = head._sn().grad(o, upstream)
    else:
        grads, _ = mlp_grad(head.params, o, upstream)
    return loss, grads


def train_posterior(head, o, z, lr: float):
    """One Adam step on ``-mean log q(z|o)``. Returns ``(new_head, loss)``."""
    if not isinstance(head, LearnedPosterior):
        raise TypeError("train_posterior needs a learned posterior head; the GCRL posterior is fixed")
    loss, grads = posterior_loss_grad(head, o, z)
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite posterior loss")
    opt = head.opt or adam_init(head.params.arrays())
    new_arrays, opt = adam_step(head.params.arrays(), grads, opt, lr)
    params = head.params.with_arrays(new_arrays)
    u = head.u
    if head.spectral_norm:
        u = SpectralNormMlp(params, head.u).refresh(exact=True).u
    return LearnedPosterior(params, head.output, head.spectral_norm, u, opt), loss


@dataclass
class MimaxConfig:
    algorithm: str = "DIAYN"
    num_skills: int = 8
    z_dim: int = 2
    sigma: float = 0.25
    offset: Optional[float] = None
    spectral_norm: bool = True
    obs_indices: Optional[tuple] = None
    env_reward_multiplier: float = 0.0
    hidden: tuple = (32, 32)
    lr: float = 1e-3
    minibatch_size: int = 512
    epochs: int = 1

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.env_reward_multiplier < 0:
            raise ValueError("env_reward_multiplier must be >= 0")
        if self.offset is not None and self.offset < 0:
            raise ValueError("offset must be >= 0")
        self.hidden = tuple(self.hidden)
        if self.obs_indices is not None:
            self.obs_indices = tuple(self.obs_indices)

    @property
    def prior(self) -> SkillPrior:
        if self.algorithm in ("DIAYN", "DIAYN_FULL"):
            return SkillPrior.categorical(self.num_skills)
        return SkillPrior.gaussian(self.z_dim)

    def feature_extractor(self, obs_dim: int) -> FeatureExtractor:
        if self.algorithm == "DIAYN_FULL" or self.obs_indices is None:
            return FeatureExtractor(tuple(range(obs_dim))).check(obs_dim)
        return FeatureExtractor(self.obs_indices).check(obs_dim)

    def resolved_offset(self, feature_dim: int) -> float:
        """Explicit offset, else the default that keeps uninformative rewards non-negative."""
        if self.offset is not None:
            return float(self.offset)
        if self.algorithm in ("DIAYN", "DIAYN_FULL"):
            return 0.0
        d = self.z_dim
        var = self.sigma ** 2 if self.algorithm == "GCRL" else 1.0
        return 0.5 * d * math.log(2.0 * math.pi * var) + 2.0


class MimaxRewarder:
    """Holds the posterior head and turns (features, skill, env reward) into training rewards."""

    def __init__(self, config: MimaxConfig, obs_dim: int, rng: np.random.Generator):
        self.config = config
        self.prior = config.prior
        self.fx = config.feature_extractor(obs_dim)
        if config.algorithm == "GCRL":
            if self.fx.dim != config.z_dim:
                raise ValueError(f"GCRL needs z_dim ({config.z_dim}) == feature dim ({self.fx.dim})")
            self.head = FixedPosterior(config.sigma)
        else:
            self.head = LearnedPosterior.create(self.fx.dim, self.prior, rng, config.hidden,
                                                config.spectral_norm, dtype=np.float32)
        self.offset = config.resolved_offset(self.fx.dim)

    def synthesize(self, env_reward, o_s, z) -> np.ndarray:
        r = mimax_reward(self.head, self.prior, o_s, z, self.offset)
        return r + self.config.env_reward_multiplier * np.asarray(env_reward, dtype=np.float64)

    def __call__(self, features, z, env_reward):
        return self.synthesize(env_reward, features, z)

    def infer(self, o) -> np.ndarray:
        return self.head.infer(o)

    def update(self, features, z, rng: np.random.Generator) -> dict:
        """Posterior training phase on one rollout batch's (features, skill) pairs."""
        if isinstance(self.head, FixedPosterior):
            return {}
        n = features.shape[0]
        mb = min(self.config.minibatch_size, n)
        losses = []
        for _ in range(self.config.epochs):
            perm = rng.permutation(n)
            for start in range(0, n - mb + 1, mb):
                idx = perm[start:start + mb]
                self.head, loss = train_posterior(self.head, features[idx], z[idx], self.config.lr)
                losses.append(loss)
        return {"posterior_loss": float(np.mean(losses))}


def synthesize(config: MimaxConfig, head, prior: SkillPrior, env_reward, o_s, z,
               offset: Optional[float] = None):
    """Functional form of :meth:`MimaxRewarder.synthesize`."""
    if offset is None:
        offset = config.resolved_offset(np.shape(o_s)[-1])
    r = mimax_reward(head, prior, o_s, z, offset)
    return r + config.env_reward_multiplier * np.asarray(env_reward, dtype=np.float64)
