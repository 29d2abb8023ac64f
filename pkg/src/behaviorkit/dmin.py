"""Divergence-minimization reward synthesis.

A binary discriminator ``D(o) = sigmoid(logit(o))`` separates target
feature samples (label 1) from policy features (label 0). Its clamped
logit is turned into a reward by one of the transforms

    GAIL    log D
    GAIL2   -log(1 - D)
    AIRL    logit = log D - log(1 - D)
    MLE     log rho_target(o)      (no discriminator)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .envcore import FeatureExtractor
from .neural import AdamState, MlpParams, adam_init, adam_step, init_mlp, mlp_forward

TRANSFORMS = ("GAIL", "GAIL2", "AIRL", "MLE")
LOGIT_CLAMP = 10.0
DEFAULT_OFFSETS = {"GAIL": 10.0, "AIRL": 10.0, "GAIL2": 0.0}


@dataclass(frozen=True)
class TargetDistribution:
    """Mixture of isotropic Gaussians with a shared standard deviation."""

    weights: tuple
    means: tuple
    std: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        if w.ndim != 1 or w.size < 1 or mu.ndim != 2 or mu.shape[0] != w.size:
            raise ValueError("need K >= 1 weights and a (K, d) array of means")
        if np.any(w < 0) or not math.isclose(float(w.sum()), 1.0, rel_tol=1e-9, abs_tol=1e-9):
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if not self.std > 0:
            raise ValueError("std must be > 0")
        object.__setattr__(self, "weights", tuple(float(x) for x in w))
        object.__setattr__(self, "means", tuple(tuple(float(x) for x in row) for row in mu))

    @property
    def dim(self) -> int:
        return len(self.means[0])

    @classmethod
    def bimodal(cls, separation: float = 2.0, std: float = 0.5, dim: int = 2):
        means = np.zeros((2, dim))
        means[0, 0], means[1, 0] = -separation, separation
        return cls((0.5, 0.5), means, std)

    def to_dict(self) -> dict:
        return {"weights": list(self.weights), "means": [list(m) for m in self.means], "std": self.std}


def sample_target(target: TargetDistribution, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. mixture draws: pick a component by weight, then a Gaussian draw."""
    if n < 1:
        raise ValueError("n must be >= 1")
    comp = rng.choice(len(target.weights), size=n, p=np.asarray(target.weights))
    means = np.asarray(target.means)[comp]
    return means + target.std * rng.standard_normal((n, target.dim))


def target_logdensity(target: TargetDistribution, x) -> np.ndarray:
    """``log sum_k w_k N(x; mu_k, std^2 I)``, stable in the far tails."""
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(target.means)
    d = target.dim
    sq = np.sum((x[..., None, :] - mu) ** 2, axis=-1)
    with np.errstate(divide="ignore"):
        logw = np.log(np.asarray(target.weights))
    comp = logw - sq / (2.0 * target.std ** 2) - 0.5 * d * math.log(2.0 * math.pi * target.std ** 2)
    m = np.max(comp, axis=-1, keepdims=True)
    return (m + np.log(np.sum(np.exp(comp - m), axis=-1, keepdims=True)))[..., 0]


def _softplus(x):
    return np.logaddexp(0.0, x)


def dmin_reward(transform: str, logit=None, target_logdensity_at_s=None, offset: float = 0.0):
    """Reward for a batch of clamped logits (or target log-densities for MLE)."""
    if transform == "MLE":
        if target_logdensity_at_s is None:
            raise ValueError("MLE needs the target log-density at the visited features")
        return np.asarray(target_logdensity_at_s, dtype=np.float64) + offset
    if transform not in TRANSFORMS:
        raise ValueError(f"unknown transform {transform!r}")
    l = np.clip(np.asarray(logit, dtype=np.float64), -LOGIT_CLAMP, LOGIT_CLAMP)
    if transform == "GAIL":
        r = -_softplus(-l)
    elif transform == "GAIL2":
        r = _softplus(l)
    else:
        r = l
    return r + offset


@dataclass
class BinaryDiscriminator:
    params: MlpParams
    gradient_penalty_weight: float = 0.0
    opt: Optional[AdamState] = None

    @classmethod
    def create(cls, in_dim: int, rng: np.random.Generator, hidden=(32, 32),
               gradient_penalty_weight: float = 0.0, dtype=np.float64):
        params = init_mlp([in_dim, *hidden, 1], rng, dtype=dtype)
        return cls(params, gradient_penalty_weight, adam_init(params.arrays()))

    def logits(self, x) -> np.ndarray:
        return mlp_forward(self.params, x)[..., 0].astype(np.float64)


def _swish_parts(z):
    s = 0.5 * (1.0 + np.tanh(0.5 * z))
    h = z * s
    d1 = s + h * (1.0 - s)
    d2 = s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s))
    return h, d1, d2


def input_gradient_penalty(params: MlpParams, x):
    """``mean_n ||d logit / d x_n||^2`` and its exact gradient w.r.t. the parameters.

    The logit network is a swish MLP with a scalar linear output. The
    penalty gradient differentiates through the input-gradient pass
    (double backprop), written out layer by layer.
    """
    if params.activation != "swish":
        raise ValueError("gradient penalty is implemented for swish networks")
    W = [w.astype(np.float64) for w in params.weights]
    b = [v.astype(np.float64) for v in params.biases]
    L = len(W)
    n = x.shape[0]
    hs, d1s, d2s = [np.asarray(x, dtype=np.float64)], [None], [None]
    for i in range(L - 1):
        z = hs[-1] @ W[i] + b[i]
        h, d1, d2 = _swish_parts(z)
        hs.append(h)
        d1s.append(d1)
        d2s.append(d2)
    # input-gradient pass: delta_L = 1, a_{i-1} = delta_i W_i^T, delta_i = a_i * phi'(z_i)
    deltas = [None] * (L + 1)
    a = [None] * L
    deltas[L] = np.ones((n, 1))
    for i in range(L, 0, -1):
        a[i - 1] = deltas[i] @ W[i - 1].T
        if i - 1 >= 1:
            deltas[i - 1] = a[i - 1] * d1s[i - 1]
    gx = a[0]
    penalty = float(np.mean(np.sum(gx * gx, axis=1)))

    gW = [np.zeros_like(w) for w in W]
    gb = [np.zeros_like(v) for v in b]
    zbar = [None] + [np.zeros_like(hs[i]) for i in range(1, L)]
    abar = 2.0 * gx / n
    for i in range(1, L + 1):
        gW[i - 1] += abar.T @ deltas[i]
        if i == L:
            break
        dbar = abar @ W[i - 1]
        abar = dbar * d1s[i]
        zbar[i] += dbar * a[i] * d2s[i]
    for i in range(L - 1, 0, -1):
        gW[i - 1] += hs[i - 1].T @ zbar[i]
        gb[i - 1] += zbar[i].sum(axis=0)
        if i > 1:
            zbar[i - 1] += (zbar[i] @ W[i - 1].T) * d1s[i - 1]
    grads = []
    for w, v in zip(gW, gb):
        grads += [w, v]
    return penalty, grads


def discriminator_loss_grad(disc: BinaryDiscriminator, policy_x, target_x, rng=None):
    """Cross-entropy (target = 1, policy = 0) plus optional gradient penalty.

    The loss is ``mean(-log D(target)) + mean(-log(1 - D(policy)))`` so a
    discriminator outputting 1/2 everywhere scores ``log 4``.
    """
    from .neural import mlp_grad

    dtype = disc.params.weights[0].dtype
    px = np.asarray(policy_x, dtype=dtype)
    tx = np.asarray(target_x, dtype=dtype)
    if px.shape[0] == 0 or tx.shape[0] == 0:
        raise ValueError("policy and target batches must be non-empty")
    lt = mlp_forward(disc.params, tx)[:, 0].astype(np.float64)
    lp = mlp_forward(disc.params, px)[:, 0].astype(np.float64)
    bce = float(np.mean(_softplus(-lt)) + np.mean(_softplus(lp)))
    # d softplus(-l)/dl = -sigmoid(-l); d softplus(l)/dl = sigmoid(l)
    up_t = (-0.5 * (1.0 - np.tanh(0.5 * lt)) / lt.shape[0])[:, None].astype(dtype)
    up_p = (0.5 * (1.0 + np.tanh(0.5 * lp)) / lp.shape[0])[:, None].astype(dtype)
    gt, _ = mlp_grad(disc.params, tx, up_t)
    gp_, _ = mlp_grad(disc.params, px, up_p)
    grads = [a.astype(np.float64) + c.astype(np.float64) for a, c in zip(gt, gp_)]
    penalty = 0.0
    if disc.gradient_penalty_weight > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        m = min(px.shape[0], tx.shape[0])
        alpha = rng.uniform(size=(m, 1))
        mix = alpha * tx[:m].astype(np.float64) + (1.0 - alpha) * px[:m].astype(np.float64)
        penalty, pgrads = input_gradient_penalty(disc.params, mix)
        grads = [g + disc.gradient_penalty_weight * pg for g, pg in zip(grads, pgrads)]
    loss = bce + disc.gradient_penalty_weight * penalty
    return loss, [g.astype(dtype) for g in grads], {"bce": bce, "gradient_penalty": penalty}


def train_discriminator(disc: BinaryDiscriminator, policy_x, target_x, lr: float, rng=None):
    """One Adam step on the discriminator loss. Returns ``(new_disc, loss)``."""
    loss, grads, _ = discriminator_loss_grad(disc, policy_x, target_x, rng)
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite discriminator loss")
    opt = disc.opt or adam_init(disc.params.arrays())
    new_arrays, opt = adam_step(disc.params.arrays(), grads, opt, lr)
    return BinaryDiscriminator(disc.params.with_arrays(new_arrays), disc.gradient_penalty_weight, opt), loss


def arena_min_logdensity(target: TargetDistribution, half_width: float = 5.0, n: int = 101) -> float:
    """Minimum target log-density over a regular grid covering the arena."""
    if target.dim != 2:
        corners = np.array(np.meshgrid(*[[-half_width, half_width]] * target.dim)).reshape(target.dim, -1).T
        return float(np.min(target_logdensity(target, corners)))
    g = np.linspace(-half_width, half_width, n)
    xx, yy = np.meshgrid(g, g)
    return float(np.min(target_logdensity(target, np.stack([xx.ravel(), yy.ravel()], axis=1))))


@dataclass
class DminConfig:
    transform: str = "GAIL"
    offset: Optional[float] = None
    obs_indices: Optional[tuple] = None
    target: dict = field(default_factory=lambda: {"weights": [0.5, 0.5],
                                                   "means": [[-2.0, 0.0], [2.0, 0.0]],
                                                   "std": 0.5, "space": "pos"})
    gradient_penalty_weight: float = 0.0
    env_reward_multiplier: float = 0.0
    hidden: tuple = (32, 32)
    lr: float = 1e-3
    minibatch_size: int = 512
    epochs: int = 1
    arena_half_width: float = 5.0

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ValueError(f"transform must be one of {TRANSFORMS}")
        if self.gradient_penalty_weight < 0:
            raise ValueError("gradient_penalty_weight must be >= 0")
        self.hidden = tuple(self.hidden)
        if self.obs_indices is not None:
            self.obs_indices = tuple(self.obs_indices)

    def target_distribution(self) -> TargetDistribution:
        t = self.target
        return TargetDistribution(tuple(t["weights"]), tuple(map(tuple, t["means"])), float(t["std"]))

    def resolved_offset(self) -> float:
        if self.offset is not None:
            return float(self.offset)
        if self.transform == "MLE":
            return -arena_min_logdensity(self.target_distribution(), self.arena_half_width)
        return DEFAULT_OFFSETS[self.transform]


class DminRewarder:
    """Discriminator (unless MLE) plus target, exposing the rollout reward callable."""

    def __init__(self, config: DminConfig, obs_dim: int, rng: np.random.Generator,
                 fx: Optional[FeatureExtractor] = None):
        self.config = config
        self.target = config.target_distribution()
        if fx is None:
            if config.obs_indices is None:
                raise ValueError("dmin needs obs_indices selecting the matched features")
            fx = FeatureExtractor(config.obs_indices)
        self.fx = fx.check(obs_dim)
        if self.fx.dim != self.target.dim:
            raise ValueError(f"target dim {self.target.dim} != feature dim {self.fx.dim}")
        self.disc = None
        if config.transform != "MLE":
            self.disc = BinaryDiscriminator.create(self.fx.dim, rng, config.hidden,
                                                   config.gradient_penalty_weight, dtype=np.float32)
        self.offset = config.resolved_offset()

    def reward(self, features) -> np.ndarray:
        if self.config.transform == "MLE":
            return dmin_reward("MLE", None, target_logdensity(self.target, features), self.offset)
        return dmin_reward(self.config.transform, self.disc.logits(features), None, self.offset)

    def __call__(self, features, z, env_reward):
        return self.reward(features) + self.config.env_reward_multiplier * np.asarray(env_reward)

    def update(self, features, rng: np.random.Generator) -> dict:
        if self.disc is None:
            return {}
        n = features.shape[0]
        mb = min(self.config.minibatch_size, n)
        losses = []
        for _ in range(self.config.epochs):
            perm = rng.permutation(n)
            for start in range(0, n - mb + 1, mb):
                idx = perm[start:start + mb]
                tgt = sample_target(self.target, mb, rng)
                self.disc, loss = train_discriminator(self.disc, features[idx], tgt, self.config.lr, rng)
                losses.append(loss)
        return {"discriminator_loss": float(np.mean(losses))}
