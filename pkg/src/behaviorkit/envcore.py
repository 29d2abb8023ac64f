"""Compositional planar point-mass environments.

An environment is described by a nested dict (or JSON file) of
components, edges between components, observers and reward functions::

    {
      "components": {
        "agent1": {"component": "point_mass"},
        "cap1": {"component": "singleton", "pos": [1, 0],
                 "reward_fns": {"goal": {"reward_type": "root_goal",
                                         "sdcomp": "vel", "target_goal": [4, 0]}}}
      },
      "edges": {
        "agent1__cap1": {"extra_observers": [{"observer_type": "root_vec"}],
                          "reward_fns": {"dist": {"reward_type": "root_dist"}}}
      },
      "global": {"horizon": 100, "dt": 0.05, "env_reward_multiplier": 1.0}
    }

:func:`compose` turns a descriptor into an :class:`Environment` whose
``reset``/``step`` are pure functions over :class:`EnvState` values.
States may carry a leading batch axis; every method accepts both forms.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import kernels

DT = 0.05
MASS = 1.0
DRAG = 0.1
FORCE_CLIP = 1.0
CONTACT_STIFFNESS = 50.0
CONTACT_RADIUS = 0.5
RESET_NOISE = 0.1
DEFAULT_HORIZON = 100

ACTUATED_KINDS = {"point_mass", "pro_ant"}
PASSIVE_KINDS = {"singleton"}
OBSERVER_TYPES = {"root_vec"}
COMPONENT_REWARDS = {"root_goal"}
EDGE_REWARDS = {"root_dist"}


class DescriptorError(ValueError):
    """Raised for malformed environment descriptors."""


@dataclass(frozen=True)
class RewardTerm:
    channel: str
    reward_type: str
    components: tuple[str, ...]
    scale: float = 1.0
    sdcomp: str = "pos"
    target_goal: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class EnvState:
    """Positions and velocities of every component, sorted by name.

    ``position`` and ``velocity`` have shape ``(components, 2)`` or
    ``(batch, components, 2)``; ``step_index`` and ``rng_state`` are ints
    or int arrays of shape ``(batch,)`` accordingly.
    """

    position: np.ndarray
    velocity: np.ndarray
    step_index: Any
    rng_state: Any
    components: tuple[str, ...] = field(default=(), compare=False)

    @property
    def batched(self) -> bool:
        return self.position.ndim == 3

    def component(self, name: str) -> int:
        try:
            return self.components.index(name)
        except ValueError:
            raise KeyError(f"unknown component {name!r}") from None


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward: Any
    score: Any
    done: Any


@dataclass(frozen=True)
class FeatureExtractor:
    """Selects ``obs_indices`` from an observation vector, order preserved."""

    obs_indices: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "obs_indices", tuple(int(i) for i in self.obs_indices))
        if not self.obs_indices:
            raise ValueError("obs_indices must not be empty")

    @property
    def dim(self) -> int:
        return len(self.obs_indices)

    def check(self, obs_dim: int) -> "FeatureExtractor":
        bad = [i for i in self.obs_indices if not -obs_dim <= i < obs_dim]
        if bad:
            raise IndexError(f"obs_indices {bad} out of range for observation dim {obs_dim}")
        return self

    def __call__(self, obs):
        return extract_features(obs, self)


def extract_features(obs, fx: FeatureExtractor) -> np.ndarray:
    obs = np.asarray(obs)
    fx.check(obs.shape[-1])
    return obs[..., list(fx.obs_indices)]


def _vec2(value, what: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64).reshape(-1)
    # 3-vectors from 3D descriptors are accepted and projected onto the plane
    if arr.shape[0] not in (2, 3) or not np.all(np.isfinite(arr)):
        raise DescriptorError(f"{what} must be a finite 2- or 3-vector, got {value!r}")
    return arr[:2].copy()


def _parse_reward_fns(fns, owner: str, members: tuple[str, ...], allowed: set) -> list[RewardTerm]:
    terms = []
    if fns is None:
        return terms
    if not isinstance(fns, Mapping):
        raise DescriptorError(f"{owner}: reward_fns must be a mapping")
    for fn_name in sorted(fns):
        spec = fns[fn_name]
        rtype = spec.get("reward_type")
        if rtype not in allowed:
            raise DescriptorError(
                f"{owner}.{fn_name}: reward_type {rtype!r} not allowed here (expected one of {sorted(allowed)})"
            )
        sdcomp = spec.get("sdcomp", "pos")
        if sdcomp not in ("pos", "vel"):
            raise DescriptorError(f"{owner}.{fn_name}: sdcomp must be 'pos' or 'vel'")
        target = tuple(_vec2(spec.get("target_goal", (0.0, 0.0)), f"{owner}.{fn_name}.target_goal"))
        terms.append(
            RewardTerm(
                channel=f"{owner}.{fn_name}",
                reward_type=rtype,
                components=members,
                scale=float(spec.get("scale", 1.0)),
                sdcomp=sdcomp,
                target_goal=target,
            )
        )
    return terms


def reward_root_goal(state: EnvState, component: str, target_goal, sdcomp: str = "pos"):
    """Negative Euclidean distance of a component's position or velocity to a target."""
    if sdcomp not in ("pos", "vel"):
        raise ValueError("sdcomp must be 'pos' or 'vel'")
    idx = state.component(component)
    src = state.position if sdcomp == "pos" else state.velocity
    x = src[..., idx, :]
    return -np.linalg.norm(x - _vec2(target_goal, "target_goal"), axis=-1)


def reward_root_dist(state: EnvState, component_a: str, component_b: str):
    """Negative distance between two components' positions."""
    a = state.position[..., state.component(component_a), :]
    b = state.position[..., state.component(component_b), :]
    return -np.linalg.norm(a - b, axis=-1)


def _evaluate_term(term: RewardTerm, state: EnvState):
    if term.reward_type == "root_goal":
        return reward_root_goal(state, term.components[0], term.target_goal, term.sdcomp)
    return reward_root_dist(state, *term.components)


class Environment:
    """A composed environment. Build it with :func:`compose`."""

    def __init__(self, descriptor: Mapping):
        self.descriptor = descriptor
        comps = descriptor.get("components")
        if not isinstance(comps, Mapping) or not comps:
            raise DescriptorError("descriptor needs a non-empty 'components' mapping")
        self.component_names = tuple(sorted(comps))
        kinds, init_pos, radii, terms, score_terms = [], [], [], [], []
        for name in self.component_names:
            spec = comps[name]
            kind = spec.get("component", spec.get("component_kind"))
            if kind in ACTUATED_KINDS:
                radius = 0.0
            elif kind in PASSIVE_KINDS:
                radius = float(spec.get("component_params", {}).get("size", CONTACT_RADIUS))
            else:
                raise DescriptorError(f"component {name!r}: unknown component kind {kind!r}")
            kinds.append(kind)
            radii.append(radius)
            init_pos.append(_vec2(spec.get("pos", (0.0, 0.0)), f"{name}.pos"))
            terms += _parse_reward_fns(spec.get("reward_fns"), name, (name,), COMPONENT_REWARDS)
            score_terms += _parse_reward_fns(spec.get("score_fns"), name, (name,), COMPONENT_REWARDS)

        self.edge_names = []
        self._observers = []
        for edge in sorted(descriptor.get("edges") or {}):
            parts = edge.split("__")
            if len(parts) != 2 or parts[0] == parts[1]:
                raise DescriptorError(f"edge key {edge!r} must join two component names with '__'")
            for p in parts:
                if p not in comps:
                    raise DescriptorError(f"edge {edge!r} references unknown component {p!r}")
            if parts != sorted(parts):
                raise DescriptorError(f"edge key {edge!r} must use sorted component names")
            spec = descriptor["edges"][edge] or {}
            self.edge_names.append(edge)
            for obs in spec.get("extra_observers", []):
                otype = obs.get("observer_type")
                if otype not in OBSERVER_TYPES:
                    raise DescriptorError(f"edge {edge!r}: unknown observer_type {otype!r}")
                self._observers.append((edge, otype, tuple(parts)))
            members = tuple(parts)
            terms += _parse_reward_fns(spec.get("reward_fns"), edge, members, EDGE_REWARDS)
            score_terms += _parse_reward_fns(spec.get("score_fns"), edge, members, EDGE_REWARDS)

        glob = descriptor.get("global", {}) or {}
        self.horizon = int(glob.get("horizon", DEFAULT_HORIZON))
        self.dt = float(glob.get("dt", DT))
        self.env_reward_multiplier = float(glob.get("env_reward_multiplier", 1.0))
        if self.horizon < 1:
            raise DescriptorError("horizon must be >= 1")
        if not self.dt > 0:
            raise DescriptorError("dt must be > 0")

        self.kinds = tuple(kinds)
        self.actuated = np.array([k in ACTUATED_KINDS for k in kinds], dtype=bool)
        self.contact_radius = np.array(radii, dtype=np.float64)
        self.initial_position = np.stack(init_pos)
        self.reward_terms = tuple(terms)
        # score defaults to the unweighted reward terms so that sweeping
        # reward scales never changes the score definition
        if score_terms:
            self.score_terms = tuple(score_terms)
        else:
            self.score_terms = tuple(replace(t, scale=1.0) for t in terms)

        layout, offset = {}, 0
        for name in self.component_names:
            layout[f"{name}.pos"] = (offset, offset + 2)
            layout[f"{name}.vel"] = (offset + 2, offset + 4)
            offset += 4
        for edge, otype, _ in self._observers:
            key = f"{edge}.{otype}"
            n = sum(1 for k in layout if k == key or k.startswith(key + "#"))
            if n:
                key = f"{key}#{n}"
            layout[key] = (offset, offset + 2)
            offset += 2
        self.layout = layout
        self.obs_dim = offset
        self.action_dim = 2 * int(self.actuated.sum())

    @property
    def reward_channels(self) -> tuple[str, ...]:
        return tuple(t.channel for t in self.reward_terms)

    def layout_json(self) -> str:
        return json.dumps({k: list(v) for k, v in self.layout.items()}, indent=2)

    # -- dynamics -----------------------------------------------------------

    def reset(self, seed) -> EnvState:
        """Initial state: descriptor positions plus uniform noise, zero velocity.

        ``seed`` may be an int or a 1-d array of ints (batched reset); each
        batch row equals the single-env reset with the same seed.
        """
        seeds = np.asarray(seed, dtype=np.int64)
        C = len(self.component_names)
        if seeds.ndim == 0:
            rng = np.random.default_rng(int(seeds))
            pos = self.initial_position + rng.uniform(-RESET_NOISE, RESET_NOISE, size=(C, 2))
            return EnvState(pos, np.zeros((C, 2)), 0, int(seeds), self.component_names)
        noise = np.stack(
            [np.random.default_rng(int(s)).uniform(-RESET_NOISE, RESET_NOISE, size=(C, 2)) for s in seeds]
        )
        pos = self.initial_position[None] + noise
        n = seeds.shape[0]
        return EnvState(pos, np.zeros((n, C, 2)), np.zeros(n, dtype=np.int64), seeds.copy(),
                        self.component_names)

    def observe(self, state: EnvState) -> np.ndarray:
        lead = state.position.shape[:-2]
        parts = [np.concatenate([state.position, state.velocity], axis=-1).reshape(*lead, -1)]
        for _, _, (a, b) in self._observers:
            ia, ib = state.component(a), state.component(b)
            parts.append(state.position[..., ib, :] - state.position[..., ia, :])
        return np.concatenate(parts, axis=-1)

    def reward_breakdown(self, state: EnvState) -> dict[str, Any]:
        """Unscaled value of every reward channel at ``state``."""
        return {t.channel: _evaluate_term(t, state) for t in self.reward_terms}

    def reward(self, state: EnvState):
        total = np.zeros(state.position.shape[:-2])
        for t in self.reward_terms:
            total = total + t.scale * _evaluate_term(t, state)
        return self.env_reward_multiplier * total

    def score(self, state: EnvState):
        total = np.zeros(state.position.shape[:-2])
        for t in self.score_terms:
            total = total + t.scale * _evaluate_term(t, state)
        return total

    def step(self, state: EnvState, action) -> tuple[EnvState, StepResult]:
        """Advance one step. Pure: ``state`` is not modified."""
        batched = state.batched
        action = np.asarray(action, dtype=np.float64)
        expected = (state.position.shape[0], self.action_dim) if batched else (self.action_dim,)
        if action.shape != expected:
            raise ValueError(f"action must have shape {expected}, got {action.shape}")
        if not np.all(np.isfinite(action)):
            raise ValueError("action contains non-finite values")
        if np.any(np.asarray(state.step_index) >= self.horizon):
            raise ValueError("cannot step a finished episode; reset first")

        pos = state.position if batched else state.position[None]
        vel = state.velocity if batched else state.velocity[None]
        force = np.zeros_like(pos)
        clipped = np.clip(action, -FORCE_CLIP, FORCE_CLIP).reshape(pos.shape[0], -1, 2)
        force[:, self.actuated, :] = clipped / MASS
        new_pos, new_vel = kernels.point_mass_step(
            pos, vel, force, self.actuated, self.contact_radius, self.dt, DRAG, CONTACT_STIFFNESS
        )
        if not batched:
            new_pos, new_vel = new_pos[0], new_vel[0]
        step_index = state.step_index + 1
        new_state = EnvState(new_pos, new_vel, step_index, state.rng_state, self.component_names)
        done = np.asarray(step_index) == self.horizon
        result = StepResult(
            observation=self.observe(new_state),
            reward=self.reward(new_state),
            score=self.score(new_state),
            done=done if batched else bool(done),
        )
        return new_state, result


def compose(descriptor: Mapping) -> Environment:
    """Validate a descriptor and build its environment."""
    return Environment(descriptor)


def _reject_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise DescriptorError(f"duplicate key {key!r}")
        out[key] = value
    return out


def load_descriptor(path) -> dict:
    """Read a JSON descriptor, rejecting duplicate keys (e.g. repeated component names)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"descriptor file not found: {path}")
    with open(path) as fh:
        return json.load(fh, object_pairs_hook=_reject_duplicates)
