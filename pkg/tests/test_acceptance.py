"""Acceptance gate: one test per criterion, each reporting a single pass/fail line.

The training criteria (4 to 7) take minutes each; select the fast ones with
``pytest tests/test_acceptance.py -m "not slow"``.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest

from behaviorkit import experiment as ex
from behaviorkit.dmin import BinaryDiscriminator, dmin_reward, train_discriminator
from behaviorkit.metrics import HistogramSpec, energy_distance, histogram_entropy, particle_mi
from behaviorkit.mimax import FixedPosterior, MimaxConfig, SkillPrior, synthesize
from behaviorkit.neural import init_mlp, mlp_forward, mlp_grad
from behaviorkit.ppo import policy_input

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
RESULTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str, started: float):
    RESULTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}  ({time.time() - started:.1f}s)"
    print(RESULTS[n])
    assert ok, RESULTS[n]


def config(name, overrides=None):
    """Load a shipped config, applying ``{dotted.key: value}`` overrides."""
    cfg = ex.load_config(CONFIGS / name)
    for key, value in (overrides or {}).items():
        ex.set_dotted(cfg, key, value)
    return ex.resolve_config(cfg, CONFIGS)


def trained(cfg, seed):
    exp = ex.Experiment(cfg, seed)
    reports = ex.train(exp)
    return exp, reports[-1]


# -- 1: metric identities -----------------------------------------------------------

def test_criterion_1_metric_identities():
    t0 = time.time()
    logits = np.random.default_rng(0).uniform(-10, 10, 1000)
    d = 1.0 / (1.0 + np.exp(-logits))
    airl_err = float(np.max(np.abs(dmin_reward("AIRL", logits) - (np.log(d) - np.log1p(-d)))))
    gail_err = max(abs(dmin_reward("GAIL", 0.0, offset=c) - (math.log(0.5) + c)) for c in (0.0, 1.0, 10.0))
    x = np.random.default_rng(1).normal(size=(200, 2))
    same = energy_distance(x, x)
    single = energy_distance([[1.0, -2.0]], [[4.0, 2.0]])
    ok = airl_err < 1e-9 and gail_err < 1e-12 and same == 0.0 and abs(single - 10.0) < 1e-12
    record(1, ok and time.time() - t0 < 1.0,
           f"AIRL max err {airl_err:.1e}, GAIL(1/2) err {gail_err:.1e}, ED(x,x)={same}, ED singletons={single}", t0)


# -- 2: estimator calibration --------------------------------------------------------

def test_criterion_2_estimator_calibration():
    t0 = time.time()
    spec = HistogramSpec(16, -5.0, 5.0, 2)
    centers = -5.0 + (10.0 / 16) * (np.arange(8) * 2 + 0.5)
    sampler = lambda zs, M, T, rng: np.stack([np.repeat([[centers[z], centers[z]]], M * T, axis=0) for z in zs])
    mi = particle_mi(sampler, SkillPrior.categorical(8), 8, 4, 10, spec, np.random.default_rng(0))
    u = np.random.default_rng(0).uniform(-5, 5, size=100_000)
    h, _ = histogram_entropy(u, HistogramSpec(16, -5.0, 5.0, 1))
    # one estimate at n = 1e4 has sd ~0.024; 64 independent n = 2000 replicates average to sd ~0.007
    rng = np.random.default_rng(2)
    est = np.mean([energy_distance(rng.normal(size=(2000, 2)), rng.normal(size=(2000, 2)) + [2.0, 0.0])
                   for _ in range(64)])
    o = np.random.default_rng(99)
    m = 1_000_000
    a, a2 = o.normal(size=(m, 2)), o.normal(size=(m, 2))
    b, b2 = o.normal(size=(m, 2)) + [2.0, 0.0], o.normal(size=(m, 2)) + [2.0, 0.0]
    mc = (2 * np.linalg.norm(a - b, axis=1).mean() - np.linalg.norm(a - a2, axis=1).mean()
          - np.linalg.norm(b - b2, axis=1).mean())
    ok = (abs(mi - math.log(8)) < 1e-12 and abs(h - math.log(16)) < 0.02 and abs(est - mc) < 0.02
          and time.time() - t0 < 30)
    record(2, ok, f"MI={mi:.12f} (log 8={math.log(8):.12f}), H-log16={h - math.log(16):+.4f}, "
                  f"ED={est:.4f} vs MC {mc:.4f}", t0)


# -- 3: gradient correctness --------------------------------------------------------

def test_criterion_3_gradient_correctness():
    t0 = time.time()
    rng = np.random.default_rng(3)
    worst = 0.0
    h = 1e-6
    for _ in range(50):
        sizes = [int(rng.integers(1, 6))] + [int(rng.integers(2, 8)) for _ in range(rng.integers(1, 4))] \
            + [int(rng.integers(1, 4))]
        p = init_mlp(sizes, rng, dtype=np.float64)
        x = rng.normal(size=(4, sizes[0]))
        up = rng.normal(size=(4, sizes[-1]))
        grads, _ = mlp_grad(p, x, up)
        arrays = [a.copy() for a in p.arrays()]
        for g, a in zip(grads, arrays):
            fd = np.zeros_like(a)
            for idx in np.ndindex(a.shape):
                old = a[idx]
                a[idx] = old + h
                fp = np.sum(up * mlp_forward(p.with_arrays(arrays), x))
                a[idx] = old - h
                fm = np.sum(up * mlp_forward(p.with_arrays(arrays), x))
                a[idx] = old
                fd[idx] = (fp - fm) / (2 * h)
            scale = max(np.max(np.abs(g)), np.max(np.abs(fd)), 1e-8)
            worst = max(worst, float(np.max(np.abs(g - fd)) / scale))
    record(3, worst < 1e-4 and time.time() - t0 < 10, f"worst relative error {worst:.2e} over 50 nets", t0)


# -- 4: PPO sanity ------------------------------------------------------------------

def controller_return(env, goal, seeds, kp=2.0, kd=2.0):
    state = env.reset(seeds)
    total = np.zeros(len(seeds))
    for _ in range(env.horizon):
        obs = env.observe(state)
        action = np.clip(kp * (goal - obs[:, 0:2]) - kd * obs[:, 2:4], -1.0, 1.0)
        state, res = env.step(state, action)
        total += res.reward
    return total


def policy_return(env, policy, seeds):
    state = env.reset(seeds)
    total = np.zeros(len(seeds))
    for _ in range(env.horizon):
        state, res = env.step(state, policy.act(env.observe(state), deterministic=True))
        total += res.reward
    return total


@pytest.mark.slow
def test_criterion_4_ppo_reaches_controller_return():
    t0 = time.time()
    cfg = config("task_goal.json")
    assert cfg["ppo"]["total_steps"] <= 200_000
    goal = np.array(cfg["env"]["components"]["agent1"]["reward_fns"]["goal"]["target_goal"][:2], float)
    seeds = np.arange(1000, 1064)
    lines, passed = [], 0
    for seed in (0, 1, 2):
        exp, _ = trained(cfg, seed)
        ctrl = controller_return(exp.env, goal, seeds).mean()
        ppo = policy_return(exp.env, exp.state.policy, seeds).mean()
        ratio = 1.0 - (ppo - ctrl) / ctrl  # fraction of controller return; 1 means equal
        passed += ppo >= ctrl - 0.1 * abs(ctrl)
        lines.append(f"seed {seed}: {ppo:.2f} vs {ctrl:.2f} ({100 * ratio:.0f}%)")
    record(4, passed == 3 and time.time() - t0 < 300, "; ".join(lines), t0)


# -- 5: MI-max ----------------------------------------------------------------------

def final_mi(cfg, seeds):
    t0 = time.time()
    return [trained(cfg, s)[1].value("MI(s,z)") for s in seeds], time.time() - t0


@pytest.mark.slow
def test_criterion_5_mimax_skill_discovery():
    t0 = time.time()
    seeds = range(10)
    diayn, t_diayn = final_mi(config("diayn.json"), seeds)
    sn, t_sn = final_mi(config("cdiayn.json"), seeds)
    plain, t_plain = final_mi(config("cdiayn.json", {"mimax.spectral_norm": False}), seeds)
    hits = sum(m >= 1.5 for m in diayn)
    ok = (hits >= 7 and np.mean(sn) >= 1.0 and np.mean(plain) < np.mean(sn)
          and max(t_diayn, t_sn, t_plain) < 900)
    record(5, ok, f"DIAYN MI {hits}/10 seeds >= 1.5 (" + ", ".join(f"{m:.2f}" for m in diayn)
           + f"); cDIAYN mean MI with SN {np.mean(sn):.2f}, without {np.mean(plain):.2f}; "
           f"variant times {t_diayn:.0f}/{t_sn:.0f}/{t_plain:.0f}s", t0)


# -- 6: GCRL ------------------------------------------------------------------------

def goal_distances(exp, goals, seed=123):
    env = exp.env
    state = env.reset(np.arange(seed, seed + len(goals)))
    fx = exp.fx
    for _ in range(env.horizon):
        obs = env.observe(state)
        state, _ = env.step(state, exp.state.policy.act(policy_input(obs, goals, exp.skills), deterministic=True))
    return np.linalg.norm(fx(env.observe(state)) - goals, axis=-1)


@pytest.mark.slow
def test_criterion_6_gcrl_goal_reaching_and_lgr():
    t0 = time.time()
    cfg = config("gcrl.json")
    exp = ex.Experiment(cfg, 0)
    lgr_random = exp.evaluate(0).value("LGR")
    lgr_trained = ex.train(exp)[-1].value("LGR")
    goals = exp.skills.sample(np.random.default_rng(2024), 10)  # never drawn during training
    dist = goal_distances(exp, goals)
    threshold = 0.1 * exp.eval_settings.high
    reached = int(np.sum(dist < threshold))
    reduction = lgr_random / lgr_trained
    ok = reached >= 8 and reduction >= 3.0 and time.time() - t0 < 600
    record(6, ok, f"{reached}/10 goals within {threshold:.2f}; LGR {lgr_random:.2f} -> {lgr_trained:.2f} "
                  f"({reduction:.1f}x)", t0)


# -- 7: D-min -----------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_gail_matches_target():
    t0 = time.time()
    cfg = config("gail.json")
    ratios = []
    for seed in range(10):
        exp = ex.Experiment(cfg, seed)
        before = exp.evaluate(0).value("energy_distance")
        after = ex.train(exp)[-1].value("energy_distance")
        ratios.append(after / before)
    hits = sum(r <= 1 / 3 for r in ratios)
    rng = np.random.default_rng(0)
    disc = BinaryDiscriminator.create(2, rng)
    x = rng.normal(size=(256, 2))
    for _ in range(300):
        disc, loss = train_discriminator(disc, x, x, 1e-3)
    ok = hits >= 7 and abs(loss - math.log(4)) < 0.05
    record(7, ok, "ED ratios " + ", ".join(f"{r:.2f}" for r in ratios)
           + f"; {hits}/10 <= 1/3; matched loss {loss:.4f} (log 4 = {math.log(4):.4f})", t0)


# -- 8: offset and score invariants ---------------------------------------------------

def test_criterion_8_offset_and_score_invariants():
    t0 = time.time()
    rng = np.random.default_rng(8)
    o, env_r = rng.normal(size=(500, 2)), rng.normal(size=500)
    z = rng.normal(size=(500, 2))
    prior, head = SkillPrior.gaussian(2), FixedPosterior(0.25)
    worst = 0.0
    for c in (0.5, 2.0, 7.25):
        base = synthesize(MimaxConfig(algorithm="GCRL", offset=0.0), head, prior, env_r, o, z)
        shifted = synthesize(MimaxConfig(algorithm="GCRL", offset=c), head, prior, env_r, o, z)
        worst = max(worst, float(np.max(np.abs(shifted - base - c))))
    logits = rng.normal(size=100)
    for c in (0.5, 2.0):
        worst = max(worst, float(np.max(np.abs(dmin_reward("GAIL", logits, offset=c)
                                                - dmin_reward("GAIL", logits, offset=0.0) - c))))
    # one frozen policy, scored under three reward-weight variants of the push scene
    exp = ex.Experiment(config("task_push.json"), 0)
    scores, rewards = set(), set()
    for scale in (0.1, 1.0, 10.0):
        variant = config("task_push.json", {"env.edges.agent1__cap1.reward_fns.dist.scale": scale})
        other = ex.Experiment(variant, 0)
        other.load_tensors(exp.tensors())
        report = other.evaluate(0)
        scores.add(report.value("episode_score"))
        rewards.add(report.value("episode_reward"))
    ok = worst < 1e-12 and len(scores) == 1 and len(rewards) == 3
    record(8, ok, f"offset shift error {worst:.1e}; score identical across 3 weight variants: "
                  f"{len(scores) == 1}; rewards differ: {len(rewards) == 3}", t0)


# -- 9: determinism -----------------------------------------------------------------

def test_criterion_9_determinism(tmp_path):
    t0 = time.time()
    cfg = config("diayn.json", {"ppo.total_steps": 16_384, "eval_every": 1, "seeds": [0]})
    a = ex.run(cfg, str(tmp_path / "a")) / "seed_0" / "metrics.jsonl"
    b = ex.run(cfg, str(tmp_path / "b")) / "seed_0" / "metrics.jsonl"
    same = a.read_bytes() == b.read_bytes()
    record(9, same, f"metrics.jsonl byte-identical over {len(a.read_text().splitlines())} evaluations", t0)
