"""Reward-free behavior engineering on composable 2D point-mass environments.

Modules
-------
envcore
    Descriptor-driven environments, observations, rewards and scores.
neural
    Numpy MLPs with manual backprop, Adam and spectral normalization.
ppo
    Clipped-surrogate PPO with GAE.
mimax
    Mutual-information reward synthesis (GCRL, DIAYN, cDIAYN).
dmin
    Divergence-minimization reward synthesis (GAIL, GAIL2, AIRL, MLE).
metrics
    Particle MI, histogram entropy, energy distance and LGR.
experiment, cli
    Configs, training runs, sweeps and the ``behaviorkit`` command.
"""
from .envcore import Environment, FeatureExtractor, compose, load_descriptor
from .kernels import BACKEND
from .metrics import EvalSettings, MetricReport, energy_distance, histogram_entropy, particle_mi
from .ppo import PpoConfig

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Environment",
    "EvalSettings",
    "FeatureExtractor",
    "MetricReport",
    "PpoConfig",
    "compose",
    "energy_distance",
    "histogram_entropy",
    "load_descriptor",
    "particle_mi",
]
