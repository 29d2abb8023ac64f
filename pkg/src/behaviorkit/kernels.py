"""Hot numerical kernels with a compiled backend and a numpy fallback.

The Cython extension is used when it was built and importable. Setting
``BEHAVIORKIT_PURE_PYTHON=1`` forces the numpy fallback, which is also
what gets loaded when the extension is missing.

All functions accept anything array-like and coerce to contiguous float64
before dispatching.
"""
import os

import numpy as np

from . import _fallback

_compiled = None
if os.environ.get("BEHAVIORKIT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _fallback


def _f64(a, ndim):
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {out.shape}")
    return out


def mean_pairwise_distance(x, y, impl=None):
    """Mean Euclidean distance over every (row of x, row of y) pair, self-pairs included."""
    impl = impl or _impl
    x = _f64(x, 2)
    y = _f64(y, 2)
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("empty sample set")
    return float(impl.mean_pairwise_distance(x, y))


def gae(rewards, values, dones, last_values, gamma, lam, impl=None):
    """Backward GAE recursion over a (T, num_envs) batch.

    Returns ``(advantages, returns)`` both of shape ``(T, num_envs)``.
    """
    impl = impl or _impl
    rewards = _f64(rewards, 2)
    values = _f64(values, 2)
    dones = _f64(dones, 2)
    last_values = _f64(last_values, 1)
    if not (rewards.shape == values.shape == dones.shape):
        raise ValueError("rewards, values and dones must share a shape")
    if last_values.shape[0] != rewards.shape[1]:
        raise ValueError("need one bootstrap value per env")
    adv, ret = impl.gae(rewards, values, dones, last_values, float(gamma), float(lam))
    return np.asarray(adv), np.asarray(ret)


def point_mass_step(pos, vel, force, actuated, contact_radius, dt, drag, stiffness,
                    impl=None):
    """Semi-implicit Euler step for a batch of planar point-mass scenes.

    ``pos``, ``vel`` and ``force`` have shape ``(batch, components, 2)``.
    Components with ``contact_radius > 0`` are pushed away by every actuated
    component closer than that radius with a linear spring force.
    """
    impl = impl or _impl
    pos = _f64(pos, 3)
    vel = _f64(vel, 3)
    force = _f64(force, 3)
    actuated = np.ascontiguousarray(actuated, dtype=np.uint8)
    contact_radius = _f64(contact_radius, 1)
    new_pos, new_vel = impl.point_mass_step(
        pos, vel, force, actuated, contact_radius, float(dt), float(drag), float(stiffness)
    )
    return np.asarray(new_pos), np.asarray(new_vel)


def bin_counts(samples, lo, hi, bins, impl=None):
    """Counts on a regular grid of ``bins`` per dimension over ``[lo, hi]``.

    Bins are half-open except the last one per dimension, which is closed.
    Returns the flattened counts and the number of samples outside the range.
    """
    impl = impl or _impl
    samples = _f64(samples, 2)
    lo = _f64(lo, 1)
    hi = _f64(hi, 1)
    counts, excluded = impl.bin_counts(samples, lo, hi, int(bins))
    return np.asarray(counts), int(excluded)
