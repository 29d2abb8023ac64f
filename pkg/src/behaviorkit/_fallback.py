"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Both backends take float64 C-contiguous arrays and return the same
results up to floating-point summation order.
"""
import numpy as np

# rows of the left operand processed at once, bounds the distance matrix memory
_CHUNK = 512


def mean_pairwise_distance(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[1] != y.shape[1]:
        raise ValueError("dimension mismatch")
    total = 0.0
    for start in range(0, x.shape[0], _CHUNK):
        block = x[start:start + _CHUNK]
        diff = block[:, None, :] - y[None, :, :]
        total += float(np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)).sum())
    return total / (x.shape[0] * y.shape[0])


def gae(rewards, values, dones, last_values, gamma, lam):
    T = rewards.shape[0]
    adv = np.zeros_like(rewards, dtype=np.float64)
    carry = np.zeros(rewards.shape[1], dtype=np.float64)
    for t in range(T - 1, -1, -1):
        next_v = last_values if t == T - 1 else values[t + 1]
        nonterm = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * nonterm - values[t]
        carry = delta + gamma * lam * nonterm * carry
        adv[t] = carry
    return adv, adv + values


def point_mass_step(pos, vel, force, actuated, contact_radius, dt, drag, stiffness):
    force = np.array(force, dtype=np.float64)
    actuated = np.asarray(actuated, dtype=bool)
    for c in np.flatnonzero(np.asarray(contact_radius) > 0.0):
        r = contact_radius[c]
        for a in np.flatnonzero(actuated):
            delta = pos[:, c, :] - pos[:, a, :]
            dist = np.sqrt(np.sum(delta * delta, axis=-1))
            touching = (dist < r) & (dist > 0.0)
            safe = np.where(touching, dist, 1.0)
            mag = np.where(touching, stiffness * (r - dist) / safe, 0.0)
            force[:, c, :] += mag[:, None] * delta
    new_vel = vel + dt * (force - drag * vel)
    new_pos = pos + dt * new_vel
    return new_pos, new_vel


def bin_counts(samples, lo, hi, bins):
    samples = np.asarray(samples, dtype=np.float64)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    n, d = samples.shape
    inside = np.all((samples >= lo) & (samples <= hi), axis=1)
    kept = samples[inside]
    width = (hi - lo) / bins
    idx = np.floor((kept - lo) / width).astype(np.int64)
    idx = np.minimum(idx, bins - 1)
    flat = np.zeros(kept.shape[0], dtype=np.int64)
    for k in range(d):
        flat = flat * bins + idx[:, k]
    counts = np.bincount(flat, minlength=bins ** d).astype(np.int64)
    return counts, int(n - kept.shape[0])
