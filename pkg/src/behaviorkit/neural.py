"""Small fully connected networks with hand-written backprop.

Networks are plain :class:`MlpParams` values (lists of weight matrices and
bias vectors). Weights are stored ``(fan_in, fan_out)`` so a layer computes
``x @ W + b``. Hidden layers use swish by default and the output layer is
linear.

Also here: Adam, spectral normalization by power iteration, and a flat
binary checkpoint format with a JSON manifest.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ACTIVATIONS = ("swish", "tanh")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _act(kind, x):
    if kind == "swish":
        return x * _sigmoid(x)
    return np.tanh(x)


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "swish"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: expects input {w.shape[0]}, previous layer gives "
                                 f"{self.weights[i - 1].shape[1]}")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        return MlpParams(list(arrays[0::2]), list(arrays[1::2]), self.activation)

    def astype(self, dtype) -> "MlpParams":
        return self.with_arrays([a.astype(dtype) for a in self.arrays()])


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, activation: str = "swish",
             dtype=np.float64, output_scale: float = 1.0) -> MlpParams:
    """LeCun-normal weights, zero biases. ``output_scale`` shrinks the last layer."""
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        if i == len(sizes) - 2:
            w = w * output_scale
        weights.append(w.astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MlpParams(weights, biases, activation)


def _check_input(params: MlpParams, x):
    x = np.asarray(x, dtype=params.weights[0].dtype)
    if x.shape[-1] != params.in_dim:
        raise ValueError(f"input dim {x.shape[-1]} does not match network input {params.in_dim}")
    return x


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Evaluate the network on a vector or a batch of row vectors."""
    h = _check_input(params, x)
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = _act(params.activation, h)
    return h


def mlp_forward_cached(params: MlpParams, x):
    h = _check_input(params, x)
    inputs, gates = [], []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w
        z += b
        if i == last:
            h = z
        elif params.activation == "swish":
            s = np.tanh(0.5 * z)
            s += 1.0
            s *= 0.5
            h = z * s
            gates.append(s)
        else:
            h = np.tanh(z)
            gates.append(None)
    return h, (inputs, gates)


def mlp_backward(params: MlpParams, cache, upstream):
    """Reverse pass given the cache from :func:`mlp_forward_cached`."""
    inputs, gates = cache
    n_layers = len(params.weights)
    g = np.asarray(upstream, dtype=params.weights[0].dtype)
    expected = inputs[-1].shape[:-1] + (params.out_dim,)
    if g.shape != expected:
        raise ValueError(f"upstream gradient shape {g.shape} != output shape {expected}")
    grads = [None] * (2 * n_layers)
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            out = inputs[i + 1]
            if params.activation == "swish":
                # d/dz z*s(z) = s + h*(1 - s) with h = z*s
                s = gates[i]
                g = g * (s + out * (1.0 - s))
            else:
                g = g * (1.0 - out * out)
        x = inputs[i]
        if x.ndim == 1:
            grads[2 * i] = np.outer(x, g)
            grads[2 * i + 1] = g.copy()
        else:
            grads[2 * i] = x.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return grads, g


def mlp_grad(params: MlpParams, x, upstream):
    """Gradients of ``sum(upstream * mlp_forward(params, x))``.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` follows the
    layout of :meth:`MlpParams.arrays` (W0, b0, W1, b1, ...).
    """
    _, cache = mlp_forward_cached(params, x)
    return mlp_backward(params, cache, upstream)


# -- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    count: int = 0


def adam_init(arrays: Sequence[np.ndarray]) -> AdamState:
    return AdamState([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0)


def adam_step(arrays: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns new arrays and a new state."""
    if len(arrays) != len(grads) or len(arrays) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    for a, g in zip(arrays, grads):
        if a.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {a.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient passed to adam_step")
    t = state.count + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_arrays, new_m, new_v = [], [], []
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        step = (m / c1) / (np.sqrt(v / c2) + eps)
        new_arrays.append((a - lr * step).astype(a.dtype, copy=False))
        new_m.append(m)
        new_v.append(v)
    return new_arrays, AdamState(new_m, new_v, t)


def clip_by_global_norm(grads: Sequence[np.ndarray], max_norm: float):
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = [g * scale for g in grads]
    return list(grads), norm


# -- spectral normalization -------------------------------------------------

def power_iteration(weight, u, iters: int = 1):
    """Run ``iters`` rounds of power iteration from left vector ``u``.

    Returns ``(sigma, u, v)`` with ``sigma = u^T W v``.
    """
    w = np.asarray(weight, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    v = None
    for _ in range(max(int(iters), 1)):
        v = w.T @ u
        v /= np.linalg.norm(v) + 1e-12
        u = w @ v
        u /= np.linalg.norm(u) + 1e-12
    sigma = float(u @ w @ v)
    return sigma, u, v


def spectral_normalize(weight, iters: int = 5, u=None, rng=None):
    """Divide ``weight`` by its largest singular value estimated by power iteration.

    Returns ``(weight / sigma, sigma)``.
    """
    w = np.asarray(weight, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("spectral_normalize expects a matrix")
    if not np.any(w):
        raise ValueError("cannot spectrally normalize a zero matrix")
    if u is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        u = rng.normal(size=w.shape[0])
        u /= np.linalg.norm(u)
    sigma, _, _ = power_iteration(w, u, iters)
    return w / sigma, sigma


@dataclass
class SpectralNormMlp:
    """An MLP whose weight matrices are divided by their spectral norm at forward time.

    The left singular vector estimates ``u`` persist between calls; every
    :meth:`refresh` advances each by one power-iteration step.
    """

    params: MlpParams
    u: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def create(cls, params: MlpParams, rng: np.random.Generator, warmup: int = 20):
        us = []
        for w in params.weights:
            u = rng.normal(size=w.shape[0])
            _, u, _ = power_iteration(w, u / np.linalg.norm(u), warmup)
            us.append(u)
        return cls(params, us)

    def _normalized(self, us):
        weights, sigmas, vs = [], [], []
        for w, u in zip(self.params.weights, us):
            sigma, u_new, v = power_iteration(w, u, 1)
            weights.append((w / sigma).astype(w.dtype))
            sigmas.append(sigma)
            vs.append(v)
        return weights, sigmas, vs

    def effective(self) -> MlpParams:
        weights, _, _ = self._normalized(self.u)
        return MlpParams(weights, list(self.params.biases), self.params.activation)

    def forward(self, x):
        return mlp_forward(self.effective(), x)

    def refresh(self, exact: bool = False) -> "SpectralNormMlp":
        """Advance every ``u`` by one power-iteration step.

        With ``exact`` the vectors are instead re-anchored to the leading left
        singular vectors (sign kept consistent with the previous ``u``). Random
        square layers often have nearly tied top singular values, where
        power iteration converges too slowly to keep ``sigma`` within 1e-3.
        """
        new_u = []
        for w, u in zip(self.params.weights, self.u):
            if exact:
                left = np.linalg.svd(np.asarray(w, dtype=np.float64))[0][:, 0]
                new_u.append(left if float(left @ u) >= 0 else -left)
            else:
                new_u.append(power_iteration(w, u, 1)[1])
        return SpectralNormMlp(self.params, new_u)

    def grad(self, x, upstream):
        """Gradients w.r.t. the raw parameters, back through the normalization."""
        us = self.u
        eff_w, sigmas, vs = [], [], []
        for w, u in zip(self.params.weights, us):
            sigma, u_new, v = power_iteration(w, u, 1)
            eff_w.append((w / sigma).astype(w.dtype))
            sigmas.append(sigma)
            vs.append((u_new, v))
        eff = MlpParams(eff_w, list(self.params.biases), self.params.activation)
        grads, gx = mlp_grad(eff, x, upstream)
        for i, (sigma, (u_i, v_i)) in enumerate(zip(sigmas, vs)):
            g = grads[2 * i].astype(np.float64)
            coef = float(np.sum(g * eff_w[i]))
            grads[2 * i] = ((g - coef * np.outer(u_i, v_i)) / sigma).astype(eff_w[i].dtype)
        return grads, gx


# -- checkpoints ------------------------------------------------------------

def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write ``<path>.bin`` (raw little-endian tensors, concatenated) and ``<path>.json``."""
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".json", ".bin") else path
    entries, offset = [], 0
    with open(base.with_suffix(".bin"), "wb") as fh:
        for name in tensors:
            arr = np.ascontiguousarray(tensors[name])
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            data = arr.tobytes()
            fh.write(data)
            entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                            "offset": offset, "nbytes": len(data)})
            offset += len(data)
    manifest = {"format": "behaviorkit-tensors-v1", "binary": base.with_suffix(".bin").name,
                "tensors": entries, "meta": meta or {}}
    base.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return base.with_suffix(".json")


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.json"
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    if not path.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {path}")
    manifest = json.loads(path.read_text())
    raw = (path.parent / manifest["binary"]).read_bytes()
    tensors = {}
    for e in manifest["tensors"]:
        chunk = raw[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return tensors, manifest.get("meta", {})


def mlp_to_tensors(prefix: str, params: MlpParams) -> dict[str, np.ndarray]:
    out = {}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        out[f"{prefix}.w{i}"] = w
        out[f"{prefix}.b{i}"] = b
    return out


def mlp_from_tensors(prefix: str, tensors: dict, activation: str = "swish") -> MlpParams:
    weights, biases, i = [], [], 0
    while f"{prefix}.w{i}" in tensors:
        weights.append(tensors[f"{prefix}.w{i}"])
        biases.append(tensors[f"{prefix}.b{i}"])
        i += 1
    if not weights:
        raise KeyError(f"no tensors with prefix {prefix!r}")
    return MlpParams(weights, biases, activation)
