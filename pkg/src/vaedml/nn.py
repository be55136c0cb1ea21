"""Minimal dense-network substrate: forward/backward, Adam, gradient checks.

Everything is float64 numpy. Networks are small (two hidden layers on
~15-feature rows), so clarity and checkable gradients beat throughput.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericError, SchemaError

ACTIVATIONS = ("relu", "tanh", "identity")

CHECKPOINT_VERSION = 1


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _act_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(float)
    if kind == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return np.ones_like(z)


@dataclass
class Layer:
    weights: np.ndarray   # (fan_in, fan_out)
    bias: np.ndarray      # (fan_out,)
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise DomainError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise SchemaError("layer weight/bias shapes disagree")


@dataclass
class Mlp:
    layers: list[Layer]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weights.shape[1] != b.weights.shape[0]:
                raise SchemaError("adjacent layer dimensions do not chain")
        for lyr in self.layers:
            if not (np.isfinite(lyr.weights).all() and np.isfinite(lyr.bias).all()):
                raise NumericError("non-finite layer parameters")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weights.shape[1]


def init_mlp(dims: list[int], activations: list[str] | None = None, seed: int = 0) -> Mlp:
    """Glorot-uniform initialized network over the given layer widths."""
    if len(dims) < 2:
        raise DomainError("need at least input and output dims")
    if activations is None:
        activations = ["tanh"] * (len(dims) - 2) + ["identity"]
    if len(activations) != len(dims) - 1:
        raise DomainError("one activation per layer required")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out, act in zip(dims, dims[1:], activations):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append(Layer(weights=w, bias=np.zeros(fan_out), activation=act))
    return Mlp(layers)


@dataclass
class ForwardTrace:
    """Per-layer pre-activations and activations; index 0 is the input."""

    inputs: np.ndarray
    pre: list[np.ndarray]
    post: list[np.ndarray]

    @property
    def output(self) -> np.ndarray:
        return self.post[-1] if self.post else self.inputs


def forward(net: Mlp, batch) -> ForwardTrace:
    x = np.asarray(batch, dtype=float)
    if x.ndim != 2:
        raise SchemaError(f"batch must be 2-D, got shape {x.shape}")
    if net.layers and x.shape[1] != net.input_dim:
        raise SchemaError(f"batch has {x.shape[1]} columns, network expects {net.input_dim}")
    pre, post = [], []
    a = x
    for lyr in net.layers:
        z = a @ lyr.weights + lyr.bias
        a = _act(z, lyr.activation)
        pre.append(z)
        post.append(a)
    return ForwardTrace(inputs=x, pre=pre, post=post)


def backward(net: Mlp, trace: ForwardTrace, loss_grad) -> list[tuple[np.ndarray, np.ndarray]]:
    """Exact reverse-mode gradients (dW, db) per layer, first layer first.

    ``loss_grad`` is dLoss/dOutput for the batch the trace came from; any
    averaging over the batch lives inside the loss gradient.
    """
    g = np.asarray(loss_grad, dtype=float)
    if net.layers and g.shape != trace.post[-1].shape:
        raise SchemaError(f"loss gradient shape {g.shape} does not match output "
                          f"{trace.post[-1].shape}")
    grads: list[tuple[np.ndarray, np.ndarray]] = []
    for idx in range(len(net.layers) - 1, -1, -1):
        lyr = net.layers[idx]
        delta = g * _act_grad(trace.pre[idx], lyr.activation)
        a_prev = trace.inputs if idx == 0 else trace.post[idx - 1]
        grads.append((a_prev.T @ delta, delta.sum(axis=0)))
        g = delta @ lyr.weights.T
    grads.reverse()
    return grads


def input_gradient(net: Mlp, trace: ForwardTrace, loss_grad) -> np.ndarray:
    """dLoss/dInput for the traced batch (used to chain through samplers)."""
    g = np.asarray(loss_grad, dtype=float)
    for idx in range(len(net.layers) - 1, -1, -1):
        lyr = net.layers[idx]
        delta = g * _act_grad(trace.pre[idx], lyr.activation)
        g = delta @ lyr.weights.T
    return g


def get_params(net: Mlp) -> list[np.ndarray]:
    out = []
    for lyr in net.layers:
        out.append(lyr.weights)
        out.append(lyr.bias)
    return out


def flatten_grads(grads: list[tuple[np.ndarray, np.ndarray]]) -> list[np.ndarray]:
    out = []
    for dw, db in grads:
        out.append(dw)
        out.append(db)
    return out


@dataclass
class OptimizerState:
    """Adam accumulators; shapes mirror the parameter list."""

    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_optimizer(params: list[np.ndarray], learning_rate: float = 1e-3,
                   beta1: float = 0.9, beta2: float = 0.999,
                   epsilon: float = 1e-8) -> OptimizerState:
    return OptimizerState(step=0,
                          m=[np.zeros_like(p) for p in params],
                          v=[np.zeros_like(p) for p in params],
                          learning_rate=learning_rate, beta1=beta1, beta2=beta2,
                          epsilon=epsilon)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray],
              state: OptimizerState) -> tuple[list[np.ndarray], OptimizerState]:
    """Bias-corrected adaptive-moment update; returns fresh arrays."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise SchemaError("params, grads, and optimizer state lengths disagree")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise SchemaError(f"gradient {i} shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in slot {i}, "
                               f"max |g| = {np.max(np.abs(g[np.isfinite(g)] if np.isfinite(g).any() else 0))}")
    t = state.step + 1
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m1 = state.beta1 * m + (1.0 - state.beta1) * g
        v1 = state.beta2 * v + (1.0 - state.beta2) * g * g
        mhat = m1 / (1.0 - state.beta1 ** t)
        vhat = v1 / (1.0 - state.beta2 ** t)
        new_p.append(p - state.learning_rate * mhat / (np.sqrt(vhat) + state.epsilon))
        new_m.append(m1)
        new_v.append(v1)
    return new_p, OptimizerState(step=t, m=new_m, v=new_v,
                                 learning_rate=state.learning_rate,
                                 beta1=state.beta1, beta2=state.beta2,
                                 epsilon=state.epsilon)


def set_params(net: Mlp, params: list[np.ndarray]) -> Mlp:
    layers = []
    for i, lyr in enumerate(net.layers):
        layers.append(Layer(weights=params[2 * i], bias=params[2 * i + 1],
                            activation=lyr.activation))
    return Mlp(layers)


def finite_difference_check(loss_fn, params: list[np.ndarray],
                            analytic: list[np.ndarray], n_samples: int = 150,
                            step: float = 1e-5, seed: int = 0) -> float:
    """Max relative error of analytic grads vs central differences.

    ``loss_fn(params) -> scalar`` is re-evaluated with single entries
    perturbed; a seeded subsample of at least ``n_samples`` coordinates is
    checked (all of them if fewer exist).
    """
    sizes = [p.size for p in params]
    total = int(np.sum(sizes))
    if total == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    idx = np.arange(total) if total <= n_samples else np.sort(
        rng.choice(total, size=n_samples, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    work = [p.copy() for p in params]
    for flat in idx:
        slot = int(np.searchsorted(offsets, flat, side="right") - 1)
        local = int(flat - offsets[slot])
        orig = work[slot].flat[local]
        work[slot].flat[local] = orig + step
        up = loss_fn(work)
        work[slot].flat[local] = orig - step
        down = loss_fn(work)
        work[slot].flat[local] = orig
        numeric = (up - down) / (2.0 * step)
        a = analytic[slot].flat[local]
        denom = max(abs(a) + abs(numeric), 1e-8)
        worst = max(worst, abs(a - numeric) / denom)
    return worst


def grad_check(net: Mlp, loss_fn, batch, n_samples: int = 150,
               step: float = 1e-5, seed: int = 0) -> float:
    """Check backward() against central differences for a scalar loss.

    ``loss_fn(output) -> (scalar, dLoss/dOutput)`` defines the objective on
    the network output.
    """
    x = np.asarray(batch, dtype=float)
    if x.size == 0:
        raise DomainError("batch must be nonempty")
    trace = forward(net, x)
    _, lg = loss_fn(trace.output)
    analytic = flatten_grads(backward(net, trace, lg))

    def value(params):
        out = forward(set_params(net, params), x).output
        return loss_fn(out)[0]

    return finite_difference_check(value, get_params(net), analytic,
                                   n_samples=n_samples, step=step, seed=seed)


def mlp_to_dict(net: Mlp) -> dict:
    return {
        "layers": [
            {
                "activation": lyr.activation,
                "shape": list(lyr.weights.shape),
                "weights": lyr.weights.ravel().tolist(),   # row-major
                "bias": lyr.bias.tolist(),
            }
            for lyr in net.layers
        ],
    }


def mlp_from_dict(payload: dict) -> Mlp:
    layers = []
    for spec in payload["layers"]:
        shape = tuple(spec["shape"])
        layers.append(Layer(weights=np.array(spec["weights"], dtype=float).reshape(shape),
                            bias=np.array(spec["bias"], dtype=float),
                            activation=spec["activation"]))
    return Mlp(layers)


def save_checkpoint(net: Mlp, path, seed: int | None = None) -> None:
    """Versioned JSON checkpoint; floats round-trip bit-exactly via repr."""
    payload = {"format_version": CHECKPOINT_VERSION, "seed": seed}
    payload.update(mlp_to_dict(net))
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> tuple[Mlp, int | None]:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise SchemaError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    return mlp_from_dict(payload), payload.get("seed")
