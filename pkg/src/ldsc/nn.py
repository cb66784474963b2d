"""Small numpy MLPs: forward/backward, Adam, soft target updates, gradient checks.

Everything is float64. Weight matrices are stored (fan_in, fan_out) so a
batch of row vectors multiplies on the left.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SCHEMA_VERSION = 1
HIDDEN_ACTIVATIONS = ("relu", "tanh")
OUTPUT_ACTIVATIONS = ("linear", "tanh")


class GradientBlowUp(FloatingPointError):
    pass


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "relu"
    output_activation: str = "linear"
    output_bound: float = 1.0

    def __post_init__(self):
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: expects {w.shape[0]} inputs, previous emits {self.weights[i - 1].shape[1]}")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> "MlpParams":
        return copy.deepcopy(self)

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "architecture": self.sizes,
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
            "output_bound": self.output_bound,
            "layers": [
                {"shape": list(w.shape), "weights": w.ravel().tolist(), "biases": b.tolist()}
                for w, b in zip(self.weights, self.biases)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MlpParams":
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported checkpoint schema {data.get('schema_version')!r}")
        weights, biases = [], []
        for layer in data["layers"]:
            weights.append(np.asarray(layer["weights"], dtype=float).reshape(layer["shape"]))
            biases.append(np.asarray(layer["biases"], dtype=float))
        return cls(weights, biases, data["hidden_activation"], data["output_activation"], data["output_bound"])


def init_mlp(
    sizes: Sequence[int],
    rng: np.random.Generator,
    hidden_activation: str = "relu",
    output_activation: str = "linear",
    output_bound: float = 1.0,
    final_scale: Optional[float] = None,
) -> MlpParams:
    """Uniform +-1/sqrt(fan_in) init; ``final_scale`` overrides the last layer's range."""
    weights, biases = [], []
    n_layers = len(sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = 1.0 / np.sqrt(fan_in)
        if i == n_layers - 1 and final_scale is not None:
            lim = final_scale
        weights.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-lim, lim, size=fan_out))
    return MlpParams(weights, biases, hidden_activation, output_activation, output_bound)


def _hidden(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def forward(params: MlpParams, x) -> tuple[np.ndarray, dict]:
    """Evaluate the network on one input vector or a batch of row vectors."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    a = x[None, :] if single else x
    if a.ndim != 2 or a.shape[1] != params.weights[0].shape[0]:
        raise ValueError(f"input dimension {x.shape} does not match first layer {params.weights[0].shape[0]}")
    activations = [a]
    pre = []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w + b
        pre.append(z)
        if i < last:
            a = _hidden(z, params.hidden_activation)
        elif params.output_activation == "tanh":
            a = params.output_bound * np.tanh(z)
        else:
            a = z
        activations.append(a)
    out = a[0] if single else a
    return out, {"activations": activations, "pre": pre, "single": single}


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]


def backward(params: MlpParams, cache: dict, output_gradient, pre_output_gradient=None) -> Gradients:
    """Back-propagate dL/d(output); batch gradients are summed over rows.

    ``pre_output_gradient`` is an extra dL/dz for the last layer's
    pre-activation, for losses that act before the output squashing.
    """
    g = np.asarray(output_gradient, dtype=float)
    if cache["single"]:
        g = g[None, :]
    out = cache["activations"][-1]
    if g.shape != out.shape:
        raise ValueError(f"output gradient shape {g.shape} does not match output {out.shape}")
    n = len(params.weights)
    gw: list = [None] * n
    gb: list = [None] * n
    for i in range(n - 1, -1, -1):
        z = cache["pre"][i]
        if i == n - 1:
            if params.output_activation == "tanh":
                t = np.tanh(z)
                g = g * params.output_bound * (1.0 - t * t)
            if pre_output_gradient is not None:
                extra = np.asarray(pre_output_gradient, dtype=float)
                g = g + (extra[None, :] if cache["single"] else extra)
        elif params.hidden_activation == "relu":
            g = g * (z > 0.0)
        else:
            a = cache["activations"][i + 1]
            g = g * (1.0 - a * a)
        gw[i] = cache["activations"][i].T @ g
        gb[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return Gradients(gw, gb, g[0] if cache["single"] else g)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: MlpParams, **kw) -> "AdamState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **kw)


def adam_step(params: MlpParams, grads: Gradients, state: AdamState, lr: float) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update, applied in place; returns the same objects."""
    garrays = grads.arrays()
    parrays = params.arrays()
    if len(garrays) != len(parrays) or len(state.m) != len(parrays):
        raise ValueError("gradient / parameter / optimizer layouts differ")
    for g in garrays:
        if not np.all(np.isfinite(g)):
            raise GradientBlowUp("gradient blow-up")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(parrays, garrays, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def soft_update(target: MlpParams, online: MlpParams, tau: float) -> MlpParams:
    """Polyak averaging of ``target`` toward ``online`` (in place)."""
    if target.sizes != online.sizes:
        raise ValueError(f"architecture mismatch: {target.sizes} vs {online.sizes}")
    for t, o in zip(target.arrays(), online.arrays()):
        t *= 1.0 - tau
        t += tau * o
    return target


@dataclass
class QuadraticLoss:
    target: np.ndarray

    def __call__(self, out):
        return 0.5 * np.sum((out - self.target) ** 2, axis=-1)

    def grad(self, out):
        return out - self.target


@dataclass
class LinearLoss:
    coef: np.ndarray

    def __call__(self, out):
        return out @ self.coef

    def grad(self, out):
        return np.broadcast_to(self.coef, out.shape).copy()


def _forward_from(params: MlpParams, layer: int, z: np.ndarray) -> np.ndarray:
    """Finish a forward pass given batched pre-activations of ``layer``."""
    last = len(params.weights) - 1
    for i in range(layer, last + 1):
        if i > layer:
            z = a @ params.weights[i] + params.biases[i]
        if i < last:
            a = _hidden(z, params.hidden_activation)
        elif params.output_activation == "tanh":
            a = params.output_bound * np.tanh(z)
        else:
            a = z
    return a


def _extended(params: MlpParams, dtype) -> MlpParams:
    return MlpParams(
        [w.astype(dtype) for w in params.weights],
        [b.astype(dtype) for b in params.biases],
        params.hidden_activation,
        params.output_activation,
        params.output_bound,
    )


def grad_check(params: MlpParams, x, loss, h: float = 1e-5, dtype=np.longdouble) -> float:
    """Max relative error between back-prop and central differences.

    ``loss`` maps outputs (broadcasting over leading axes) to scalars and
    exposes ``loss.grad(output)``. Perturbing one parameter of layer l only
    shifts that layer's pre-activations, so every perturbed network for a
    layer is evaluated as one batch from layer l onward. The differences are
    taken in ``dtype`` (extended precision where the platform has it) so
    that cancellation in the loss does not swamp small gradients.
    """
    x = np.asarray(x, dtype=float)
    out, cache = forward(params, x)
    grads = backward(params, cache, loss.grad(out))
    ext = _extended(params, dtype)
    _, ext_cache = forward(ext, x.astype(dtype))
    worst = 0.0
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        a_prev = ext_cache["activations"][layer][0]
        z = ext_cache["pre"][layer][0]
        fan_in, fan_out = w.shape
        # weight (i, j) perturbation shifts z[j] by h * a_prev[i]
        shift = np.zeros((fan_in * fan_out, fan_out), dtype=dtype)
        rows = np.arange(fan_in * fan_out)
        shift[rows, rows % fan_out] = np.repeat(a_prev, fan_out) * h
        numeric_w = (loss(_forward_from(ext, layer, z + shift)) - loss(_forward_from(ext, layer, z - shift))) / (2 * h)
        eye = np.eye(fan_out, dtype=dtype) * h
        numeric_b = (loss(_forward_from(ext, layer, z + eye)) - loss(_forward_from(ext, layer, z - eye))) / (2 * h)
        for analytic, numeric in ((grads.weights[layer].ravel(), numeric_w), (grads.biases[layer], numeric_b)):
            err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
            worst = max(worst, float(err.max()))
    return worst


def grad_check_slow(params: MlpParams, x, loss, h: float = 1e-5, dtype=np.longdouble) -> float:
    """Reference version perturbing one parameter at a time with full forwards."""
    x = np.asarray(x, dtype=float)
    out, cache = forward(params, x)
    grads = backward(params, cache, loss.grad(out))
    ext = _extended(params, dtype)
    xe = x.astype(dtype)
    worst = 0.0
    for p, g in zip(ext.arrays(), grads.arrays()):
        flat = p.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            up = loss(forward(ext, xe)[0])
            flat[k] = old - h
            down = loss(forward(ext, xe)[0])
            flat[k] = old
            numeric = float((up - down) / (2 * h))
            analytic = float(g.reshape(-1)[k])
            worst = max(worst, abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric)))
    return worst


def save_params(path, **nets: MlpParams) -> None:
    Path(path).write_text(json.dumps({name: p.to_dict() for name, p in nets.items()}))


def load_params(path) -> dict[str, MlpParams]:
    data = json.loads(Path(path).read_text())
    return {name: MlpParams.from_dict(d) for name, d in data.items()}
