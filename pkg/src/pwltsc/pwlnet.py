"""Small piecewise-linear network core: affine layers, ReLU/BReLU, optimizers.

Everything runs in float64 numpy. A network records the activations of its
last forward pass so that :meth:`BreluMlp.backward` can return parameter
gradients; there is no general autodiff graph.

>>> grid = brelu_bias_grid(1.0, 0.0)
>>> brelu_forward(np.array([0.5]), grid)
array([3.5  , 1.324, 0.748, 0.252, 0.   ])
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DegenerateDistributionError, NumericError, ShapeError, StateError

# Offsets of the five-point bias grid for a standardized input, as printed.
# The +0.834 is not the mirror of -0.824; kept verbatim.
PRINTED_OFFSETS = (-3.0, -0.824, -0.248, 0.248, 0.834)


@dataclass
class BiasGrid:
    """Per-dimension sorted biases ``beta[i, k]`` for a BReLU activation."""

    biases: np.ndarray  # (d, q)
    nu: np.ndarray = None
    eta: np.ndarray = None

    def __post_init__(self):
        b = np.atleast_2d(np.asarray(self.biases, dtype=np.float64))
        if b.shape[1] < 1:
            raise ShapeError("bias grid needs q >= 1 biases per dimension")
        if b.shape[1] > 1 and np.any(np.diff(b, axis=1) <= 0):
            raise ShapeError("bias grid rows must be strictly increasing")
        self.biases = b
        d = b.shape[0]
        self.nu = np.ones(d) if self.nu is None else np.broadcast_to(np.asarray(self.nu, float), (d,)).copy()
        self.eta = np.zeros(d) if self.eta is None else np.broadcast_to(np.asarray(self.eta, float), (d,)).copy()

    @property
    def dim(self) -> int:
        return self.biases.shape[0]

    @property
    def q(self) -> int:
        return self.biases.shape[1]

    @property
    def out_dim(self) -> int:
        return self.biases.size


def brelu_bias_grid(nu, eta, dim: Optional[int] = None, offsets: Sequence[float] = PRINTED_OFFSETS) -> BiasGrid:
    """Bias grid ``offsets * nu + eta`` for each input dimension.

    ``nu`` and ``eta`` may be scalars or per-dimension arrays; ``dim`` broadcasts
    scalars to that many dimensions.
    """
    nu = np.atleast_1d(np.asarray(nu, dtype=np.float64))
    eta = np.atleast_1d(np.asarray(eta, dtype=np.float64))
    if not np.all(np.isfinite(nu)) or np.any(nu <= 0):
        raise DegenerateDistributionError(f"bias grid needs nu > 0, got {nu.tolist()}")
    if dim is None:
        dim = max(nu.size, eta.size)
    nu = np.broadcast_to(nu, (dim,))
    eta = np.broadcast_to(eta, (dim,))
    off = np.asarray(offsets, dtype=np.float64)
    biases = nu[:, None] * off[None, :] + eta[:, None]
    return BiasGrid(biases, nu, eta)


def relu_grid(dim: int) -> BiasGrid:
    """A single zero bias per dimension; BReLU with it is plain ReLU."""
    return BiasGrid(np.zeros((dim, 1)))


def brelu_forward(x, grid: BiasGrid) -> np.ndarray:
    """Entries ``max(0, x_i - beta_{i,k})``, dimension-major, bias-ascending.

    Accepts a vector ``(d,)`` or a batch ``(n, d)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != grid.dim:
        raise ShapeError(f"BReLU expects {grid.dim} input dims, got {x.shape[-1]}")
    out = np.maximum(0.0, x[..., :, None] - grid.biases)
    return out.reshape(*x.shape[:-1], grid.out_dim)


def _brelu_mask(pre: np.ndarray, grid: BiasGrid) -> np.ndarray:
    # strict inequality: subgradient 0 exactly at the kink
    m = pre[..., :, None] > grid.biases
    return m.reshape(*pre.shape[:-1], grid.out_dim)


Activation = Union[str, BiasGrid]


@dataclass
class Dense:
    """Affine map ``W x + b`` followed by an activation.

    ``activation`` is ``"identity"``, ``"relu"`` or a :class:`BiasGrid`.
    """

    weight: np.ndarray
    bias: np.ndarray
    activation: Activation = "identity"

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64, ndmin=2)
        self.bias = np.array(self.bias, dtype=np.float64, ndmin=1)
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} != ({self.weight.shape[0]},)")
        if isinstance(self.activation, BiasGrid) and self.activation.dim != self.weight.shape[0]:
            raise ShapeError(
                f"BReLU grid covers {self.activation.dim} dims, affine emits {self.weight.shape[0]}"
            )
        if not isinstance(self.activation, BiasGrid) and self.activation not in ("identity", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        if isinstance(self.activation, BiasGrid):
            return self.activation.out_dim
        return self.weight.shape[0]

    def activate(self, pre):
        if isinstance(self.activation, BiasGrid):
            return brelu_forward(pre, self.activation)
        if self.activation == "relu":
            return np.maximum(0.0, pre)
        return pre

    def activation_grad(self, pre, dout):
        if isinstance(self.activation, BiasGrid):
            g = self.activation
            masked = dout * _brelu_mask(pre, g)
            return masked.reshape(*pre.shape, g.q).sum(axis=-1)
        if self.activation == "relu":
            return dout * (pre > 0)
        return dout

    def pattern(self, pre) -> np.ndarray:
        """Boolean on/off state of every kinked unit (empty for identity)."""
        if isinstance(self.activation, BiasGrid):
            return _brelu_mask(pre, self.activation)
        if self.activation == "relu":
            return pre > 0
        return np.zeros(pre.shape[:-1] + (0,), dtype=bool)


class BreluMlp:
    """Stack of :class:`Dense` layers.

    ``forward`` keeps the inputs and pre-activations of the last call;
    ``backward`` consumes them. Parameters are exposed as a flat dict of the
    underlying arrays (``"0.weight"``, ``"0.bias"``, ...) so optimizers can
    update them in place.
    """

    def __init__(self, layers: List[Dense]):
        if not layers:
            raise ShapeError("network needs at least one layer")
        for t in range(1, len(layers)):
            if layers[t - 1].out_dim != layers[t].in_dim:
                raise ShapeError(
                    f"layer {t - 1} emits width {layers[t - 1].out_dim}, layer {t} expects {layers[t].in_dim}"
                )
        self.layers = layers
        self._cache = None

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self) -> Dict[str, np.ndarray]:
        out = {}
        for t, layer in enumerate(self.layers):
            out[f"{t}.weight"] = layer.weight
            out[f"{t}.bias"] = layer.bias
        return out

    def weight_params(self) -> Dict[str, np.ndarray]:
        return {f"{t}.weight": layer.weight for t, layer in enumerate(self.layers)}

    def n_params(self) -> int:
        return sum(p.size for p in self.params().values())

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"network expects input width {self.in_dim}, got {x.shape[-1]}")
        cache = []
        h = x
        for layer in self.layers:
            pre = h @ layer.weight.T + layer.bias
            cache.append((h, pre))
            h = layer.activate(pre)
        self._cache = cache
        return h

    __call__ = forward

    def backward(self, dout):
        """Gradients of a scalar loss given ``dL/d(output)``.

        Returns ``(grads, dx)`` where ``grads`` mirrors :meth:`params`.
        For batched input the parameter gradients are summed over the batch.
        """
        if self._cache is None:
            raise StateError("backward called without a recorded forward pass")
        g = np.asarray(dout, dtype=np.float64)
        grads = {}
        for t in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[t]
            h, pre = self._cache[t]
            if g.shape != np.shape(layer.activate(pre)):
                raise ShapeError(f"output gradient shape {g.shape} does not match layer {t}")
            gpre = layer.activation_grad(pre, g)
            if gpre.ndim == 1:
                grads[f"{t}.weight"] = np.outer(gpre, h)
                grads[f"{t}.bias"] = gpre.copy()
            else:
                grads[f"{t}.weight"] = gpre.T @ h
                grads[f"{t}.bias"] = gpre.sum(axis=0)
            g = gpre @ layer.weight
        return grads, g

    def activation_pattern(self, x) -> np.ndarray:
        """Concatenated on/off state of every kinked unit for input ``x``."""
        x = np.asarray(x, dtype=np.float64)
        parts = []
        h = x
        for layer in self.layers:
            pre = h @ layer.weight.T + layer.bias
            parts.append(layer.pattern(pre))
            h = layer.activate(pre)
        return np.concatenate(parts, axis=-1)

    def copy(self) -> "BreluMlp":
        return BreluMlp.from_dict(self.to_dict())

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            act = layer.activation
            entry = {
                "shape": list(layer.weight.shape),
                "weight": layer.weight.ravel().tolist(),
                "bias": layer.bias.tolist(),
            }
            if isinstance(act, BiasGrid):
                entry["activation"] = "brelu"
                entry["grid"] = {
                    "q": act.q,
                    "biases": act.biases.ravel().tolist(),
                    "nu": act.nu.tolist(),
                    "eta": act.eta.tolist(),
                }
            else:
                entry["activation"] = act
            layers.append(entry)
        return {"kind": "brelu_mlp", "layers": layers}

    @classmethod
    def from_dict(cls, doc: dict) -> "BreluMlp":
        layers = []
        for t, entry in enumerate(doc["layers"]):
            shape = tuple(entry["shape"])
            w = np.asarray(entry["weight"], dtype=np.float64)
            if w.size != shape[0] * shape[1]:
                raise ShapeError(f"layer {t}: weight has {w.size} values, shape says {shape}")
            act = entry["activation"]
            if act == "brelu":
                gd = entry["grid"]
                b = np.asarray(gd["biases"], dtype=np.float64).reshape(-1, gd["q"])
                act = BiasGrid(b, gd["nu"], gd["eta"])
            layers.append(Dense(w.reshape(shape), entry["bias"], act))
        return cls(layers)


def mlp_forward(net: BreluMlp, x) -> np.ndarray:
    return net.forward(x)


def backprop(net: BreluMlp, dout):
    return net.backward(dout)


def build_mlp(
    sizes: Sequence[int],
    activations: Sequence[str],
    rng: np.random.Generator,
    offsets: Sequence[float] = PRINTED_OFFSETS,
) -> BreluMlp:
    """He-initialised MLP.

    ``sizes`` are the affine widths ``[in, h1, ..., out]``; ``activations`` has
    one entry per affine map from ``{"brelu", "relu", "identity"}``. A BReLU
    layer widens its output by ``len(offsets)``, which the next affine map
    absorbs.

    >>> net = build_mlp([3, 8, 2], ["brelu", "identity"], np.random.default_rng(0))
    >>> [layer.weight.shape for layer in net.layers]
    [(8, 3), (2, 40)]
    """
    if len(activations) != len(sizes) - 1:
        raise ShapeError("need one activation per affine map")
    layers = []
    fan_in = sizes[0]
    for out, act in zip(sizes[1:], activations):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out, fan_in))
        b = np.zeros(out)
        if act == "brelu":
            grid = brelu_bias_grid(1.0, 0.0, dim=out, offsets=offsets)
            layers.append(Dense(w, b, grid))
            fan_in = grid.out_dim
        else:
            layers.append(Dense(w, b, act))
            fan_in = out
    return BreluMlp(layers)


# -- optimizers ---------------------------------------------------------------


@dataclass
class OptimizerConfig:
    method: str = "sgd"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.method not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer method {self.method!r}")


@dataclass
class Optimizer:
    config: OptimizerConfig
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        for name, g in grads.items():
            if name not in params:
                raise ShapeError(f"gradient for unknown parameter {name!r}")
            if np.shape(g) != params[name].shape:
                raise ShapeError(f"{name}: gradient shape {np.shape(g)} != {params[name].shape}")
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
        cfg = self.config
        if cfg.method == "sgd":
            for name, g in grads.items():
                params[name] -= cfg.lr * g
            return params
        self.t += 1
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            params[name] -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        return params


def optimizer_step(params, grads, optimizer: Optimizer):
    """Apply one update in place and return ``params``."""
    return optimizer.step(params, grads)


def save_json(doc: dict, path) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())


# -- piecewise-linearity check ------------------------------------------------


def segment_check(f, a, b, n: int = 1001, pattern=None) -> Dict[str, float]:
    """Sample ``f`` on ``n`` points of the segment from ``a`` to ``b``.

    Returns the largest jump between neighbouring samples and the largest
    absolute second difference over consecutive triples that share one
    activation pattern (every triple when ``pattern`` is None). For a
    continuous piecewise-linear map the jump shrinks with the step and the
    in-region second differences vanish up to rounding.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    t = np.linspace(0.0, 1.0, n)
    X = a + t[:, None] * (b - a)
    Y = np.asarray(f(X), dtype=np.float64).reshape(n, -1)
    jump = float(np.max(np.abs(np.diff(Y, axis=0)))) if n > 1 else 0.0
    d2 = np.abs(Y[2:] - 2 * Y[1:-1] + Y[:-2]).max(axis=1) if n > 2 else np.zeros(0)
    if pattern is not None and d2.size:
        P = np.asarray(pattern(X)).reshape(n, -1)
        same = np.all(P[2:] == P[1:-1], axis=1) & np.all(P[1:-1] == P[:-2], axis=1)
        d2 = d2[same]
    return {"max_jump": jump, "max_second_diff": float(d2.max()) if d2.size else 0.0, "regions_checked": int(d2.size)}
