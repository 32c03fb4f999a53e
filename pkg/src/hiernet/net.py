"""Dense Leaky-ReLU networks and the weight calculus used for growth.

A network is described by an :class:`Architecture` (layer widths) and a
:class:`WeightSet` holding one ``(W_i, B_i)`` pair per layer.  Weight sets are
immutable; every operation below returns a new one.

Canonical vectorization: for each layer ``i = 0..d`` the rows of ``W_i``
(row-major) followed by ``B_i``.  Masks, gradients and the serialized form all
use this order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _backend
from .errors import CompositionError, DomainError, PartitionError, ShapeError

FORMAT_NAME = "hiernet-weights"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    """Layer widths ``(w_0, ..., w_{d+1})`` of a scalar-output network."""

    widths: tuple[int, ...]

    def __init__(self, widths: Sequence[int]):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2:
            raise ShapeError(f"architecture needs at least 2 widths, got {widths}")
        if any(w < 1 for w in widths):
            raise ShapeError(f"widths must be positive, got {widths}")
        if widths[-1] != 1:
            raise ShapeError(f"output width must be 1, got {widths[-1]}")
        object.__setattr__(self, "widths", widths)

    @property
    def depth(self) -> int:
        return len(self.widths) - 2

    @property
    def input_width(self) -> int:
        return self.widths[0]

    def layer_shapes(self) -> list[tuple[int, int]]:
        """``(rows, cols)`` of each weight matrix."""
        w = self.widths
        return [(w[i + 1], w[i]) for i in range(len(w) - 1)]

    def __repr__(self) -> str:
        return f"Architecture{self.widths}"


def param_count(arch: Architecture | Sequence[int]) -> int:
    if not isinstance(arch, Architecture):
        arch = Architecture(arch)
    w = arch.widths
    return sum((w[i] + 1) * w[i + 1] for i in range(len(w) - 1))


@dataclass(frozen=True)
class Activation:
    """Leaky ReLU ``max(x, delta_relu * x)``."""

    delta_relu: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.delta_relu < 1.0:
            raise DomainError(f"delta_relu must lie in [0, 1), got {self.delta_relu}")

    def __call__(self, x):
        return np.maximum(x, self.delta_relu * np.asarray(x))


DEFAULT_ACTIVATION = Activation()


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


class WeightSet:
    """Weights ``(W_0, B_0, ..., W_d, B_d)`` conforming to an architecture."""

    __slots__ = ("arch", "layers", "_vec")

    def __init__(self, arch: Architecture | Sequence[int], layers):
        if not isinstance(arch, Architecture):
            arch = Architecture(arch)
        layers = tuple((_readonly(W), _readonly(B)) for W, B in layers)
        shapes = arch.layer_shapes()
        if len(layers) != len(shapes):
            raise ShapeError(f"expected {len(shapes)} layers, got {len(layers)}")
        for i, ((W, B), (r, c)) in enumerate(zip(layers, shapes)):
            if W.shape != (r, c) or B.shape != (r,):
                raise ShapeError(
                    f"layer {i}: expected W {(r, c)} and B {(r,)}, got {W.shape} and {B.shape}"
                )
        self.arch = arch
        self.layers = layers
        self._vec = None

    # construction -------------------------------------------------------

    @classmethod
    def zeros(cls, arch) -> "WeightSet":
        if not isinstance(arch, Architecture):
            arch = Architecture(arch)
        return cls(arch, [(np.zeros((r, c)), np.zeros(r)) for r, c in arch.layer_shapes()])

    @classmethod
    def from_vector(cls, arch, vec) -> "WeightSet":
        if not isinstance(arch, Architecture):
            arch = Architecture(arch)
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (param_count(arch),):
            raise ShapeError(f"expected vector of length {param_count(arch)}, got {vec.shape}")
        layers = []
        k = 0
        for r, c in arch.layer_shapes():
            W = vec[k : k + r * c].reshape(r, c)
            k += r * c
            B = vec[k : k + r]
            k += r
            layers.append((W, B))
        ws = cls(arch, layers)
        return ws

    @classmethod
    def random(cls, arch, rng: np.random.Generator, scale: float = 1.0, kind: str = "normal"):
        """Random weights; ``normal`` uses std ``scale``, ``uniform`` draws from [-scale, scale]."""
        if not isinstance(arch, Architecture):
            arch = Architecture(arch)
        n = param_count(arch)
        if kind == "normal":
            vec = rng.normal(0.0, scale, size=n)
        elif kind == "uniform":
            vec = rng.uniform(-scale, scale, size=n)
        else:
            raise ValueError(f"unknown kind {kind!r}")
        return cls.from_vector(arch, vec)

    # views ----------------------------------------------------------------

    @property
    def depth(self) -> int:
        return self.arch.depth

    def to_vector(self) -> np.ndarray:
        if self._vec is None:
            parts = []
            for W, B in self.layers:
                parts.append(W.ravel())
                parts.append(B)
            v = np.concatenate(parts)
            v.setflags(write=False)
            self._vec = v
        return self._vec

    def __len__(self) -> int:
        return param_count(self.arch)

    def __eq__(self, other) -> bool:
        if not isinstance(other, WeightSet):
            return NotImplemented
        return self.arch == other.arch and np.array_equal(self.to_vector(), other.to_vector())

    def __hash__(self):
        return hash((self.arch, self.to_vector().tobytes()))

    def __repr__(self) -> str:
        return f"WeightSet({self.arch.widths}, params={len(self)})"


# realization -----------------------------------------------------------


def realize_batch(weights: WeightSet, X, act: Activation = DEFAULT_ACTIVATION) -> np.ndarray:
    """Evaluate the network at every row of ``X``; returns a length-``m`` vector."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != weights.arch.input_width:
        raise ShapeError(f"inputs must have {weights.arch.input_width} columns, got shape {X.shape}")
    out = _backend.kernels.forward(
        weights.to_vector()[None, :], _backend.widths_array(weights.arch.widths), X, act.delta_relu
    )
    return out[0]


def realize(weights: WeightSet, act: Activation = DEFAULT_ACTIVATION, x=None) -> float:
    """Realization ``R(x, W)`` at a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (weights.arch.input_width,):
        raise ShapeError(f"input must have length {weights.arch.input_width}, got {x.shape}")
    return float(realize_batch(weights, x[None, :], act)[0])


def prefix_outputs(weights: WeightSet, n_layers: int, X, act: Activation = DEFAULT_ACTIVATION):
    """Output of the first ``n_layers`` affine layers (pre-activation, vector valued)."""
    A = np.asarray(X, dtype=np.float64)
    for i, (W, B) in enumerate(weights.layers[:n_layers]):
        if i > 0:
            A = act(A)
        A = A @ W.T + B
    return A


# calculus ----------------------------------------------------------------


def scale_weights(alpha: float, weights: WeightSet) -> WeightSet:
    """Homogeneous scaling: ``realize(scale_weights(a, W)) == a * realize(W)``."""
    alpha = float(alpha)
    if not alpha >= 0.0:
        raise DomainError(f"scaling factor must be >= 0, got {alpha}")
    dp1 = weights.depth + 1
    if alpha == 0.0:
        return WeightSet.zeros(weights.arch)
    if alpha == 1.0:
        return weights
    s = alpha ** (1.0 / dp1)
    layers = []
    for i, (W, B) in enumerate(weights.layers):
        bias_factor = alpha if i == weights.depth else alpha ** ((i + 1) / dp1)
        layers.append((s * W, bias_factor * B))
    return WeightSet(weights.arch, layers)


def negate(weights: WeightSet) -> WeightSet:
    """Flip the sign of the realization by negating the final layer."""
    layers = list(weights.layers)
    W, B = layers[-1]
    layers[-1] = (-W, -B)
    return WeightSet(weights.arch, layers)


def direct_sum(a: WeightSet, b: WeightSet) -> WeightSet:
    """Block merge whose realization is ``realize(a) + realize(b)``."""
    if a.depth != b.depth:
        raise CompositionError(f"depth mismatch: {a.depth} vs {b.depth}")
    if a.arch.input_width != b.arch.input_width:
        raise CompositionError(
            f"input width mismatch: {a.arch.input_width} vs {b.arch.input_width}"
        )
    d = a.depth
    widths = [a.arch.widths[0]]
    widths += [wa + wb for wa, wb in zip(a.arch.widths[1:-1], b.arch.widths[1:-1])]
    widths.append(1)
    layers = []
    for i, ((Wa, Ba), (Wb, Bb)) in enumerate(zip(a.layers, b.layers)):
        if i == d:
            layers.append((np.hstack([Wa, Wb]), Ba + Bb))
        elif i == 0:
            layers.append((np.vstack([Wa, Wb]), np.concatenate([Ba, Bb])))
        else:
            W = np.zeros((Wa.shape[0] + Wb.shape[0], Wa.shape[1] + Wb.shape[1]))
            W[: Wa.shape[0], : Wa.shape[1]] = Wa
            W[Wa.shape[0] :, Wa.shape[1] :] = Wb
            layers.append((W, np.concatenate([Ba, Bb])))
    return WeightSet(Architecture(widths), layers)


def split_final_layer(weights: WeightSet, group_size: int) -> list[WeightSet]:
    """Split the last hidden layer into contiguous groups of ``group_size`` neurons.

    The output bias is shared equally among the parts, so the part
    realizations sum to the original one.
    """
    d = weights.depth
    if d < 1:
        raise PartitionError("network has no hidden layer to split")
    wd = weights.arch.widths[-2]
    if group_size < 1 or wd % group_size:
        raise PartitionError(f"group size {group_size} does not divide last hidden width {wd}")
    parts_n = wd // group_size
    if parts_n == 1:
        return [weights]
    Wd, Bd = weights.layers[d]
    Wp, Bp = weights.layers[d - 1]
    widths = list(weights.arch.widths[:-2]) + [group_size, 1]
    parts = []
    for j in range(parts_n):
        sl = slice(j * group_size, (j + 1) * group_size)
        layers = list(weights.layers[: d - 1])
        layers.append((Wp[sl], Bp[sl]))
        layers.append((Wd[:, sl], Bd / parts_n))
        parts.append(WeightSet(widths, layers))
    return parts


def hat_network(a: float, b: float, c: float, direction, delta_relu: float = 0.0) -> WeightSet:
    """Width-3 network realizing the hat function of ``direction . x``.

    Zero outside ``(a, c)``, linear on ``[a, b]`` and ``[b, c]``, and equal to 1
    at ``b``.  The linear parts of the leaky activation cancel in the output
    combination, so dividing the output row by ``1 - delta_relu`` makes the hat
    exact for every admissible slope.
    """
    if not (a < b < c):
        raise DomainError(f"need a < b < c, got {(a, b, c)}")
    if not 0.0 <= delta_relu < 1.0:
        raise DomainError(f"delta_relu must lie in [0, 1), got {delta_relu}")
    direction = np.atleast_1d(np.asarray(direction, dtype=np.float64))
    W0 = np.vstack([direction, direction, direction])
    B0 = np.array([-a, -b, -c], dtype=np.float64)
    left = 1.0 / (b - a)
    right = 1.0 / (c - b)
    W1 = np.array([[left, -left - right, right]]) / (1.0 - delta_relu)
    return WeightSet((direction.size, 3, 1), [(W0, B0), (W1, np.zeros(1))])


# serialization -----------------------------------------------------------


def dumps(weights: WeightSet, act: Activation = DEFAULT_ACTIVATION) -> str:
    payload = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "delta_relu": act.delta_relu,
        "widths": list(weights.arch.widths),
        "params": [float(v) for v in weights.to_vector()],
    }
    return json.dumps(payload)


def loads(text: str) -> tuple[WeightSet, Activation]:
    payload = json.loads(text)
    if payload.get("format") != FORMAT_NAME:
        raise ValueError("not a hiernet weight file")
    if payload.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported weight file version {payload.get('version')}")
    arch = Architecture(payload["widths"])
    ws = WeightSet.from_vector(arch, np.array(payload["params"], dtype=np.float64))
    return ws, Activation(float(payload["delta_relu"]))


def save(path, weights: WeightSet, act: Activation = DEFAULT_ACTIVATION) -> None:
    Path(path).write_text(dumps(weights, act))


def load(path) -> tuple[WeightSet, Activation]:
    return loads(Path(path).read_text())
