"""Weighted least-squares loss with a linear output operator.

The loss of a network ``F`` is ``sum_i gamma_i (y_i - (HF)(x_i))**2`` where
``H`` is one of the operators below.  Every operator is expressed as a
stencil: ``(HF)(x_i) = sum_k c_ik F(x_i + o_k)``, which lets the kernels
evaluate and differentiate all variants the same way.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _backend
from .errors import DegenerateInputError, ShapeError
from .net import DEFAULT_ACTIVATION, Activation, WeightSet, direct_sum, scale_weights


class TrainingSet:
    """Inputs ``x_i``, responses ``y_i`` and point weights ``gamma_i`` (summing to 1)."""

    def __init__(self, inputs, responses, point_weights=None):
        X = np.array(inputs, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        y = np.array(responses, dtype=np.float64).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ShapeError(f"inputs {X.shape} and responses {y.shape} disagree")
        n = y.shape[0]
        if n < 1:
            raise ShapeError("training set is empty")
        if point_weights is None:
            g = np.full(n, 1.0 / n)
        else:
            g = np.array(point_weights, dtype=np.float64).reshape(-1)
            if g.shape != (n,):
                raise ShapeError(f"expected {n} point weights, got {g.shape}")
            if np.any(g < 0):
                raise ValueError("point weights must be non-negative")
            if abs(math.fsum(g) - 1.0) > 1e-12:
                raise ValueError(f"point weights must sum to 1, got {math.fsum(g)!r}")
        for a in (X, y, g):
            a.setflags(write=False)
        self.inputs = X
        self.responses = y
        self.point_weights = g

    @property
    def n(self) -> int:
        return self.responses.shape[0]

    @property
    def input_width(self) -> int:
        return self.inputs.shape[1]

    def with_responses(self, responses) -> "TrainingSet":
        return TrainingSet(self.inputs, responses, self.point_weights)

    def __len__(self):
        return self.n


# operators ----------------------------------------------------------------


@dataclass(frozen=True)
class Identity:
    def stencil(self, ts: TrainingSet):
        return ts.inputs, np.ones(ts.n), 1

    pointwise = True


@dataclass(frozen=True)
class Diagonal:
    """Fixed per-sample rescaling ``(HF)(x_i) = h_i F(x_i)``."""

    factors: tuple

    def __init__(self, factors):
        object.__setattr__(self, "factors", tuple(float(f) for f in np.ravel(factors)))

    def stencil(self, ts: TrainingSet):
        h = np.asarray(self.factors)
        if h.shape != (ts.n,):
            raise ShapeError(f"diagonal operator has {h.size} factors for {ts.n} samples")
        return ts.inputs, h, 1

    pointwise = True


@dataclass(frozen=True)
class DirectionalDerivative:
    """Central difference approximation of ``v . grad F``.

    Networks here are piecewise linear, so the result is exact away from kinks
    within ``step`` of a sample and approximate otherwise.
    """

    direction: tuple
    step: float = 1e-5

    def __init__(self, direction, step=1e-5):
        object.__setattr__(self, "direction", tuple(float(v) for v in np.ravel(direction)))
        object.__setattr__(self, "step", float(step))

    def stencil(self, ts: TrainingSet):
        v = np.asarray(self.direction)
        if v.shape != (ts.input_width,):
            raise ShapeError(f"direction has length {v.size}, inputs have {ts.input_width}")
        h = self.step
        X = np.empty((2 * ts.n, ts.input_width))
        X[0::2] = ts.inputs + h * v
        X[1::2] = ts.inputs - h * v
        coef = np.tile([0.5 / h, -0.5 / h], ts.n)
        return X, coef, 2

    pointwise = False


@dataclass(frozen=True)
class LossSpec:
    operator: object = field(default_factory=Identity)
    activation: Activation = DEFAULT_ACTIVATION


DEFAULT_SPEC = LossSpec()


class Objective:
    """Precomputed stencil for one (training set, loss spec) pair."""

    def __init__(self, ts: TrainingSet, spec: LossSpec = DEFAULT_SPEC):
        X, coef, K = spec.operator.stencil(ts)
        self.ts = ts
        self.spec = spec
        self.X = np.ascontiguousarray(X)
        self.coef = np.ascontiguousarray(coef, dtype=np.float64)
        self.K = int(K)
        self.y = np.ascontiguousarray(ts.responses)
        self.gamma = np.ascontiguousarray(ts.point_weights)
        self.delta = spec.activation.delta_relu

    def _check(self, arch):
        if arch.input_width != self.ts.input_width:
            raise ShapeError(
                f"network input width {arch.input_width} != data width {self.ts.input_width}"
            )

    def responses_batch(self, P, arch) -> np.ndarray:
        """``H R(W)`` on the samples for each parameter row of ``P``; shape (R, n)."""
        self._check(arch)
        F = _backend.kernels.forward(P, _backend.widths_array(arch.widths), self.X, self.delta)
        return (F * self.coef).reshape(F.shape[0], -1, self.K).sum(axis=2)

    def responses(self, weights: WeightSet) -> np.ndarray:
        return self.responses_batch(weights.to_vector()[None, :], weights.arch)[0]

    def pullback_batch(self, P, arch, seeds) -> np.ndarray:
        """Gradient of ``sum_i seeds_i (H R(W))_i`` w.r.t. each parameter row."""
        ext = np.repeat(seeds, self.K, axis=1) * self.coef
        return _backend.kernels.vjp(
            P, _backend.widths_array(arch.widths), self.X, self.delta, ext
        )

    def loss_grad(self, vec, arch):
        """``(loss, gradient, responses)`` at a flat parameter vector."""
        self._check(arch)
        return _backend.kernels.loss_grad(
            vec,
            _backend.widths_array(arch.widths),
            self.X,
            self.coef,
            self.y,
            self.gamma,
            self.K,
            self.delta,
        )


def objective(ts: TrainingSet, spec: LossSpec = DEFAULT_SPEC) -> Objective:
    return Objective(ts, spec)


# inner products -------------------------------------------------------------


def inner(u, v, gamma) -> float:
    """Weighted inner product ``sum gamma_i u_i v_i`` (exactly rounded sum)."""
    return math.fsum(np.asarray(gamma) * np.asarray(u) * np.asarray(v))


def norm(u, gamma) -> float:
    return math.sqrt(inner(u, u, gamma))


# public operations ------------------------------------------------------------


def response_vector(weights: WeightSet, ts: TrainingSet, spec: LossSpec = DEFAULT_SPEC):
    return Objective(ts, spec).responses(weights)


def residual(weights: WeightSet, ts: TrainingSet, spec: LossSpec = DEFAULT_SPEC):
    return ts.responses - response_vector(weights, ts, spec)


def loss(weights: WeightSet, ts: TrainingSet, spec: LossSpec = DEFAULT_SPEC) -> float:
    r = residual(weights, ts, spec)
    return inner(r, r, ts.point_weights)


def quadratic_expansion(F: WeightSet, G: WeightSet, alpha: float, ts: TrainingSet,
                        spec: LossSpec = DEFAULT_SPEC):
    """Ingredients of ``L(F + aG) - L(F) = -2a (y - HF).HG + a^2 |HG|^2``.

    Returns ``(loss_delta, inner_term, norm_term)``; ``loss_delta`` is evaluated
    directly on the combined network, independently of the right-hand side.
    """
    obj = Objective(ts, spec)
    gamma = ts.point_weights
    hf = obj.responses(F)
    hg = obj.responses(G)
    if alpha >= 0 and F.depth == G.depth and F.arch.input_width == G.arch.input_width:
        combined = obj.responses(direct_sum(F, scale_weights(alpha, G)))
    else:
        combined = hf + alpha * hg
    r0 = ts.responses - hf
    r1 = ts.responses - combined
    loss_delta = inner(r1, r1, gamma) - inner(r0, r0, gamma)
    return loss_delta, inner(r0, hg, gamma), inner(hg, hg, gamma)


def alignment(residual_vec, candidate_response, ts: TrainingSet) -> float:
    """Weighted cosine between the residual and a candidate response."""
    gamma = ts.point_weights
    a = norm(residual_vec, gamma)
    b = norm(candidate_response, gamma)
    if a == 0.0 or b == 0.0:
        raise DegenerateInputError("alignment of a zero-norm vector is undefined")
    c = inner(residual_vec, candidate_response, gamma) / (a * b)
    return max(-1.0, min(1.0, c))


# CSV -------------------------------------------------------------------------


def read_csv(path) -> TrainingSet:
    """Read ``x_1..x_k, y[, gamma]`` with a header row; missing gamma means uniform."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = [[float(v) for v in row] for row in reader if row]
    if "y" not in header:
        raise ValueError(f"{path}: header must contain a 'y' column")
    xcols = [i for i, h in enumerate(header) if h.startswith("x_")]
    xcols.sort(key=lambda i: int(header[i][2:]))
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    y = data[:, header.index("y")]
    gamma = data[:, header.index("gamma")] if "gamma" in header else None
    if gamma is not None:
        gamma = gamma / math.fsum(gamma)
    return TrainingSet(data[:, xcols], y, gamma)


def write_csv(ts: TrainingSet, path, include_gamma: bool = True) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = [f"x_{j + 1}" for j in range(ts.input_width)] + ["y"]
        if include_gamma:
            header.append("gamma")
        w.writerow(header)
        for i in range(ts.n):
            row = [repr(float(v)) for v in ts.inputs[i]] + [repr(float(ts.responses[i]))]
            if include_gamma:
                row.append(repr(float(ts.point_weights[i])))
            w.writerow(row)
