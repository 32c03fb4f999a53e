"""Computable indicators for a trained network.

* optimality indicator from the extension search,
* stability constant of a decomposition into parts,
* the part-alignment inequality it implies,
* residual of the stationarity identity of the inner loop,
* a Monte-Carlo generalization-error estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AlreadyOptimalError, DegenerateInputError, InstabilityError
from .growth import GrowthConfig, wstar_search
from .loss import DEFAULT_SPEC, LossSpec, Objective, TrainingSet, inner
from .net import DEFAULT_ACTIVATION, WeightSet, param_count, prefix_outputs, realize_batch

ASSUMED_L_VALUES = (1.0, 2.0, 5.0, 10.0)


@dataclass
class OptimalityReport:
    c_opt: float
    objective_value: float
    loss: float
    # largest size ratio #chi/#chi* for which the loss cannot be halved, per assumed L
    size_ratio_bounds: dict = field(default_factory=dict)
    restart_index: int = -1
    ascent_iterations: int = 0

    @property
    def implied_size_ratio_bound(self) -> float:
        return self.size_ratio_bounds.get(1.0, float("nan"))


def size_ratio_bound(c_opt: float, L_assumed: float) -> float:
    if c_opt == 0.0:
        return math.inf
    return 1.0 / (16.0 * L_assumed**2 * c_opt**2)


def c_opt_from_values(objective_value: float, loss: float) -> float:
    if loss == 0.0:
        raise AlreadyOptimalError("loss is zero, network is already optimal on the data")
    return 2.0 * objective_value / math.sqrt(loss)


def c_opt(w: WeightSet, ts: TrainingSet, spec: LossSpec = DEFAULT_SPEC,
          cfg: GrowthConfig = GrowthConfig(), seed=0, objective: Objective | None = None):
    """Optimality indicator ``2 r.HR(W*) / sqrt(L)`` in [0, 2]."""
    obj = objective if objective is not None else Objective(ts, spec)
    r = ts.responses - obj.responses(w)
    L = inner(r, r, ts.point_weights)
    if L == 0.0:
        raise AlreadyOptimalError("loss is zero, network is already optimal on the data")
    res = wstar_search(r, ts, spec, cfg, seed=seed, objective=obj)
    c = c_opt_from_values(res.objective_value, L)
    return OptimalityReport(
        c_opt=c,
        objective_value=res.objective_value,
        loss=L,
        size_ratio_bounds={a: size_ratio_bound(c, a) for a in ASSUMED_L_VALUES},
        restart_index=res.restart_index,
        ascent_iterations=res.ascent_iterations,
    )


@dataclass
class StabilityReport:
    l_constant: float
    part_count: int
    part_norms: list
    aggregate_norm: float
    # w* #chi* <= L #chi; flagged, never enforced
    size_condition: bool | None = None


def _stability_from_vectors(Z, gamma) -> StabilityReport:
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    norms = [math.sqrt(inner(z, z, gamma)) for z in Z]
    total = Z.sum(axis=0)
    agg = math.sqrt(inner(total, total, gamma))
    if agg == 0.0:
        raise InstabilityError("part responses cancel completely")
    L = math.sqrt(math.fsum(n * n for n in norms)) / agg
    return StabilityReport(L, Z.shape[0], norms, agg)


def stability_constant(parts, ts: TrainingSet, spec: LossSpec = DEFAULT_SPEC,
                       whole: WeightSet | None = None) -> StabilityReport:
    """Smallest ``L`` with ``L^2 |sum z_j|^2 >= sum |z_j|^2`` for ``z_j = HR(part_j)``."""
    parts = list(parts)
    if not parts:
        raise DegenerateInputError("need at least one part")
    obj = Objective(ts, spec)
    Z = np.array([obj.responses(p) for p in parts])
    rep = _stability_from_vectors(Z, ts.point_weights)
    if whole is not None:
        rep.size_condition = (
            len(parts) * param_count(parts[0].arch) <= rep.l_constant * param_count(whole.arch)
        )
    return rep


def stability_from_responses(Z, gamma) -> StabilityReport:
    return _stability_from_vectors(Z, gamma)


def independence_bound_check(Z, probe, gamma=None):
    """Both sides of ``|y.sum z| / |sum z| <= L sqrt(w) max_j |y.z_j| / |z_j|``.

    Returns ``(lhs, rhs, holds)``; ``holds`` allows relative rounding of 1e-12.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    probe = np.asarray(probe, dtype=np.float64)
    if gamma is None:
        gamma = np.full(Z.shape[1], 1.0 / Z.shape[1])
    norms = np.array([math.sqrt(inner(z, z, gamma)) for z in Z])
    if np.any(norms == 0.0):
        raise DegenerateInputError("a part has zero response")
    rep = _stability_from_vectors(Z, gamma)
    total = Z.sum(axis=0)
    lhs = abs(inner(probe, total, gamma)) / rep.aggregate_norm
    per = max(abs(inner(probe, z, gamma)) / n for z, n in zip(Z, norms))
    rhs = rep.l_constant * math.sqrt(Z.shape[0]) * per
    return lhs, rhs, lhs <= rhs * (1 + 1e-12) + 1e-300


def stationarity_identity_residual(w0: WeightSet, w_ell: WeightSet, ts: TrainingSet,
                                   spec: LossSpec = DEFAULT_SPEC, eps: float = 1e-300) -> float:
    """``| |HR(W_l) - HR(W_0)|^2 - (L(W_0) - L(W_l)) | / L(W_0)``; zero at stationarity."""
    obj = Objective(ts, spec)
    g = ts.point_weights
    h0 = obj.responses(w0)
    h1 = obj.responses(w_ell)
    r0 = ts.responses - h0
    r1 = ts.responses - h1
    dh = h1 - h0
    L0 = inner(r0, r0, g)
    L1 = inner(r1, r1, g)
    # (L0 - L1) - |dh|^2 = 2 r1 . dh, evaluated directly to avoid cancellation
    mismatch = abs(2.0 * inner(r1, dh, g))
    return mismatch / max(L0, eps)


def generalization_estimate(w: WeightSet, target, sampler, m: int, seed=0,
                            act=DEFAULT_ACTIVATION, shard: int = 65536) -> float:
    """Monte-Carlo estimate of ``E |F(x) - y(x)|^2`` over ``m`` fresh samples.

    ``sampler(rng, k)`` returns ``k`` inputs; ``target(X)`` the responses.
    Shards use independent child seeds and are reduced in order.
    """
    ss = np.random.SeedSequence(seed)
    n_shards = max(1, -(-m // shard))
    children = ss.spawn(n_shards)
    parts = []
    left = m
    for child in children:
        k = min(shard, left)
        left -= k
        rng = np.random.default_rng(child)
        X = sampler(rng, k)
        diff = realize_batch(w, X, act) - np.asarray(target(X), dtype=np.float64)
        parts.append(math.fsum(diff * diff))
    return math.fsum(parts) / m


def layer_constants(w: WeightSet, ts: TrainingSet, act=DEFAULT_ACTIVATION):
    """``(C_stab, C_W)``: largest intermediate output on the data and largest weight/bias.

    ``C_stab`` runs over layers ``1..d`` and ``C_W`` over weight layers ``1..d``.
    """
    d = w.depth
    c_stab = 0.0
    for i in range(1, d + 1):
        out = prefix_outputs(w, i + 1, ts.inputs, act)
        c_stab = max(c_stab, float(np.max(np.abs(out))))
    c_w = 0.0
    for k in range(1, d + 1):
        W, B = w.layers[k]
        c_w = max(c_w, float(np.max(np.abs(W))), float(np.max(np.abs(B))))
    return c_stab, c_w


def layer_stability(w: WeightSet, layer: int, ts: TrainingSet, act=DEFAULT_ACTIVATION):
    """Stability reports for every neuron of ``layer`` split into its incoming terms.

    Neuron ``j`` of layer ``i`` equals ``B_ij + sum_k W_ijk phi(prev_k)``; the
    ``w_i + 1`` terms are the parts.
    """
    if not 1 <= layer <= w.depth:
        raise DegenerateInputError(f"layer must be in 1..{w.depth}")
    prev = act(prefix_outputs(w, layer, ts.inputs, act))
    W, B = w.layers[layer]
    reports = []
    for j in range(W.shape[0]):
        Z = np.vstack([(W[j][:, None] * prev.T), np.full((1, ts.n), B[j])])
        Z = Z[np.any(Z != 0, axis=1)]
        try:
            reports.append(_stability_from_vectors(Z, ts.point_weights))
        except InstabilityError:
            reports.append(None)
    return reports
