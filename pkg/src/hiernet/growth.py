"""Hierarchical network growth.

The outer loop alternates full training with an inner loop that freezes the
current network and repeatedly appends a small block of neurons.  Each block
is initialized by the extension search: the small-architecture network whose
normalized response is best aligned with the current residual.  Homogeneity of
the activation makes the normalization an exact rescaling of the weights.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DegenerateInputError,
    DegenerateSearchError,
    DomainError,
    SingularSystemError,
)
from .loss import DEFAULT_SPEC, LossSpec, Objective, TrainingSet, inner
from .net import (
    Activation,
    Architecture,
    WeightSet,
    direct_sum,
    param_count,
    prefix_outputs,
    scale_weights,
)
from .optim import FrozenMask, OptimConfig, train

log = logging.getLogger(__name__)

GOLDEN_KAPPA = (math.sqrt(5.0) - 1.0) / 2.0
STEP_RULES = ("exact_line_search", "theoretical_alpha", "joint_alpha_beta")


@dataclass(frozen=True)
class GrowthConfig:
    star_arch: Architecture = Architecture((2, 3, 1))
    kappa: float = 0.9
    l_max: int = 8
    search_restarts: int = 64
    search_ascent_steps: int = 200
    search_lr: float = 0.02
    step_rule: str = "exact_line_search"
    # inner loop stops once the optimality indicator drops below this
    c_opt_exit: float = 1e-3
    # constants for the theoretical step size (unobservable, user supplied)
    assumed_L: float = 1.0
    assumed_size_ratio: float = 1.0

    def __post_init__(self):
        if not isinstance(self.star_arch, Architecture):
            object.__setattr__(self, "star_arch", Architecture(self.star_arch))
        if not 0.0 < self.kappa < 1.0:
            raise DomainError(f"kappa must lie in (0, 1), got {self.kappa}")
        if self.kappa <= GOLDEN_KAPPA:
            log.info("kappa=%s is below (sqrt(5)-1)/2; step-count guarantees do not apply", self.kappa)
        if self.l_max < 0:
            raise DomainError("l_max must be >= 0")
        if self.search_restarts < 1 or self.search_ascent_steps < 0:
            raise DomainError("search budget must be positive")
        if self.step_rule not in STEP_RULES:
            raise DomainError(f"step_rule must be one of {STEP_RULES}")

    @property
    def mu(self) -> float:
        """Loss fraction a competitor must reach for the step-count bound."""
        return (self.kappa - math.sqrt(1.0 - self.kappa)) ** 2

    def with_(self, **kw) -> "GrowthConfig":
        return replace(self, **kw)


@dataclass
class ExtensionResult:
    wstar: WeightSet
    objective_value: float
    alpha: float = float("nan")
    beta: float = 0.0
    loss_before: float = float("nan")
    loss_after: float = float("nan")
    restart_index: int = -1
    ascent_iterations: int = 0
    initial_objectives: np.ndarray | None = None


# scaling helpers ------------------------------------------------------------


def _scale_exponents(arch: Architecture) -> np.ndarray:
    """Per-parameter exponent e with ``scale(a, W) == W * a**e``."""
    d = arch.depth
    parts = []
    for i, (r, c) in enumerate(arch.layer_shapes()):
        parts.append(np.full(r * c, 1.0 / (d + 1)))
        parts.append(np.full(r, 1.0 if i == d else (i + 1) / (d + 1)))
    return np.concatenate(parts)


def _final_layer_slice(arch: Architecture) -> slice:
    r, c = arch.layer_shapes()[-1]
    p = param_count(arch)
    return slice(p - r * c - r, p)


# extension search --------------------------------------------------------------


def wstar_search(residual, ts: TrainingSet, spec: LossSpec = DEFAULT_SPEC,
                 cfg: GrowthConfig = GrowthConfig(), seed=0,
                 objective: Objective | None = None) -> ExtensionResult:
    """Maximize ``residual . HR(W)`` over the small architecture with ``|HR(W)| <= 1``.

    Multi-start projected ascent: every restart draws uniform weights in
    [-1, 1], rescales them to unit response norm and follows the gradient of
    the scale-invariant objective ``residual . z / |z|`` with Adam, rescaling
    after each step.  Negating the final layer flips the sign of the response,
    so every candidate starts with a non-negative objective.
    """
    arch = cfg.star_arch
    obj = objective if objective is not None else Objective(ts, spec)
    gamma = ts.point_weights
    r = np.asarray(residual, dtype=np.float64)
    if r.shape != (ts.n,):
        raise DegenerateInputError(f"residual must have length {ts.n}")
    rg = gamma * r
    R = cfg.search_restarts
    p = param_count(arch)
    expo = _scale_exponents(arch)
    last = _final_layer_slice(arch)
    rng = np.random.default_rng(seed)
    P = rng.uniform(-1.0, 1.0, size=(R, p))

    def evaluate(P):
        Z = obj.responses_batch(P, arch)
        nrm = np.sqrt(np.maximum((Z * Z) @ gamma, 0.0))
        return Z, nrm

    def normalize(P, Z, nrm):
        # homogeneity: rescaling the weights rescales the response exactly
        alive = nrm > 0
        c = np.where(alive, 1.0 / np.where(alive, nrm, 1.0), 1.0)
        return P * c[:, None] ** expo[None, :], Z * c[:, None], alive

    Z, nrm = evaluate(P)
    if not np.any(nrm > 0):
        raise DegenerateSearchError("all extension candidates realize zero on the samples")
    P, Z, alive = normalize(P, Z, nrm)
    f = np.where(alive, Z @ rg, -np.inf)
    flip = alive & (f < 0)
    P[flip, last] *= -1.0
    Z[flip] *= -1.0
    f[flip] *= -1.0
    initial = f.copy()
    best_f = f.copy()
    best_P = P.copy()
    best_it = np.zeros(R, dtype=int)

    m = np.zeros_like(P)
    v = np.zeros_like(P)
    b1, b2, eps = 0.9, 0.999, 1e-12
    for t in range(1, cfg.search_ascent_steps + 1):
        if not np.any(alive):
            break
        rz = Z @ rg
        # gradient of r.z/|z| at |z| = 1 in the weighted inner product
        seeds = rg[None, :] - rz[:, None] * (Z * gamma[None, :])
        seeds[~alive] = 0.0
        G = obj.pullback_batch(P, arch, seeds)
        m = b1 * m + (1 - b1) * G
        v = b2 * v + (1 - b2) * G * G
        step = cfg.search_lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        P = np.where(alive[:, None], P + step, P)
        Z, nrm = evaluate(P)
        P, Z, alive = normalize(P, Z, nrm)
        f = np.where(alive, Z @ rg, -np.inf)
        better = f > best_f
        best_f = np.where(better, f, best_f)
        best_P[better] = P[better]
        best_it[better] = t

    k = int(np.argmax(best_f))
    wstar = WeightSet.from_vector(arch, best_P[k])
    z = obj.responses(wstar)
    zn = math.sqrt(inner(z, z, gamma))
    if zn == 0.0:
        raise DegenerateSearchError("best extension candidate realizes zero on the samples")
    if abs(zn - 1.0) > 1e-12:
        wstar = scale_weights(1.0 / zn, wstar)
        z = obj.responses(wstar)
    value = inner(r, z, gamma)
    if value < 0.0:
        # only possible for a zero residual up to rounding; the zero network is optimal
        value = 0.0
    return ExtensionResult(
        wstar=wstar,
        objective_value=value,
        restart_index=k,
        ascent_iterations=int(best_it[k]),
        initial_objectives=initial,
    )


# step sizes -----------------------------------------------------------------------


def _gamma_for(vec, gamma):
    if gamma is None:
        return np.full(len(vec), 1.0 / len(vec))
    if isinstance(gamma, TrainingSet):
        return gamma.point_weights
    return np.asarray(gamma, dtype=np.float64)


def exact_line_search_alpha(residual, wstar_response, gamma=None) -> float:
    """Minimizer of ``|residual - a z|^2`` over ``a``."""
    g = _gamma_for(residual, gamma)
    zz = inner(wstar_response, wstar_response, g)
    if zz == 0.0:
        raise DegenerateInputError("extension response is zero")
    return inner(residual, wstar_response, g) / zz


def theoretical_alpha(kappa: float, L_assumed: float, size_ratio: float, loss_f: float) -> float:
    """Step size ``(1-kappa) / (4 L sqrt(size_ratio)) * sqrt(loss)``."""
    if not 0.0 < kappa < 1.0:
        raise DomainError("kappa must lie in (0, 1)")
    if L_assumed <= 0 or size_ratio <= 0 or loss_f < 0:
        raise DomainError("L and size ratio must be positive, loss non-negative")
    return (1.0 - kappa) / (4.0 * L_assumed * math.sqrt(size_ratio)) * math.sqrt(loss_f)


def predicted_reduction_factor(kappa: float, L_assumed: float, size_ratio: float) -> float:
    """Guaranteed loss factor ``1 - (1-kappa)^2 / (8 L^2 size_ratio)`` of one extension."""
    return 1.0 - (1.0 - kappa) ** 2 / (8.0 * L_assumed**2 * size_ratio)


def step_budget(kappa: float, L_assumed: float, part_count: int) -> float:
    """Inner-loop step bound ``C_desc * part_count`` with ``C_desc = 8 L^2 log(3/2) / (1-kappa)^2``."""
    c_desc = 8.0 * L_assumed**2 * math.log(1.5) / (1.0 - kappa) ** 2
    return c_desc * part_count


def joint_alpha_beta(residual, old_response, new_response, gamma=None):
    """Least-squares ``(alpha, beta)`` for ``|residual - beta*old - alpha*new|^2``."""
    g = _gamma_for(residual, gamma)
    oo = inner(old_response, old_response, g)
    nn = inner(new_response, new_response, g)
    on = inner(old_response, new_response, g)
    det = oo * nn - on * on
    if not det > 1e-12 * oo * nn or oo == 0.0 or nn == 0.0:
        raise SingularSystemError("old and new responses are (nearly) parallel")
    ro = inner(residual, old_response, g)
    rn = inner(residual, new_response, g)
    beta = (nn * ro - on * rn) / det
    alpha = (oo * rn - on * ro) / det
    return alpha, beta


# inner loop -------------------------------------------------------------------------


@dataclass
class InnerTrace:
    extensions: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    epochs: int = 0
    c_opt: float = float("nan")
    stop_reason: str = ""
    # final training phase of the inner loop
    final_grad_norm: float = float("nan")


def _trainable_template(arch) -> WeightSet:
    return WeightSet.from_vector(arch, np.ones(param_count(arch)))


def inner_extend(w0: WeightSet, ts: TrainingSet, spec: LossSpec = DEFAULT_SPEC,
                 cfg: GrowthConfig = GrowthConfig(), opt_cfg: OptimConfig = OptimConfig(),
                 seed=0, objective: Objective | None = None):
    """Freeze ``w0`` and append up to ``l_max`` extension blocks.

    Each iteration trains the parameters added so far, searches for the next
    block on the current residual and appends it scaled by the step rule.
    Blocks added earlier in the same call stay trainable; the shared output
    bias is trainable as well, since the extensions contribute to it.  A final
    training phase leaves the output stationary in the trainable parameters.
    Returns ``(weights, InnerTrace)``.
    """
    if cfg.star_arch.depth != w0.depth or cfg.star_arch.input_width != w0.arch.input_width:
        raise DomainError(
            f"extension architecture {cfg.star_arch.widths} incompatible with {w0.arch.widths}"
        )
    obj = objective if objective is not None else Objective(ts, spec)
    gamma = ts.point_weights
    trace = InnerTrace()
    W = w0
    # entries: 1 trainable, 0 frozen; direct_sum keeps block structure
    M = WeightSet.zeros(w0.arch)
    star_template = _trainable_template(cfg.star_arch)
    rng = np.random.default_rng(seed)
    cur_loss, _, _ = obj.loss_grad(W.to_vector(), W.arch)
    trace.losses.append(cur_loss)

    for ell in range(cfg.l_max):
        if ell > 0:
            W, tr = train(W, ts, spec, FrozenMask.from_trainable(M), opt_cfg, objective=obj)
            trace.epochs += tr.epochs
            cur_loss = tr.final_loss
        hf = obj.responses(W)
        r = ts.responses - hf
        cur_loss = inner(r, r, gamma)
        if cur_loss == 0.0:
            trace.stop_reason = "zero loss"
            break
        res = wstar_search(r, ts, spec, cfg, seed=int(rng.integers(2**63)), objective=obj)
        c = 2.0 * res.objective_value / math.sqrt(cur_loss)
        if ell == 0:
            trace.c_opt = c
        if c < cfg.c_opt_exit:
            trace.stop_reason = "c_opt"
            break
        z = obj.responses(res.wstar)
        beta = 0.0
        if cfg.step_rule == "theoretical_alpha":
            alpha = theoretical_alpha(cfg.kappa, cfg.assumed_L, cfg.assumed_size_ratio, cur_loss)
        elif cfg.step_rule == "joint_alpha_beta":
            try:
                alpha, beta = joint_alpha_beta(r, hf, z, gamma)
                if alpha < 0 or 1.0 + beta < 0:
                    raise SingularSystemError("joint step leaves the homogeneous range")
            except SingularSystemError:
                alpha, beta = exact_line_search_alpha(r, z, gamma), 0.0
        else:
            alpha = exact_line_search_alpha(r, z, gamma)
        if alpha <= 0.0:
            trace.stop_reason = "no descent"
            break
        base = scale_weights(1.0 + beta, W) if beta else W
        cand = direct_sum(base, scale_weights(alpha, res.wstar))
        new_loss, _, _ = obj.loss_grad(cand.to_vector(), cand.arch)
        if not new_loss <= cur_loss:
            trace.stop_reason = "update rejected"
            break
        res.alpha, res.beta = alpha, beta
        res.loss_before, res.loss_after = cur_loss, new_loss
        res.initial_objectives = None
        trace.extensions.append(res)
        W = cand
        M = direct_sum(M, star_template)
        cur_loss = new_loss
        trace.losses.append(cur_loss)
    else:
        trace.stop_reason = "l_max"

    if trace.extensions:
        W, tr = train(W, ts, spec, FrozenMask.from_trainable(M), opt_cfg, objective=obj)
        trace.epochs += tr.epochs
        trace.final_grad_norm = tr.grad_norm
        trace.losses.append(tr.final_loss)
    return W, trace


# partial-depth variants ------------------------------------------------------------------


def _split(w: WeightSet, k: int):
    """Layers ``[0, k)`` as raw arrays and the suffix from layer ``k`` on as a WeightSet."""
    widths = w.arch.widths
    suffix = WeightSet(widths[k:], w.layers[k:])
    return w.layers[:k], suffix


def _require_pointwise(spec: LossSpec):
    if not getattr(spec.operator, "pointwise", False):
        raise DomainError("partial-layer training needs a pointwise output operator")


def mapped_training_set(w: WeightSet, d_prime: int, ts: TrainingSet, act: Activation):
    """Data mapped through the frozen prefix (including the activation)."""
    k = w.depth - d_prime
    Xp = act(prefix_outputs(w, k, ts.inputs, act))
    return TrainingSet(Xp, ts.responses, ts.point_weights)


def partial_final_layers(w: WeightSet, d_prime: int, ts: TrainingSet,
                         spec: LossSpec = DEFAULT_SPEC, cfg: GrowthConfig = GrowthConfig(),
                         opt_cfg: OptimConfig = OptimConfig(), seed=0):
    """Run :func:`inner_extend` on the last ``d_prime + 1`` layers only.

    Returns ``(weights, InnerTrace)``; the prefix layers are carried over
    unchanged.
    """
    d = w.depth
    if not 1 <= d_prime < d:
        raise DomainError(f"need 1 <= d_prime < depth={d}, got {d_prime}")
    _require_pointwise(spec)
    k = d - d_prime
    prefix, suffix = _split(w, k)
    mts = mapped_training_set(w, d_prime, ts, spec.activation)
    new_suffix, trace = inner_extend(suffix, mts, spec, cfg, opt_cfg, seed=seed)
    widths = w.arch.widths[:k] + new_suffix.arch.widths
    return WeightSet(widths, list(prefix) + list(new_suffix.layers)), trace


@dataclass
class SurrogateData:
    """Linearized least-squares problem for the first layers.

    The prefix (layers ``0..d_prime``, vector valued) enters the surrogate loss
    ``sum_i gamma_i (y~_i - J_i . P(x_i))^2`` where ``J_i`` is the derivative of
    the frozen suffix (including the activation in front of it) at the current
    prefix output, multiplied by the operator factor.
    """

    training_set: TrainingSet
    jacobian: np.ndarray
    prefix_layers: tuple
    delta_relu: float

    def prefix_output(self, layers=None):
        layers = self.prefix_layers if layers is None else layers
        return _vector_forward(layers, self.training_set.inputs, self.delta_relu)[-1]

    def loss(self, layers=None) -> float:
        P = self.prefix_output(layers)
        r = self.training_set.responses - np.einsum("ik,ik->i", self.jacobian, P)
        return inner(r, r, self.training_set.point_weights)

    def gradient(self, layers=None) -> np.ndarray:
        """Surrogate-loss gradient w.r.t. prefix parameters (canonical order)."""
        layers = self.prefix_layers if layers is None else layers
        X = self.training_set.inputs
        pre = _vector_forward(layers, X, self.delta_relu)
        r = self.training_set.responses - np.einsum("ik,ik->i", self.jacobian, pre[-1])
        seeds = (-2.0 * self.training_set.point_weights * r)[:, None] * self.jacobian
        return _vector_backward(layers, X, pre, seeds, self.delta_relu)


def _vector_forward(layers, X, delta):
    pre = []
    A = X
    for i, (W, B) in enumerate(layers):
        if i > 0:
            A = np.where(pre[-1] >= 0, pre[-1], delta * pre[-1])
        pre.append(A @ W.T + B)
    return pre


def _vector_backward(layers, X, pre, seeds, delta):
    G = seeds
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        A = X if i == 0 else np.where(pre[i - 1] >= 0, pre[i - 1], delta * pre[i - 1])
        grads.append((G.T @ A).ravel())
        grads.append(G.sum(axis=0))
        if i > 0:
            G = (G @ W) * np.where(pre[i - 1] >= 0, 1.0, delta)
    out = []
    for j in range(len(grads) - 2, -1, -2):
        out.append(grads[j])
        out.append(grads[j + 1])
    return np.concatenate(out)


def first_layers_modified_data(w: WeightSet, d_prime: int, ts: TrainingSet,
                               spec: LossSpec = DEFAULT_SPEC) -> SurrogateData:
    """Modified responses for training layers ``0..d_prime`` against a linearized suffix.

    With prefix output ``u_i = P(x_i)`` and suffix map ``S(phi(u))``,
    ``y~_i = r_i + J_i . u_i`` where ``r`` is the current residual and ``J_i``
    the operator-weighted suffix derivative.  The surrogate loss equals the
    true loss at the base point and has the same gradient there.
    """
    d = w.depth
    if not 0 <= d_prime < d:
        raise DomainError(f"need 0 <= d_prime < depth={d}, got {d_prime}")
    _require_pointwise(spec)
    delta = spec.activation.delta_relu
    prefix = tuple(w.layers[: d_prime + 1])
    suffix = w.layers[d_prime + 1 :]
    X = ts.inputs
    U = _vector_forward(prefix, X, delta)[-1]
    # derivative of the suffix output w.r.t. its pre-activation input u
    acts = [U]
    A = np.where(U >= 0, U, delta * U)
    pres = []
    for Ws, Bs in suffix:
        Z = A @ Ws.T + Bs
        pres.append(Z)
        A = np.where(Z >= 0, Z, delta * Z)
    G = np.ones((ts.n, 1))
    for j in range(len(suffix) - 1, -1, -1):
        Ws, _ = suffix[j]
        G = G @ Ws
        below = pres[j - 1] if j > 0 else acts[0]
        G = G * np.where(below >= 0, 1.0, delta)
    _, h, _ = spec.operator.stencil(ts)
    J = G * np.asarray(h)[:, None]
    F = (pres[-1][:, 0]) * np.asarray(h)
    r = ts.responses - F
    ytilde = r + np.einsum("ik,ik->i", J, U)
    if not (np.all(np.isfinite(J)) and np.all(np.isfinite(ytilde))):
        raise FloatingPointError("non-finite derivative in linearization")
    return SurrogateData(TrainingSet(X, ytilde, ts.point_weights), J, prefix, delta)


# outer loop ------------------------------------------------------------------------------


@dataclass
class RoundRecord:
    """State at the end of one outer round, after its full-training step."""

    round: int
    params: int
    loss: float
    wall_ms: float
    # cumulative over the run, inner-loop training included
    epochs: int
    extensions: int
    c_opt: float = float("nan")
    # loss right after the inner loop (round 0: the untrained initial loss)
    extended_loss: float = float("nan")
    extra: dict = field(default_factory=dict)

    @property
    def error(self) -> float:
        return math.sqrt(self.loss)


def adaptive_train(w_init: WeightSet, ts: TrainingSet, spec: LossSpec = DEFAULT_SPEC,
                   cfg: GrowthConfig = GrowthConfig(), opt_cfg: OptimConfig = OptimConfig(),
                   rounds: int = 10, seed=0, partial_depth: int | None = None,
                   inner_opt_cfg: OptimConfig | None = None, max_params: int | None = None,
                   on_round=None):
    """Grow a network by alternating inner extension and full training.

    Round 0 trains the initial network; every later round extends the current
    network with :func:`inner_extend` (or :func:`partial_final_layers` when
    ``partial_depth`` is set) and then trains all parameters.  Each record
    describes the trained network at the end of its round.  Stops early once
    the parameter count reaches ``max_params``.  ``on_round(record, weights)``
    may return a dict stored in ``record.extra``.  Returns
    ``(weights_list, records)``.
    """
    obj = Objective(ts, spec)
    inner_cfg = inner_opt_cfg or opt_cfg
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()

    def full_train(W, ell):
        return train(W, ts, spec, FrozenMask.none(W.arch),
                     opt_cfg.with_(seed=opt_cfg.seed + ell), objective=obj)

    L_init, _, _ = obj.loss_grad(w_init.to_vector(), w_init.arch)
    W, tr = full_train(w_init, 0)
    epochs = tr.epochs
    rec = RoundRecord(0, param_count(W.arch), tr.final_loss, (time.perf_counter() - t0) * 1e3,
                      epochs, 0, extended_loss=L_init)
    if on_round is not None:
        rec.extra = on_round(rec, W) or {}
    history, records = [W], [rec]
    for ell in range(1, rounds + 1):
        if max_params is not None and param_count(W.arch) >= max_params:
            break
        s = int(rng.integers(2**63))
        if partial_depth is None:
            We, itr = inner_extend(W, ts, spec, cfg, inner_cfg, seed=s, objective=obj)
        else:
            We, itr = partial_final_layers(W, partial_depth, ts, spec, cfg, inner_cfg, seed=s)
        epochs += itr.epochs
        Le, _, _ = obj.loss_grad(We.to_vector(), We.arch)
        if Le > records[-1].loss:
            # guard against rounding in the mapped-data path
            We, Le = W, records[-1].loss
        W, tr = full_train(We, ell)
        epochs += tr.epochs
        if tr.final_loss >= records[-1].loss * (1 - 1e-12):
            log.info("round %d: no strict decrease (%.3e)", ell, tr.final_loss)
        rec = RoundRecord(
            ell,
            param_count(W.arch),
            tr.final_loss,
            (time.perf_counter() - t0) * 1e3,
            epochs,
            len(itr.extensions),
            itr.c_opt,
            Le,
        )
        if on_round is not None:
            rec.extra = on_round(rec, W) or {}
        history.append(W)
        records.append(rec)
    return history, records
