"""Gradients, full-batch Adam with best-state backtracking, and stall detection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError, NumericDivergence, ShapeError
from .loss import DEFAULT_SPEC, LossSpec, Objective, TrainingSet
from .net import Architecture, WeightSet, param_count


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    epsilon: float = 1e-8
    max_epochs: int = 2000
    stall_window: int = 200
    stall_rel_tol: float = 1e-3
    # stop once the masked gradient norm falls to this value (0 disables)
    grad_tol: float = 0.0
    # "adam", "gd" (gradient descent with Armijo backtracking) or "agd"
    # (Nesterov-accelerated gradient with backtracking and function-value restart)
    method: str = "adam"
    batch_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise DomainError("learning_rate must be > 0")
        for name in ("adam_beta1", "adam_beta2"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise DomainError(f"{name} must lie in (0, 1)")
        if not self.epsilon > 0:
            raise DomainError("epsilon must be > 0")
        if self.max_epochs < 0:
            raise DomainError("max_epochs must be >= 0")
        if self.stall_window < 1:
            raise DomainError("stall_window must be positive")
        if not self.stall_rel_tol > 0:
            raise DomainError("stall_rel_tol must be > 0")
        if self.grad_tol < 0:
            raise DomainError("grad_tol must be >= 0")
        if self.method not in ("adam", "gd", "agd"):
            raise DomainError(f"unknown method {self.method!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise DomainError("batch_size must be positive")

    def with_(self, **kw) -> "OptimConfig":
        return replace(self, **kw)


class FrozenMask:
    """Per-parameter freeze flags in canonical vectorization order."""

    __slots__ = ("flags",)

    def __init__(self, flags):
        f = np.array(flags, dtype=bool).reshape(-1)
        f.setflags(write=False)
        self.flags = f

    @classmethod
    def none(cls, arch) -> "FrozenMask":
        return cls(np.zeros(param_count(arch), dtype=bool))

    @classmethod
    def all(cls, arch) -> "FrozenMask":
        return cls(np.ones(param_count(arch), dtype=bool))

    @classmethod
    def from_trainable(cls, weights: WeightSet) -> "FrozenMask":
        """Mask from a weight set whose entries are 1 where trainable, 0 where frozen."""
        return cls(weights.to_vector() == 0.0)

    @property
    def trainable(self) -> np.ndarray:
        return ~self.flags

    def check(self, arch: Architecture):
        if self.flags.shape != (param_count(arch),):
            raise ShapeError(
                f"mask has {self.flags.size} entries, architecture has {param_count(arch)}"
            )

    def __len__(self):
        return self.flags.size


@dataclass
class TrainTrace:
    """Per-epoch record of one :func:`train` call.

    ``losses`` holds the best loss seen so far, starting with the initial loss.
    """

    losses: list = field(default_factory=list)
    epochs: int = 0
    stop_reason: str = ""
    grad_norm: float = float("nan")

    @property
    def initial_loss(self):
        return self.losses[0]

    @property
    def final_loss(self):
        return self.losses[-1]


def gradient(weights: WeightSet, ts: TrainingSet, spec: LossSpec = DEFAULT_SPEC,
             mask: FrozenMask | None = None) -> np.ndarray:
    """Exact loss gradient; frozen positions are zero."""
    _, g, _ = Objective(ts, spec).loss_grad(weights.to_vector(), weights.arch)
    if mask is not None:
        mask.check(weights.arch)
        g = np.where(mask.flags, 0.0, g)
    return g


def is_stalled(losses, cfg: OptimConfig) -> bool:
    """Relative improvement over the last ``stall_window`` entries below tolerance."""
    w = cfg.stall_window
    if len(losses) <= w:
        return False
    old = losses[-1 - w]
    new = losses[-1]
    return (old - new) / max(old, cfg.epsilon) < cfg.stall_rel_tol


def _batches(n, size, rng):
    order = rng.permutation(n)
    return [np.sort(order[i : i + size]) for i in range(0, n, size)]


def _sub_objective(obj: Objective, idx) -> Objective:
    sub = object.__new__(Objective)
    K = obj.K
    rows = (idx[:, None] * K + np.arange(K)).ravel()
    sub.ts = obj.ts
    sub.spec = obj.spec
    sub.X = np.ascontiguousarray(obj.X[rows])
    sub.coef = np.ascontiguousarray(obj.coef[rows])
    sub.K = K
    sub.y = np.ascontiguousarray(obj.y[idx])
    g = obj.gamma[idx]
    sub.gamma = np.ascontiguousarray(g / g.sum()) if g.sum() > 0 else g
    sub.delta = obj.delta
    return sub


def train(weights: WeightSet, ts: TrainingSet, spec: LossSpec = DEFAULT_SPEC,
          mask: FrozenMask | None = None, cfg: OptimConfig = OptimConfig(),
          objective: Objective | None = None):
    """Minimize the loss over the non-frozen parameters.

    Returns ``(best_weights, trace)``.  The returned weights are the best
    iterate seen, so their loss never exceeds the starting loss; the one
    exception is ``agd`` stopping on ``grad_tol``, which returns the iterate
    that met the tolerance (its loss can exceed the best by rounding).  Raises
    :class:`NumericDivergence` carrying the best state if a non-finite loss
    appears.
    """
    arch = weights.arch
    if mask is None:
        mask = FrozenMask.none(arch)
    mask.check(arch)
    obj = objective if objective is not None else Objective(ts, spec)
    trainable = mask.trainable
    idx = np.flatnonzero(trainable)
    vec = np.array(weights.to_vector(), dtype=np.float64)

    loss0, g, _ = obj.loss_grad(vec, arch)
    if not math.isfinite(loss0):
        raise NumericDivergence("initial loss is not finite", weights, loss0)
    trace = TrainTrace(losses=[loss0])
    best_loss, best_vec = loss0, vec.copy()
    if idx.size == 0 or cfg.max_epochs == 0:
        trace.stop_reason = "nothing to train" if idx.size == 0 else "max_epochs"
        trace.grad_norm = float(np.linalg.norm(g[idx])) if idx.size else 0.0
        return weights, trace

    def finish(reason, gn):
        trace.stop_reason = reason
        trace.grad_norm = gn
        if best_loss == loss0:
            return weights, trace
        return WeightSet.from_vector(arch, best_vec), trace

    def diverged(cur):
        state = weights if best_loss == loss0 else WeightSet.from_vector(arch, best_vec)
        raise NumericDivergence(f"non-finite loss {cur} at epoch {trace.epochs}", state, best_loss)

    rng = np.random.default_rng(cfg.seed)
    loss = loss0
    if cfg.method == "adam":
        m = np.zeros(idx.size)
        v = np.zeros(idx.size)
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        t = 0
        for epoch in range(1, cfg.max_epochs + 1):
            gi = g[idx]
            gn = float(np.linalg.norm(gi))
            if cfg.grad_tol and gn <= cfg.grad_tol:
                return finish("gradient", gn)
            if cfg.batch_size is None or cfg.batch_size >= ts.n:
                steps = [(None, gi)]
            else:
                steps = [(b, None) for b in _batches(ts.n, cfg.batch_size, rng)]
            for batch, gb in steps:
                if gb is None:
                    _, gfull, _ = _sub_objective(obj, batch).loss_grad(vec, arch)
                    gb = gfull[idx]
                t += 1
                m = b1 * m + (1.0 - b1) * gb
                v = b2 * v + (1.0 - b2) * (gb * gb)
                mhat = m / (1.0 - b1**t)
                vhat = v / (1.0 - b2**t)
                vec[idx] -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.epsilon)
            loss, g, _ = obj.loss_grad(vec, arch)
            trace.epochs = epoch
            if not math.isfinite(loss):
                diverged(loss)
            if loss < best_loss:
                best_loss, best_vec = loss, vec.copy()
            trace.losses.append(best_loss)
            if is_stalled(trace.losses, cfg):
                return finish("stall", float(np.linalg.norm(g[idx])))
        return finish("max_epochs", float(np.linalg.norm(g[idx])))

    if cfg.method == "agd":
        best_vec, best_loss, reason, gn = _accelerated(vec, loss, g, idx, obj, arch, cfg, trace)
        if best_loss > loss0:
            # a stationary iterate a rounding error above the start: keep the start
            best_vec, best_loss = vec, loss0
        return finish(reason, gn)

    # gradient descent with Armijo backtracking
    step = cfg.learning_rate
    for epoch in range(1, cfg.max_epochs + 1):
        gi = g[idx]
        gn2 = float(gi @ gi)
        gn = math.sqrt(gn2)
        if cfg.grad_tol and gn <= cfg.grad_tol:
            return finish("gradient", gn)
        while True:
            trial = vec.copy()
            trial[idx] -= step * gi
            tl, tg, _ = obj.loss_grad(trial, arch)
            if math.isfinite(tl) and tl <= loss - 1e-4 * step * gn2:
                break
            step *= 0.5
            if step < 1e-30:
                return finish("line search", gn)
        vec, loss, g = trial, tl, tg
        step *= 2.0
        trace.epochs = epoch
        if loss < best_loss:
            best_loss, best_vec = loss, vec.copy()
        trace.losses.append(best_loss)
        if not cfg.grad_tol and is_stalled(trace.losses, cfg):
            return finish("stall", float(np.linalg.norm(g[idx])))
    return finish("max_epochs", float(np.linalg.norm(g[idx])))




def _accelerated(vec, loss, g, idx, obj, arch, cfg, trace):
    """Nesterov momentum with backtracking and gradient-based restarts.

    A step ``1/L`` is accepted once ``L`` bounds the gradient's change along it;
    gradient differences stay accurate long after loss differences drown in
    rounding, so this reaches small gradient tolerances.  Momentum restarts when
    it points uphill.  Returns ``(best_vec, best_loss, reason, grad_norm)``.
    """
    best_vec, best_loss = vec.copy(), loss
    prev = vec.copy()
    t = 1.0
    step = cfg.learning_rate
    gn = float(np.linalg.norm(g[idx]))
    for epoch in range(1, cfg.max_epochs + 1):
        if cfg.grad_tol and gn <= cfg.grad_tol:
            return vec, loss, "gradient", gn
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = vec.copy()
        y[idx] += (t - 1.0) / t_next * (vec[idx] - prev[idx])
        fy, gy, _ = obj.loss_grad(y, arch)
        gyi = gy[idx]
        while True:
            trial = y.copy()
            trial[idx] -= step * gyi
            tl, tg, _ = obj.loss_grad(trial, arch)
            if math.isfinite(tl):
                moved = step * float(np.linalg.norm(gyi))
                if step * float(np.linalg.norm(tg[idx] - gyi)) <= moved and tl <= fy + 1e-12 * abs(fy):
                    break
            step *= 0.5
            if step < 1e-30:
                return best_vec, best_loss, "line search", gn
        trace.epochs = epoch
        if float(gyi @ (trial[idx] - vec[idx])) > 0.0:
            # momentum points uphill: drop it
            t_next = 1.0
        prev, vec, loss, g, t = vec, trial, tl, tg, t_next
        gn = float(np.linalg.norm(g[idx]))
        step *= 1.2
        if loss < best_loss:
            best_vec, best_loss = vec.copy(), loss
        trace.losses.append(best_loss)
        if not cfg.grad_tol and is_stalled(trace.losses, cfg):
            return best_vec, best_loss, "stall", gn
    if cfg.grad_tol and gn <= cfg.grad_tol:
        return vec, loss, "gradient", gn
    return best_vec, best_loss, "max_epochs", gn
