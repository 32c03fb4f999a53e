import math

import numpy as np
import pytest

from hiernet.errors import DomainError, NumericDivergence, ShapeError
from hiernet.loss import Diagonal, LossSpec, TrainingSet, loss
from hiernet.net import Activation, WeightSet, realize_batch
from hiernet.optim import FrozenMask, OptimConfig, TrainTrace, gradient, is_stalled, train


def make_ts(n=40, k=2, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, k))
    return TrainingSet(X, np.sin(3 * X[:, 0]) + X[:, -1] ** 2)


def kink_distance(w, X, act):
    """Smallest |pre-activation| over all hidden units and samples."""
    A = X
    dist = np.inf
    for i, (W, B) in enumerate(w.layers[:-1]):
        Z = A @ W.T + B
        dist = min(dist, float(np.min(np.abs(Z))))
        A = act(Z)
    return dist


def central_difference(w, ts, spec, h=1e-6):
    v = w.to_vector().copy()
    g = np.empty_like(v)
    for j in range(v.size):
        v[j] += h
        lp = loss(WeightSet.from_vector(w.arch, v), ts, spec)
        v[j] -= 2 * h
        lm = loss(WeightSet.from_vector(w.arch, v), ts, spec)
        v[j] += h
        g[j] = (lp - lm) / (2 * h)
    return g


@pytest.mark.parametrize("widths", [(1, 2, 1), (2, 5, 1), (3, 4, 3, 1), (2, 3, 3, 3, 1)])
def test_gradient_matches_finite_differences(widths, backend):
    spec = LossSpec(activation=Activation(0.05))
    ts = make_ts(k=widths[0])
    rng = np.random.default_rng(sum(widths))
    for _ in range(50):
        w = WeightSet.random(widths, rng)
        if kink_distance(w, ts.inputs, spec.activation) > 1e-3:
            break
    else:
        pytest.fail("no kink-free sample")
    g = gradient(w, ts, spec)
    fd = central_difference(w, ts, spec)
    assert np.max(np.abs(g - fd)) <= 1e-5 * max(1.0, np.max(np.abs(fd)))


def test_gradient_respects_mask():
    ts = make_ts()
    w = WeightSet.random((2, 3, 1), np.random.default_rng(0))
    mask = FrozenMask(np.arange(13) % 2 == 0)
    g = gradient(w, ts, mask=mask)
    assert np.all(g[mask.flags] == 0.0)
    with pytest.raises(ShapeError):
        gradient(w, ts, mask=FrozenMask(np.zeros(5, dtype=bool)))


def test_mask_constructors():
    w = WeightSet.from_vector((2, 3, 1), np.r_[np.ones(5), np.zeros(8)])
    m = FrozenMask.from_trainable(w)
    assert m.trainable.sum() == 5 and len(m) == 13
    assert FrozenMask.all((2, 3, 1)).flags.all()
    assert not FrozenMask.none((2, 3, 1)).flags.any()


def test_config_validation():
    for bad in ({"learning_rate": 0}, {"adam_beta1": 1.0}, {"stall_window": 0},
                {"method": "sgd"}, {"batch_size": 0}, {"grad_tol": -1}):
        with pytest.raises(DomainError):
            OptimConfig(**bad)


def test_train_reduces_loss_and_is_monotone():
    ts = make_ts()
    w = WeightSet.random((2, 8, 1), np.random.default_rng(1), scale=0.5)
    best, tr = train(w, ts, cfg=OptimConfig(max_epochs=300, learning_rate=1e-2))
    assert tr.final_loss < tr.initial_loss
    assert all(a >= b for a, b in zip(tr.losses, tr.losses[1:]))
    assert loss(best, ts) == pytest.approx(tr.final_loss, rel=1e-12)
    assert tr.epochs <= 300


def test_train_never_worse_than_start():
    # a huge step would overshoot; best-state backtracking returns the start
    ts = make_ts()
    w = WeightSet.random((2, 4, 1), np.random.default_rng(2))
    best, tr = train(w, ts, cfg=OptimConfig(max_epochs=5, learning_rate=50.0))
    assert loss(best, ts) <= loss(w, ts)


def test_frozen_parameters_untouched():
    ts = make_ts()
    w = WeightSet.random((2, 4, 1), np.random.default_rng(3))
    flags = np.zeros(17, dtype=bool)
    flags[:8] = True
    best, _ = train(w, ts, mask=FrozenMask(flags), cfg=OptimConfig(max_epochs=50, learning_rate=1e-2))
    assert np.array_equal(best.to_vector()[:8], w.to_vector()[:8])
    assert not np.array_equal(best.to_vector()[8:], w.to_vector()[8:])


def test_all_frozen_returns_input():
    ts = make_ts()
    w = WeightSet.random((2, 4, 1), np.random.default_rng(3))
    best, tr = train(w, ts, mask=FrozenMask.all(w.arch))
    assert best is w and tr.stop_reason == "nothing to train"


def test_divergence_raises_with_best_state():
    ts = make_ts()
    w = WeightSet.random((2, 4, 1), np.random.default_rng(4))
    with pytest.raises(NumericDivergence) as info:
        train(w, ts, cfg=OptimConfig(max_epochs=50, learning_rate=1e300))
    assert info.value.loss <= loss(w, ts)


def test_stall_detection():
    cfg = OptimConfig(stall_window=3, stall_rel_tol=0.1)
    assert not is_stalled([1.0, 0.9, 0.8], cfg)
    assert is_stalled([1.0, 1.0, 1.0, 0.99], cfg)
    assert not is_stalled([1.0, 0.8, 0.7, 0.5], cfg)
    ts = make_ts()
    w = WeightSet.zeros((2, 3, 1))
    # the zero network has zero gradient in every weight except the output bias
    _, tr = train(w, ts, cfg=OptimConfig(max_epochs=5000, learning_rate=1e-2, stall_window=20))
    assert tr.stop_reason == "stall" and tr.epochs < 5000


def test_gradient_descent_reaches_tolerance():
    # linear least squares in the output layer only: convex, GD converges
    ts = make_ts()
    w = WeightSet.random((2, 2, 1), np.random.default_rng(5))
    mask = FrozenMask(np.r_[np.ones(6, dtype=bool), np.zeros(3, dtype=bool)])
    _, tr = train(w, ts, mask=mask, cfg=OptimConfig(method="gd", grad_tol=1e-8,
                                                    learning_rate=1.0, max_epochs=20000))
    assert tr.stop_reason == "gradient" and tr.grad_norm <= 1e-8


def test_minibatch_is_deterministic():
    ts = make_ts(n=64)
    w = WeightSet.random((2, 5, 1), np.random.default_rng(6))
    cfg = OptimConfig(max_epochs=20, batch_size=16, learning_rate=1e-2, seed=3)
    a, ta = train(w, ts, cfg=cfg)
    b, tb = train(w, ts, cfg=cfg)
    assert a == b and ta.losses == tb.losses
    assert ta.final_loss < ta.initial_loss


def test_diagonal_operator_training():
    rng = np.random.default_rng(7)
    X = rng.uniform(-1, 1, size=(30, 1))
    h = rng.uniform(0.5, 2.0, size=30)
    target = WeightSet.random((1, 3, 1), rng)
    ts = TrainingSet(X, h * realize_batch(target, X))
    spec = LossSpec(Diagonal(h))
    w = WeightSet.random((1, 6, 1), rng, scale=0.5)
    _, tr = train(w, ts, spec, cfg=OptimConfig(max_epochs=2000, learning_rate=1e-2))
    assert tr.final_loss < 0.1 * tr.initial_loss


def test_trace_properties():
    t = TrainTrace(losses=[3.0, 2.0])
    assert t.initial_loss == 3.0 and t.final_loss == 2.0
    assert math.isnan(TrainTrace().grad_norm)


def test_accelerated_reaches_tolerance_on_ill_conditioned_problem():
    # the output-layer problem plain descent cannot finish in 20000 epochs
    ts = make_ts()
    w = WeightSet.random((2, 6, 1), np.random.default_rng(5))
    mask = FrozenMask(np.r_[np.ones(18, dtype=bool), np.zeros(7, dtype=bool)])
    cfg = OptimConfig(method="agd", grad_tol=1e-8, learning_rate=1.0, max_epochs=20000)
    best, tr = train(w, ts, mask=mask, cfg=cfg)
    assert tr.stop_reason == "gradient" and tr.grad_norm <= 1e-8
    assert all(a >= b for a, b in zip(tr.losses, tr.losses[1:]))
    assert np.linalg.norm(gradient(best, ts, mask=mask)) <= 1e-8
    assert np.array_equal(best.to_vector()[:18], w.to_vector()[:18])


def test_accelerated_stalls_without_tolerance():
    ts = make_ts()
    w = WeightSet.random((2, 4, 1), np.random.default_rng(8))
    best, tr = train(w, ts, cfg=OptimConfig(method="agd", max_epochs=5000, stall_window=50))
    assert tr.stop_reason in ("stall", "max_epochs", "line search")
    assert loss(best, ts) <= loss(w, ts)
