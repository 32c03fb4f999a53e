import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hiernet.errors import DegenerateInputError, ShapeError
from hiernet.loss import (
    Diagonal,
    DirectionalDerivative,
    LossSpec,
    Objective,
    TrainingSet,
    alignment,
    inner,
    loss,
    norm,
    quadratic_expansion,
    read_csv,
    residual,
    response_vector,
    write_csv,
)
from hiernet.net import Activation, WeightSet, realize_batch


def make_ts(n=20, k=2, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, k))
    g = rng.uniform(0.1, 1, size=n)
    return TrainingSet(X, rng.normal(size=n), g / g.sum())


def test_trainingset_validation():
    with pytest.raises(ShapeError):
        TrainingSet(np.zeros((3, 2)), np.zeros(4))
    with pytest.raises(ValueError):
        TrainingSet(np.zeros((3, 2)), np.zeros(3), [0.5, 0.5, 0.5])
    with pytest.raises(ValueError):
        TrainingSet(np.zeros((2, 2)), np.zeros(2), [1.5, -0.5])
    ts = TrainingSet(np.zeros((4, 1)), np.zeros(4))
    assert np.all(ts.point_weights == 0.25)


def test_zero_network_loss_is_weighted_mean_square():
    ts = make_ts()
    w = WeightSet.zeros((2, 3, 1))
    expect = math.fsum(ts.point_weights * ts.responses**2)
    assert loss(w, ts) == pytest.approx(expect, rel=1e-15)


def test_exact_fit_has_zero_loss():
    w = WeightSet.random((2, 3, 1), np.random.default_rng(0))
    X = np.random.default_rng(1).normal(size=(30, 2))
    ts = TrainingSet(X, realize_batch(w, X))
    assert loss(w, ts) == 0.0
    assert np.all(residual(w, ts) == 0.0)


def test_diagonal_operator():
    ts = make_ts(n=10)
    h = np.linspace(-2, 2, 10)
    w = WeightSet.random((2, 4, 1), np.random.default_rng(2))
    spec = LossSpec(Diagonal(h))
    np.testing.assert_allclose(response_vector(w, ts, spec), h * realize_batch(w, ts.inputs),
                               rtol=1e-14)
    with pytest.raises(ShapeError):
        response_vector(w, ts, LossSpec(Diagonal(np.ones(3))))


def test_directional_derivative_of_linear_region():
    # all inputs in the region where every hidden unit is active: derivative is exact
    W0 = np.array([[1.0, 0.5], [0.2, 1.0]])
    w = WeightSet((2, 2, 1), [(W0, np.array([5.0, 5.0])), (np.array([[2.0, -1.0]]), np.array([0.3]))])
    ts = TrainingSet(np.random.default_rng(0).uniform(-1, 1, size=(8, 2)), np.zeros(8))
    v = np.array([0.6, -0.8])
    spec = LossSpec(DirectionalDerivative(v))
    expect = np.array([2.0, -1.0]) @ W0 @ v
    np.testing.assert_allclose(response_vector(w, ts, spec), expect, rtol=1e-9)


@given(st.integers(0, 10**6), st.floats(-3, 3))
def test_quadratic_expansion_identity(seed, alpha):
    rng = np.random.default_rng(seed)
    ts = make_ts(seed=seed)
    F = WeightSet.random((2, 3, 1), rng)
    G = WeightSet.random((2, 2, 1), rng)
    dl, ip, nn = quadratic_expansion(F, G, alpha, ts)
    rhs = -2 * alpha * ip + alpha**2 * nn
    assert abs(dl - rhs) <= 1e-10 * max(1.0, abs(dl), abs(rhs), loss(F, ts))


def test_inner_and_norm():
    g = np.array([0.5, 0.25, 0.25])
    assert inner([1, 2, 3], [1, 1, 1], g) == pytest.approx(0.5 + 0.5 + 0.75)
    assert norm([2, 0, 0], g) == pytest.approx(math.sqrt(2))


def test_alignment_bounds_and_errors():
    ts = make_ts()
    r = ts.responses
    assert alignment(r, 3 * r, ts) == pytest.approx(1.0)
    assert alignment(r, -r, ts) == pytest.approx(-1.0)
    with pytest.raises(DegenerateInputError):
        alignment(r, np.zeros_like(r), ts)


def test_objective_rejects_wrong_width():
    ts = make_ts(k=2)
    with pytest.raises(ShapeError):
        Objective(ts).responses(WeightSet.zeros((3, 2, 1)))


def test_activation_in_spec_changes_responses():
    ts = make_ts()
    w = WeightSet.random((2, 5, 1), np.random.default_rng(3))
    a = response_vector(w, ts, LossSpec(activation=Activation(0.0)))
    b = response_vector(w, ts, LossSpec(activation=Activation(0.3)))
    np.testing.assert_allclose(a, realize_batch(w, ts.inputs, Activation(0.0)), rtol=1e-14)
    assert not np.allclose(a, b)


def test_csv_roundtrip(tmp_path):
    ts = make_ts(n=7, k=3)
    write_csv(ts, tmp_path / "d.csv")
    back = read_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.inputs, ts.inputs)
    np.testing.assert_array_equal(back.responses, ts.responses)
    np.testing.assert_allclose(back.point_weights, ts.point_weights, rtol=1e-15)
    write_csv(ts, tmp_path / "u.csv", include_gamma=False)
    assert np.all(read_csv(tmp_path / "u.csv").point_weights == 1 / 7)


def test_csv_requires_response_column(tmp_path):
    (tmp_path / "bad.csv").write_text("x_1,z\n1,2\n")
    with pytest.raises(ValueError):
        read_csv(tmp_path / "bad.csv")
