import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import reference_realize
from hiernet.errors import CompositionError, DomainError, PartitionError, ShapeError
from hiernet.net import (
    Activation,
    Architecture,
    WeightSet,
    direct_sum,
    dumps,
    hat_network,
    load,
    loads,
    negate,
    param_count,
    realize,
    realize_batch,
    save,
    scale_weights,
    split_final_layer,
)

ACT0 = Activation(0.0)


def archs(max_in=3, max_hidden=4, max_depth=3):
    return st.builds(
        lambda w0, hidden: (w0,) + tuple(hidden) + (1,),
        st.integers(1, max_in),
        st.lists(st.integers(1, max_hidden), min_size=1, max_size=max_depth),
    )


def random_ws(widths, seed, scale=1.0):
    return WeightSet.random(widths, np.random.default_rng(seed), scale=scale)


# architecture and counting -------------------------------------------------------


@pytest.mark.parametrize("widths, count", [((2, 3, 1), 13), ((2, 5, 5, 1), 51), ((10, 2, 2, 1), 31)])
def test_param_count_examples(widths, count):
    assert param_count(widths) == count


@given(archs())
def test_param_count_matches_layer_shapes(widths):
    arch = Architecture(widths)
    assert param_count(arch) == sum(r * c + r for r, c in arch.layer_shapes())
    assert WeightSet.zeros(arch).to_vector().size == param_count(arch)


@pytest.mark.parametrize("bad", [(3,), (2, 0, 1), (2, 3, 2), ()])
def test_architecture_rejects_invalid(bad):
    with pytest.raises(ShapeError):
        Architecture(bad)


def test_depth_is_derived():
    arch = Architecture((10, 2, 2, 1))
    assert arch.depth == 2 and arch.input_width == 10


def test_weightset_shape_checks():
    with pytest.raises(ShapeError):
        WeightSet((2, 3, 1), [(np.zeros((3, 2)), np.zeros(3))])
    with pytest.raises(ShapeError):
        WeightSet((2, 3, 1), [(np.zeros((3, 2)), np.zeros(2)), (np.zeros((1, 3)), np.zeros(1))])
    with pytest.raises(ShapeError):
        WeightSet.from_vector((2, 3, 1), np.zeros(12))


def test_weightset_is_immutable():
    w = random_ws((2, 3, 1), 0)
    with pytest.raises(ValueError):
        w.layers[0][0][0, 0] = 1.0
    with pytest.raises(ValueError):
        w.to_vector()[0] = 1.0


@given(archs(), st.integers(0, 10**6))
def test_vector_roundtrip(widths, seed):
    w = random_ws(widths, seed)
    assert WeightSet.from_vector(widths, w.to_vector()) == w


def test_activation_domain():
    assert Activation(0.1)(-2.0) == pytest.approx(-0.2)
    with pytest.raises(DomainError):
        Activation(1.0)
    with pytest.raises(DomainError):
        Activation(-0.1)


# realization ---------------------------------------------------------------------


def test_constant_network():
    arch = Architecture((3, 4, 2, 1))
    vec = np.zeros(param_count(arch))
    vec[-1] = 2.75
    w = WeightSet.from_vector(arch, vec)
    X = np.random.default_rng(1).normal(size=(20, 3))
    assert np.all(realize_batch(w, X) == 2.75)


@given(archs(), st.integers(0, 10**6), st.sampled_from([0.0, 0.01, 0.3]))
def test_realize_matches_reference(widths, seed, delta):
    w = random_ws(widths, seed)
    x = np.random.default_rng(seed + 1).normal(size=widths[0])
    ref = reference_realize(w.layers, x, delta)
    assert realize(w, Activation(delta), x) == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_realize_shape_error():
    w = random_ws((2, 3, 1), 0)
    with pytest.raises(ShapeError):
        realize(w, x=np.zeros(3))
    with pytest.raises(ShapeError):
        realize_batch(w, np.zeros((4, 3)))


# hat networks --------------------------------------------------------------------


def test_hat_peak_and_support():
    h = hat_network(0.0, 0.5, 1.0, [1.0])
    assert realize(h, ACT0, [0.5]) == 1.0
    assert realize(h, ACT0, [-0.2]) == 0.0
    assert realize(h, ACT0, [1.3]) == 0.0
    assert realize(h, ACT0, [0.25]) == pytest.approx(0.5, abs=1e-15)


def test_hat_direction():
    h = hat_network(0.0, 0.5, 1.0, [1.0, 1.0])
    assert realize(h, ACT0, [0.25, 0.25]) == pytest.approx(1.0, abs=1e-15)
    h1 = hat_network(0.0, 0.5, 1.0, [1.0, 0.0])
    assert realize(h1, ACT0, [0.5, 7.0]) == 1.0


def test_hat_support_random():
    rng = np.random.default_rng(3)
    a, b, c = -0.3, 0.2, 0.9
    v = np.array([0.7, -1.2])
    h = hat_network(a, b, c, v)
    X = rng.uniform(-5, 5, size=(4000, 2))
    t = X @ v
    left, right = X[t <= a][:500], X[t >= c][:500]
    assert len(left) == len(right) == 500
    # below a every unit is inactive: exactly zero
    assert np.all(realize_batch(h, left, ACT0) == 0.0)
    # above c three linear pieces cancel, up to rounding
    tr = np.abs(right @ v)
    assert np.all(np.abs(realize_batch(h, right, ACT0)) <= 1e-13 * (1 + tr))


@pytest.mark.parametrize("delta", [0.01, 0.2])
def test_hat_leaky_normalization(delta):
    # the output row is divided by (1 - delta), so the hat stays exact
    h = hat_network(0.0, 0.5, 1.0, [1.0], delta_relu=delta)
    act = Activation(delta)
    xs = np.array([[-3.0], [0.0], [0.25], [0.5], [0.75], [1.0], [4.0]])
    expect = np.array([0.0, 0.0, 0.5, 1.0, 0.5, 0.0, 0.0])
    np.testing.assert_allclose(realize_batch(h, xs, act), expect, atol=1e-14)


@pytest.mark.parametrize("abc", [(0.5, 0.5, 1.0), (0.0, 1.0, 1.0), (1.0, 0.5, 0.0)])
def test_hat_domain_error(abc):
    with pytest.raises(DomainError):
        hat_network(*abc, [1.0])


# scaling -------------------------------------------------------------------------


def test_scale_zero_and_one():
    w = random_ws((2, 4, 3, 1), 0)
    assert np.all(scale_weights(0.0, w).to_vector() == 0.0)
    assert scale_weights(1.0, w) == w


def test_scale_negative_rejected():
    with pytest.raises(DomainError):
        scale_weights(-0.5, random_ws((2, 3, 1), 0))


def test_scale_ratio_example():
    w = random_ws((2, 4, 1), 7)
    X = np.random.default_rng(8).normal(size=(100, 2))
    base = realize_batch(w, X)
    scaled = realize_batch(scale_weights(2.5, w), X)
    np.testing.assert_allclose(scaled, 2.5 * base, rtol=1e-12, atol=0)


@given(archs(), st.integers(0, 10**6), st.floats(0.0, 50.0), st.sampled_from([0.0, 0.01, 0.5]))
def test_homogeneity_property(widths, seed, alpha, delta):
    w = random_ws(widths, seed)
    act = Activation(delta)
    X = np.random.default_rng(seed).normal(size=(16, widths[0]))
    lhs = realize_batch(scale_weights(alpha, w), X, act)
    rhs = alpha * realize_batch(w, X, act)
    assert np.all(np.abs(lhs - rhs) <= 1e-12 * (1 + np.abs(rhs)))


def test_scale_exponents():
    w = random_ws((2, 3, 3, 1), 1)
    s = scale_weights(8.0, w)
    # depth 2: every matrix by 8^(1/3) = 2, biases by 8^((i+1)/3)
    for i, ((W, B), (Ws, Bs)) in enumerate(zip(w.layers, s.layers)):
        np.testing.assert_allclose(Ws, 2.0 * W, rtol=1e-15)
        np.testing.assert_allclose(Bs, 8.0 ** ((i + 1) / 3) * B, rtol=1e-15)


def test_negate():
    w = random_ws((2, 3, 1), 2)
    X = np.random.default_rng(0).normal(size=(10, 2))
    np.testing.assert_array_equal(realize_batch(negate(w), X), -realize_batch(w, X))


# direct sum ----------------------------------------------------------------------


def test_direct_sum_architecture():
    s = direct_sum(random_ws((2, 3, 1), 0), random_ws((2, 2, 1), 1))
    assert s.arch.widths == (2, 5, 1)


@given(archs(), archs(), st.integers(0, 10**6))
def test_direct_sum_additivity(wa, wb, seed):
    wb = (wa[0],) + tuple((list(wb[1:-1]) * 3)[: len(wa) - 2]) + (1,)
    a, b = random_ws(wa, seed), random_ws(wb, seed + 1)
    X = np.random.default_rng(seed).normal(size=(16, wa[0]))
    ra, rb = realize_batch(a, X), realize_batch(b, X)
    s = realize_batch(direct_sum(a, b), X)
    # the summation order differs from ra + rb, so agreement is to rounding
    assert np.all(np.abs(s - (ra + rb)) <= 1e-12 * (1 + np.abs(ra) + np.abs(rb)))
    expect = (wa[0],) + tuple(x + y for x, y in zip(wa[1:-1], wb[1:-1])) + (1,)
    assert direct_sum(a, b).arch.widths == expect


def test_direct_sum_with_zero_is_exact():
    a = random_ws((3, 4, 2, 1), 0)
    z = WeightSet.zeros((3, 2, 5, 1))
    X = np.random.default_rng(0).normal(size=(50, 3))
    np.testing.assert_array_equal(realize_batch(direct_sum(a, z), X), realize_batch(a, X))


def test_direct_sum_param_count_depth_one():
    # the output bias is shared, so one parameter is merged
    a, b = random_ws((2, 3, 1), 0), random_ws((2, 3, 1), 1)
    s = direct_sum(a, b)
    assert param_count(s.arch) == param_count(a.arch) + param_count(b.arch) - 1


def test_direct_sum_mismatch():
    with pytest.raises(CompositionError):
        direct_sum(random_ws((2, 3, 1), 0), random_ws((2, 3, 3, 1), 0))
    with pytest.raises(CompositionError):
        direct_sum(random_ws((2, 3, 1), 0), random_ws((3, 3, 1), 0))


# final-layer split -----------------------------------------------------------------


def test_split_whole_group_is_identity():
    w = random_ws((2, 3, 4, 1), 0)
    parts = split_final_layer(w, 4)
    assert len(parts) == 1 and parts[0] == w


def test_split_per_neuron():
    w = random_ws((2, 3, 4, 1), 0)
    parts = split_final_layer(w, 1)
    assert len(parts) == 4
    assert all(p.arch.widths == (2, 3, 1, 1) for p in parts)
    X = np.random.default_rng(0).normal(size=(100, 2))
    total = sum(realize_batch(p, X) for p in parts)
    full = realize_batch(w, X)
    np.testing.assert_allclose(total, full, rtol=1e-12, atol=1e-12)


def test_split_zero_final_matrix():
    w = random_ws((2, 3, 4, 1), 0)
    layers = list(w.layers)
    layers[-1] = (np.zeros((1, 4)), np.array([2.0]))
    w = WeightSet(w.arch, layers)
    X = np.random.default_rng(0).normal(size=(10, 2))
    for p in split_final_layer(w, 2):
        np.testing.assert_array_equal(realize_batch(p, X), np.full(10, 1.0))


def test_split_bad_group():
    with pytest.raises(PartitionError):
        split_final_layer(random_ws((2, 3, 4, 1), 0), 3)


@given(archs(max_hidden=6), st.integers(0, 10**6), st.data())
def test_split_reconstruction_property(widths, seed, data):
    wd = widths[-2]
    g = data.draw(st.sampled_from([k for k in range(1, wd + 1) if wd % k == 0]))
    w = random_ws(widths, seed)
    X = np.random.default_rng(seed).normal(size=(20, widths[0]))
    parts = split_final_layer(w, g)
    assert len(parts) == wd // g
    total = sum(realize_batch(p, X) for p in parts)
    full = realize_batch(w, X)
    assert np.all(np.abs(total - full) <= 1e-12 * (1 + np.abs(full)))


# serialization -----------------------------------------------------------------------


def test_serialization_roundtrip(tmp_path):
    w = random_ws((3, 4, 2, 1), 5)
    act = Activation(0.05)
    w2, act2 = loads(dumps(w, act))
    assert w2 == w and act2 == act
    save(tmp_path / "w.json", w, act)
    w3, _ = load(tmp_path / "w.json")
    assert np.array_equal(w3.to_vector(), w.to_vector())


def test_serialization_rejects_foreign():
    with pytest.raises(ValueError):
        loads('{"format": "other", "version": 1}')
    with pytest.raises(ValueError):
        loads('{"format": "hiernet-weights", "version": 99}')
