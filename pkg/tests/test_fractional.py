import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from degenlab.discretization import EXTERIOR
from degenlab.elliptic import Setup
from degenlab.errors import InadmissibleInput
from degenlab.fractional import (
    StripModel, cs_extend, dtn, dtn_rough, extension_profile, flux_constant, order, symbol,
)
from degenlab.geometry import make_domain
from degenlab.measures import PowerDistanceWeight


@pytest.fixture(scope="module")
def laplace_strip():
    return StripModel(0.0, N=128)


@pytest.fixture(scope="module")
def strip_half():
    return StripModel(0.5, N=64)


def grid_of(model):
    return model.system.grid


def test_order_maps_weight_exponent():
    assert [order(g) for g in (-0.5, 0.0, 0.5)] == [0.25, 0.5, 0.75]


@pytest.mark.parametrize("s", [0.25, 0.5, 0.75])
def test_profile_runs_from_one_to_zero(s):
    z = np.array([0.0, 1e-6, 0.5, 2.0, 20.0])
    phi = extension_profile(z, s)
    assert phi[0] == 1.0 and phi[1] == pytest.approx(1.0, abs=1e-3)
    assert np.all(np.diff(phi) < 0) and phi[-1] < 1e-7


def test_half_order_profile_is_exponential():
    z = np.linspace(0, 5, 11)
    assert np.allclose(extension_profile(z, 0.5), np.exp(-z))
    assert flux_constant(0.5) == pytest.approx(1.0)


def test_inadmissible_gamma_rejected():
    with pytest.raises(InadmissibleInput):
        StripModel(1.0, N=32)


def test_constant_data_extends_to_constant(strip_half):
    u = cs_extend(lambda x: np.full_like(x, 2.0), strip_half)
    assert np.allclose(u.values[grid_of(strip_half).cls != EXTERIOR], 2.0, atol=1e-12)


def test_constant_has_zero_dtn(strip_half):
    res = dtn(lambda x: np.full_like(x, 1.5), strip_half)
    assert np.max(np.abs(res.flux)) < 1e-9
    assert np.max(np.abs(res.weak)) < 1e-9


@pytest.mark.parametrize("k", [1, 2])
def test_laplace_extension_of_cosine(laplace_strip, k):
    g = grid_of(laplace_strip)
    u = cs_extend(lambda x: np.cos(k * x), laplace_strip)
    x, t = g.coords[:, 0], g.coords[:, 1]
    near = (t <= 1.0) & (np.abs(np.cos(k * x)) > 0.5)
    assert np.allclose(u.values[near], np.cos(k * x[near]) * np.exp(-k * t[near]), rtol=0.01)


@settings(max_examples=10, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(1, 4))
def test_extension_is_linear(strip_half, a, b, k):
    f = lambda x: np.cos(k * x)
    g = lambda x: np.sin(x) ** 2
    lhs = cs_extend(lambda x: a * f(x) + b * g(x), strip_half).values
    rhs = a * cs_extend(f, strip_half).values + b * cs_extend(g, strip_half).values
    assert np.allclose(lhs, rhs, atol=1e-10)


@pytest.mark.parametrize("gamma", [-0.5, 0.0, 0.5])
def test_normalized_symbol(gamma):
    table = symbol(StripModel(gamma, N=128))
    assert np.all(table.rel_error("flux") <= 0.05)
    assert np.all(table.rel_error("weak") <= 0.05)


def test_laplace_symbol_unnormalized(laplace_strip):
    table = symbol(laplace_strip, ks=(1, 2))
    assert table.flux == pytest.approx([1.0, 2.0], rel=0.02)


def test_symbol_rejects_unresolved_wavenumber():
    with pytest.raises(InadmissibleInput):
        symbol(StripModel(0.0, N=32), ks=(1, 8))


def test_weak_pairing_on_rough_boundary():
    d = make_domain("cantor2d")
    setup = Setup(d, PowerDistanceWeight(d, 0.0), 1 / 27)
    tests = [lambda X: np.cos(np.pi * X[:, 0]), lambda X: X[:, 0] ** 2]
    rep = dtn_rough(setup, lambda X: np.sin(np.pi * X[:, 0]), tests)
    assert rep.independence <= 1e-8
    assert rep.bilinearity <= 1e-8
    assert rep.energy_match <= 1e-8
    assert np.all(np.isfinite(rep.pairings))
