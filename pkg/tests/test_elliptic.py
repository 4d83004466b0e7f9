import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from degenlab.discretization import EXTERIOR
from degenlab.elliptic import (
    BoundarySet, Setup, green, green_bounds, green_symmetry, halfplane_reference,
    harmonic_measure, representation, verify,
)
from degenlab.errors import InadmissibleInput
from degenlab.geometry import make_domain
from degenlab.measures import PowerDistanceWeight, UnitWeight


@pytest.fixture(scope="module")
def plane():
    return make_domain("halfplane")


@pytest.fixture(scope="module")
def setup64(plane):
    return Setup(plane, UnitWeight(), 1 / 64)


@pytest.fixture(scope="module")
def weighted32(plane):
    return Setup(plane, PowerDistanceWeight(plane, 0.5), 1 / 32)


def live(setup):
    return setup.grid.cls != EXTERIOR


def test_measure_of_whole_boundary_is_one(weighted32):
    w = harmonic_measure(weighted32, BoundarySet.whole())
    assert np.max(np.abs(w.values[live(weighted32)] - 1)) <= 1e-8


def test_arctan_formula_for_intervals():
    # omega^{(x, y)}([a, b]) = (arctan((b - x) / y) - arctan((a - x) / y)) / pi
    ref = halfplane_reference(-1.0, 1.0)
    assert ref(np.array([[0.0, 1.0]]))[0] == pytest.approx(0.5)
    assert halfplane_reference(0.0, math.inf)(np.array([[0.0, 1.0]]))[0] == pytest.approx(0.5)


@pytest.mark.parametrize("a, b", [(-0.5, 0.5), (0.1, 0.9), (-1.2, -0.3)])
def test_half_plane_measure_matches_poisson_kernel(setup64, a, b):
    w = harmonic_measure(setup64, BoundarySet.interval(a, b))
    X = np.array([[0.0, 1.0], [0.3, 0.5]])
    assert w.at(X) == pytest.approx(halfplane_reference(a, b)(X), rel=0.05)


def test_measure_is_a_bounded_solution(weighted32):
    chk = harmonic_measure(weighted32, BoundarySet.interval(-0.4, 0.7)).check()
    assert chk["in_unit_interval"] and chk["solution"]


@settings(max_examples=10, deadline=None)
@given(st.floats(-1.5, 0.0), st.floats(0.05, 1.0), st.floats(0.0, 0.5))
def test_measure_is_monotone_in_the_set(weighted32, a, length, grow):
    small = harmonic_measure(weighted32, BoundarySet.interval(a, a + length), outer="zero")
    big = harmonic_measure(weighted32, BoundarySet.interval(a - grow, a + length + grow), outer="zero")
    ok = live(weighted32)
    assert np.all(big.values[ok] >= small.values[ok] - 1e-12)


def test_complement_adds_to_one(weighted32):
    E = BoundarySet.interval(-0.3, 0.6)
    w1 = harmonic_measure(weighted32, E).values
    w2 = harmonic_measure(weighted32, E.complement()).values
    ok = live(weighted32)
    assert np.allclose(w1[ok] + w2[ok], 1.0, atol=1e-10)


def test_green_function_is_nonnegative(weighted32):
    gf = green(weighted32, [0.0, 1.0], min_ratio=10)
    vals = gf.field.values[live(weighted32)]
    assert np.all(vals >= 0) and vals.max() > 0
    assert green_bounds(gf, weighted32)["negative_nodes"] == 0


def test_green_pole_too_close_is_rejected(weighted32):
    with pytest.raises(InadmissibleInput):
        green(weighted32, [0.0, 0.1])


def test_green_function_is_symmetric(weighted32):
    assert green_symmetry(weighted32, [0.0, 1.0], [0.5, 0.8], rho=1 / 128) <= 1e-8
    assert green_symmetry(weighted32, [0.2, 0.9], [0.2, 0.9], rho=1 / 128) == 0.0


def test_representation_single_source(plane):
    st_ = Setup(plane, UnitWeight(), 1 / 16)
    rep = representation(st_, lambda X: (np.linalg.norm(X - [0.0, 1.0], axis=1) < 0.1).astype(float),
                         min_ratio=4)
    assert rep.poles > 0 and rep.deviation <= 1e-8


def test_representation_two_bumps_and_random(plane):
    st_ = Setup(plane, UnitWeight(), 1 / 16)
    bumps = lambda X: (np.exp(-40 * np.sum((X - [0.5, 1.0]) ** 2, axis=1))
                       - np.exp(-40 * np.sum((X + [0.5, -1.0]) ** 2, axis=1))) * (X[:, 1] > 0.6)
    assert representation(st_, bumps, min_ratio=4).deviation <= 1e-8
    rng = np.random.default_rng(5)
    noise = rng.standard_normal(st_.grid.size) * (np.abs(st_.grid.coords[:, 1] - 1) < 0.2) \
        * (np.abs(st_.grid.coords[:, 0]) < 0.2)
    assert representation(st_, noise, min_ratio=4).deviation <= 1e-8


def test_maximum_principle_has_no_violations(weighted32):
    v = verify(weighted32, "max_principle", samples=40)
    assert v.passed and v.details["violations"] == [0]


def test_harnack_matches_closed_form(plane):
    setups = [Setup(plane, PowerDistanceWeight(plane, 0.5), h) for h in (1 / 32, 1 / 64)]
    v = verify(setups, "harnack", samples=6)
    assert v.passed and v.details["max_deviation"][-1] <= 0.05


def test_half_plane_doubling_against_oracle(plane):
    v = verify(Setup(plane, UnitWeight(), 1 / 64), "hm_doubling", samples=8)
    assert math.isfinite(v.worst_constant)
    assert v.details["oracle_deviation"] <= 0.05


def test_unknown_estimate_is_rejected(setup64):
    with pytest.raises(InadmissibleInput):
        verify(setup64, "bogus")
