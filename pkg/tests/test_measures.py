import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from degenlab.errors import InadmissibleInput
from degenlab.geometry import make_domain
from degenlab.measures import (
    DEFAULT_MEASURE, PowerDistanceWeight, UnitWeight, audit, cantor_function, default_weight,
    m_ball, make_measure, rho, unit_ball_volume,
)


@pytest.fixture(scope="module")
def axis():
    return make_domain("axis3d")


@given(st.floats(-0.3, 0.3), st.floats(1e-3, 0.2))
def test_lebesgue_on_line_is_interval_length(axis, s, r):
    mu = make_measure("lebesgue", axis)
    assert mu.ball(np.array([s, 0.0, 0.0]), r)[0] == pytest.approx(2 * r)


@pytest.mark.parametrize("k", range(1, 8))
def test_cantor_ball_at_origin(k):
    d = make_domain("cantor2d")
    mu = make_measure("cantor", d)
    assert mu.ball(np.zeros(2), 3.0 ** -k)[0] == pytest.approx(2.0 ** -k, rel=1e-12)


@given(st.floats(0, 1), st.floats(1e-4, 0.9))
def test_cantor_self_similarity(x, r):
    d = make_domain("cantor2d")
    mu = make_measure("cantor", d)
    big = mu.ball(np.array([x, 0.0]), r)[0]
    small = mu.ball(np.array([x / 3, 0.0]), r / 3)[0]
    assert small == pytest.approx(0.5 * big, abs=1e-12)


@given(st.lists(st.floats(-0.5, 1.5), min_size=2, max_size=20))
def test_cantor_function_monotone(xs):
    xs = np.sort(xs)
    F = cantor_function(xs)
    assert np.all(np.diff(F) >= -1e-15) and np.all((F >= 0) & (F <= 1))


@pytest.mark.parametrize("mid", ["lebesgue", "cantor", "ball-mixed"])
def test_sampler_reproduces_ball_mass(mid):
    dom = {"lebesgue": "halfplane", "cantor": "cantor2d", "ball-mixed": "ball-minus-diameter"}[mid]
    d = make_domain(dom)
    mu = make_measure(mid, d)
    P, W = mu.sample(1 / 243)
    for x, r in ((P[len(P) // 3], 0.3), (P[len(P) // 2], 0.5)):
        inside = np.linalg.norm(P - x, axis=1) < r
        assert W[inside].sum() == pytest.approx(mu.ball(x, r)[0], rel=0.1)


def test_riesz_doubling_audit_is_finite():
    d = make_domain("line2d")
    rep = audit(d, make_measure("riesz", d), UnitWeight(), "H3")
    assert math.isfinite(rep.constant) and rep.constant > 2


def test_unit_weight_interior_ball_volume():
    d = make_domain("halfplane")
    m = m_ball(d, UnitWeight(), np.array([0.0, 1.0]), 0.3)
    assert m.value == pytest.approx(unit_ball_volume(2) * 0.09, abs=3 * m.error)


def test_axis_gamma_one_mass_matches_quadrature(axis):
    r = 0.4
    # cylindrical shells: int_{-r}^{r} int_0^{sqrt(r^2-s^2)} rho^-1 * 2 pi rho d rho ds
    ref, _ = integrate.dblquad(lambda p, s: 2 * math.pi, -r, r, 0, lambda s: math.sqrt(r * r - s * s))
    got = m_ball(axis, PowerDistanceWeight(axis, 1.0), np.zeros(3), r).value
    assert got == pytest.approx(ref, rel=1e-10)


@pytest.mark.parametrize("gamma", [0.5, 1.0, 1.5])
def test_flat_doubling_ratio(axis, gamma):
    w = PowerDistanceWeight(axis, gamma)
    ratio = m_ball(axis, w, np.zeros(3), 0.2).value / m_ball(axis, w, np.zeros(3), 0.1).value
    assert ratio == pytest.approx(2 ** (3 - gamma))


def test_flat_mass_against_midpoint_rule():
    d = make_domain("halfspace3d")
    w = PowerDistanceWeight(d, 0.5)
    x = np.array([0.1, -0.2, 0.0])
    closed = m_ball(d, w, x, 0.3).value
    # shifting off Gamma by a hair forces the generic quadrature branch
    numeric = m_ball(d, w, x + [0, 0, 1e-9], 0.3, resolution=96)
    # slab integral: pi int_0^r t^-1/2 (r^2 - t^2) dt = 1.6 pi r^(5/2)
    assert closed == pytest.approx(1.6 * math.pi * 0.3 ** 2.5, rel=1e-12)
    assert abs(numeric.value - closed) <= numeric.error


@pytest.mark.parametrize("gamma", [0.5, 1.0, 1.5])
def test_rho_exponent_on_flat_gamma(axis, gamma):
    mu = make_measure("lebesgue", axis)
    w = PowerDistanceWeight(axis, gamma)
    vals = [rho(axis, mu, w, np.zeros(3), r) for r in (0.05, 0.1, 0.2)]
    assert math.log2(vals[1] / vals[0]) == pytest.approx(1 - gamma, abs=1e-12)
    assert math.log2(vals[2] / vals[1]) == pytest.approx(1 - gamma, abs=1e-12)


def test_rho_extension_setting_exponent():
    d = make_domain("halfplane")
    mu = make_measure("lebesgue", d)
    for g in (-0.5, 0.5):
        w = PowerDistanceWeight(d, g)
        vals = [rho(d, mu, w, np.zeros(2), r) for r in (0.05, 0.1)]
        assert math.log2(vals[1] / vals[0]) == pytest.approx(-g, abs=1e-12)


@pytest.mark.parametrize("dom_id, d", [("halfplane", 1), ("halfspace3d", 2)])
def test_lebesgue_doubling_constant_exact(dom_id, d):
    dom = make_domain(dom_id)
    rep = audit(dom, make_measure("lebesgue", dom), UnitWeight(), "H3")
    assert rep.constant == 2.0 ** d and rep.passed


def test_h5_passes_at_critical_flat_gamma(axis):
    rep = audit(axis, make_measure("lebesgue", axis), PowerDistanceWeight(axis, 1.0), "H5")
    assert rep.passed and abs(rep.exponent) < 1e-9


def test_h5_fails_at_boundary_of_range(axis):
    w = PowerDistanceWeight(axis, 2.0, allow_inadmissible=True)
    rep = audit(axis, make_measure("lebesgue", axis), w, "H5")
    assert not rep.passed


def test_power_weight_range_is_enforced(axis):
    with pytest.raises(InadmissibleInput):
        PowerDistanceWeight(axis, 2.0)
    with pytest.raises(InadmissibleInput):
        PowerDistanceWeight(axis, -0.1)


@pytest.mark.parametrize("dom_id", sorted(DEFAULT_MEASURE))
def test_default_weight_is_admissible(dom_id):
    d = make_domain(dom_id)
    w = default_weight(d)
    lo, hi = d.n - d.dim_gamma - 2, d.n - d.dim_gamma
    g = getattr(w, "gamma", 0.0)
    assert lo < g < hi


@settings(max_examples=30)
@given(st.floats(0.01, 0.3), st.floats(1.01, 3.0))
def test_lebesgue_ball_monotone_in_radius(r, f):
    d = make_domain("halfplane")
    mu = make_measure("lebesgue", d)
    x = np.array([0.2, 0.0])
    assert mu.ball(x, r * f)[0] >= mu.ball(x, r)[0]
