import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from degenlab.discretization import EXTERIOR, Grid, assemble, solve_dirichlet
from degenlab.geometry import make_domain, whitney
from degenlab.measures import PowerDistanceWeight, UnitWeight, make_measure
from degenlab.spaces import (
    ball_nodes, extend, h_norm, lipschitz_family, poincare_ratio, trace, w_norm,
)

BOX = [[-1.0, 0.0], [1.0, 1.0]]
SAMPLES_X = np.linspace(-0.5, 0.5, 21)


@pytest.fixture(scope="module")
def plane():
    return make_domain("halfplane", box=BOX)


def boundary_points():
    return np.stack([SAMPLES_X, np.zeros_like(SAMPLES_X)], axis=1)


def unit_system(plane, h):
    return assemble(plane, UnitWeight(), Grid(plane, h))


@pytest.fixture(scope="module")
def sys32(plane):
    return unit_system(plane, 1 / 32)


@pytest.fixture(scope="module")
def boundary(plane):
    P, W = make_measure("lebesgue", plane).sample(1 / 128)
    return P, W


def test_trace_of_constant(sys32):
    tr = trace(np.full(sys32.grid.size, 1.7), sys32, boundary_points())
    assert tr.skipped == 0
    assert np.allclose(tr.values, 1.7, rtol=0, atol=1e-14)


def test_trace_of_power_vanishes_at_rate_alpha(plane):
    alpha = 0.5
    vals = []
    for h in (1 / 16, 1 / 32, 1 / 64):
        s = unit_system(plane, h)
        vals.append(np.max(trace(s.grid.coords[:, 1] ** alpha, s, boundary_points()).values))
    # the band [2h, 4h] scales with h, so each halving divides the trace by 2^alpha
    assert vals[1] / vals[0] == pytest.approx(2 ** -alpha, rel=1e-6)
    assert vals[2] / vals[1] == pytest.approx(2 ** -alpha, rel=1e-6)


def test_trace_of_solution_approaches_data(plane):
    g = lambda X: np.sin(2 * X[:, 0])
    errs = []
    for h in (1 / 16, 1 / 32, 1 / 64):
        s = unit_system(plane, h)
        u, _ = solve_dirichlet(s, g)
        P = boundary_points()
        errs.append(np.max(np.abs(trace(u, s, P).values - g(P))))
    theta = np.polyfit(np.log([1 / 16, 1 / 32, 1 / 64]), np.log(errs), 1)[0]
    assert theta > 0.5


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(-3, 3))
def test_trace_is_linear_and_monotone(sys32, seed, a):
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((2, sys32.grid.size))
    P = boundary_points()
    tu, tv = trace(u, sys32, P).values, trace(v, sys32, P).values
    assert np.allclose(trace(a * u + v, sys32, P).values, a * tu + tv, atol=1e-12)
    w = u + np.abs(rng.standard_normal(sys32.grid.size))
    assert np.all(trace(w, sys32, P).values >= tu - 1e-12)


def test_trace_commutes_with_smooth_multiplier(plane):
    phi = lambda X: 1 + 0.5 * np.cos(X[:, 0])
    P = boundary_points()
    gaps = []
    for h in (1 / 32, 1 / 64):
        s = unit_system(plane, h)
        u, _ = solve_dirichlet(s, lambda X: X[:, 0] ** 2)
        lhs = trace(phi(s.grid.coords) * u.values, s, P).values
        rhs = phi(P) * trace(u, s, P).values
        gaps.append(np.max(np.abs(lhs - rhs)))
    assert gaps[1] < gaps[0] and gaps[1] < 0.01


def test_extension_of_constant(plane, sys32, boundary):
    P, W = boundary
    ext = extend(lambda X: np.full(len(X), -2.5), whitney(plane, 6), P, W, sys32.grid)
    ok = np.isfinite(ext.values)
    assert ok.sum() > 0.5 * np.sum(sys32.grid.cls != EXTERIOR)
    assert np.allclose(ext.values[ok], -2.5, rtol=0, atol=1e-13)


def test_extension_is_linear(plane, sys32, boundary):
    P, W = boundary
    ws = whitney(plane, 6)
    f, g = lipschitz_family(2, seed=4)
    a = extend(f, ws, P, W, sys32.grid).values
    b = extend(g, ws, P, W, sys32.grid).values
    ab = extend(lambda X: f(X) + g(X), ws, P, W, sys32.grid).values
    ok = np.isfinite(ab)
    assert np.allclose(ab[ok], a[ok] + b[ok], atol=1e-12)


def test_trace_of_extension_returns_data(plane, boundary):
    P, W = boundary
    g = lambda X: np.abs(X[:, 0] - 0.1)
    Q = boundary_points()
    errs = []
    for h in (1 / 32, 1 / 64, 1 / 128):
        s = unit_system(plane, h)
        # Whitney cubes must reach down into the trace band [2h, 4h]
        ws = whitney(plane, round(math.log2(2 / h)) + 3)
        tr = trace(extend(g, ws, P, W, s.grid), s, Q)
        assert tr.skipped == 0
        errs.append(np.max(np.abs(tr.values - g(Q))))
    theta = np.polyfit(np.log([1 / 32, 1 / 64, 1 / 128]), np.log(errs), 1)[0]
    assert theta > 0


def test_h_norm_of_constant_is_zero(plane, boundary):
    P, W = boundary
    q = h_norm(np.full(len(P), 3.0), P, W, plane, make_measure("lebesgue", plane), UnitWeight(), 1 / 128)
    assert q.value == 0.0


@settings(max_examples=10, deadline=None)
@given(st.floats(-5, 5))
def test_h_norm_ignores_added_constants(plane, c):
    x = np.linspace(-1, 1, 129)
    P = np.stack([x, np.zeros_like(x)], 1)
    W = np.full(len(P), 2 / 128)
    mu = make_measure("lebesgue", plane)
    g = np.sin(3 * x)
    a = h_norm(g, P, W, plane, mu, UnitWeight(), 1 / 64).value
    b = h_norm(g + c, P, W, plane, mu, UnitWeight(), 1 / 64).value
    assert a > 0 and b == pytest.approx(a, rel=1e-9)


def test_extension_energy_bounded_by_h_norm(plane, boundary):
    P, W = boundary
    mu = make_measure("lebesgue", plane)
    ratios = []
    for level, h in ((5, 1 / 32), (6, 1 / 64)):
        s = unit_system(plane, h)
        ws = whitney(plane, level)
        sel = np.abs(P[:, 0]) <= 1
        g = lambda X: np.sin(np.pi * X[:, 0])
        ext = extend(g, ws, P, W, s.grid)
        hq = h_norm(g, P[sel][::4], W[sel][::4] * 4, plane, mu, UnitWeight(), 2 * h)
        ratios.append(w_norm(ext, s) / hq.value)
    assert max(ratios) / min(ratios) < 2


def test_poincare_of_constant_is_degenerate(sys32):
    nodes = ball_nodes(sys32, [0.0, 0.5], 0.25)
    res = poincare_ratio(np.ones(sys32.grid.size), sys32, nodes, 0.25)
    assert res.degenerate and math.isnan(res.ratio)


def test_poincare_of_linear_function(plane):
    # mean |x1| over a disk of radius r is 4r / (3 pi) and |grad x1| = 1
    s = unit_system(plane, 1 / 128)
    c, r = np.array([0.0, 0.5]), 0.25
    nodes = ball_nodes(s, c, r)
    res = poincare_ratio(s.grid.coords[:, 0], s, nodes, r)
    assert res.ratio == pytest.approx(4 / (3 * math.pi), rel=0.03)
    assert res.ratio < 1


def test_boundary_poincare_for_power(plane):
    ratios = []
    for h in (1 / 32, 1 / 64, 1 / 128):
        s = assemble(plane, PowerDistanceWeight(plane, 0.5), Grid(plane, h))
        u = s.grid.coords[:, 1] ** 1.5
        r = 0.25
        res = poincare_ratio(u, s, ball_nodes(s, [0.0, 0.0], r), r, kind="boundary",
                             grad_nodes=ball_nodes(s, [0.0, 0.0], 2 * r))
        ratios.append(res.ratio)
    assert all(np.isfinite(ratios)) and max(ratios) / min(ratios) < 1.5
