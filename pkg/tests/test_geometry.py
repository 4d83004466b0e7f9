import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from degenlab.errors import HypothesisViolation, InadmissibleInput
from degenlab.geometry import (
    CATALOG, check_chain, corkscrew, fit_chain_length, harnack_chain, make_domain, whitney,
)

DOMAINS = sorted(CATALOG)


def cantor_oracle(x, depth=12):
    """Distance from x in R to the middle-thirds Cantor set, by interval enumeration."""
    lo = np.array([0.0])
    for k in range(depth):
        lo = np.concatenate([lo, lo + 2 * 3.0 ** -(k + 1)])
    hi = lo + 3.0 ** -depth
    return float(np.min(np.maximum(np.maximum(lo - x, x - hi), 0.0)))


def test_axis_distance():
    d = make_domain("axis3d")
    assert d.distance(np.array([0.0, 1.0, 0.0])) == pytest.approx(1.0)


@given(st.floats(-2, 2), st.floats(0, 2))
def test_halfplane_distance_is_height(x, t):
    d = make_domain("halfplane")
    assert d.distance(np.array([x, t])) == pytest.approx(t)


def test_cantor_midpoint_distance():
    d = make_domain("cantor2d")
    assert d.distance(np.array([0.5, 0.0])) == pytest.approx(1 / 6, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.floats(-0.5, 1.5), st.floats(-0.5, 0.5))
def test_cantor_distance_matches_enumeration(x, y):
    d = make_domain("cantor2d")
    exact = math.hypot(cantor_oracle(x), y)
    assert d.distance(np.array([x, y])) == pytest.approx(exact, abs=2 * 3.0 ** -12)


def _random_points(domain, rng, count):
    lo, hi = domain.box
    return lo + (hi - lo) * rng.random((count, domain.n))


@pytest.mark.parametrize("dom_id", DOMAINS)
def test_distance_is_one_lipschitz(dom_id):
    d = make_domain(dom_id)
    rng = np.random.default_rng(1)
    P, Q = _random_points(d, rng, 300), _random_points(d, rng, 300)
    gap = np.abs(d.distance(P) - d.distance(Q))
    slack = 2 * getattr(d, "resolution", 0.0) + 1e-12
    assert np.all(gap <= np.linalg.norm(P - Q, axis=1) + slack)


@pytest.mark.parametrize("dom_id", DOMAINS)
def test_projection_realizes_distance(dom_id):
    d = make_domain(dom_id)
    P = _random_points(d, np.random.default_rng(2), 200)
    x = d.project(P)
    assert np.allclose(np.linalg.norm(P - x, axis=1), d.distance(P), atol=1e-6 + 2 * getattr(d, "resolution", 0))
    assert np.all(d.distance(x) <= 1e-6 + 2 * getattr(d, "resolution", 0))


def test_corkscrew_examples():
    c = corkscrew(make_domain("axis3d"), np.zeros(3), 1.0)
    assert np.allclose(c.point, [0, 0.5, 0]) and c.c1 == pytest.approx(2.0)
    c = corkscrew(make_domain("halfplane"), np.array([0.3, 0.0]), 0.8)
    assert np.allclose(c.point, [0.3, 0.4]) and c.c1 == pytest.approx(2.0)


def test_corkscrew_ball_minus_diameter_avoids_diameter():
    d = make_domain("ball-minus-diameter")
    x = np.array([0.0, 0.0, 1.0])
    r = 0.25
    c = corkscrew(d, x, r)
    assert np.linalg.norm(c.point - x) <= r
    assert d.inside(c.point)
    assert d.distance(c.point) >= r / c.c1 - 1e-12


@pytest.mark.parametrize("dom_id", DOMAINS)
def test_corkscrew_contract_on_catalog(dom_id):
    d = make_domain(dom_id)
    L = float(np.min(d.box[1] - d.box[0]))
    pts = d.boundary_points(L / 16)
    rng = np.random.default_rng(3)
    for x in pts[rng.choice(len(pts), min(8, len(pts)), replace=False)]:
        r = L / 8
        try:
            c = corkscrew(d, x, r)
        except HypothesisViolation:
            continue
        assert np.linalg.norm(c.point - x) <= r * (1 + 1e-12)
        assert d.distance(c.point) >= r / c.c1 * (1 - 1e-12)


def test_corkscrew_rejects_bad_radius():
    with pytest.raises(InadmissibleInput):
        corkscrew(make_domain("halfplane"), np.zeros(2), 0.0)


def test_degenerate_chain():
    ch = harnack_chain(make_domain("halfplane"), [0.0, 2.0], [0.0, 2.0], 1.0)
    assert ch.length == 0 and len(ch.points) == 1


def test_segment_walk_chain():
    d = make_domain("halfplane")
    X = np.array([0.0, 2.0])
    ch = harnack_chain(d, X, [3.0, 2.0], 1.0)
    steps = np.linalg.norm(np.diff(ch.points, axis=0), axis=1)
    assert np.all(steps <= 0.5 * d.distance(ch.points[:-1]) + 1e-12)
    assert np.allclose(ch.points[:, 1], 2.0)
    chk = check_chain(d, ch, X, 1.0)
    assert chk["steps_ok"] and chk["floor_ok"] and chk["ball_ok"]


def test_axis_chain_logarithmic_length():
    d = make_domain("axis3d", box=[[-1, -1, -1], [11, 1, 1]])
    X = np.array([0.0, 0.0, 1.0])
    ch = harnack_chain(d, X, [10.0, 0.0, 1.0], 0.5)
    chk = check_chain(d, ch, X, 0.5)
    assert chk["steps_ok"] and chk["floor_ok"] and chk["ball_ok"]
    pairs = [(X, np.array([s, 0.0, 1.0])) for s in (1.0, 2.0, 4.0, 8.0, 10.0)]
    fit = fit_chain_length(d, pairs, 0.5)
    assert ch.length <= math.ceil(fit["B_envelope"] + fit["A"] * math.log(21)) + 1


@settings(max_examples=25, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(0.3, 1.8), st.floats(-1.5, 1.5), st.floats(0.3, 1.8))
def test_chain_invariants_halfplane(x1, t1, x2, t2):
    d = make_domain("halfplane")
    r = 0.25
    X = np.array([x1, t1])
    ch = harnack_chain(d, X, [x2, t2], r)
    chk = check_chain(d, ch, X, r)
    assert chk["steps_ok"] and chk["floor_ok"] and chk["ball_ok"]


def test_whitney_halfplane_unit_box():
    d = make_domain("halfplane", box=[[0, 0], [1, 1]])
    ws = whitney(d, 8)
    chk = ws.check(d)
    assert chk["wq11_lower"] == 1.0 and chk["wq11_upper"] == 1.0 and chk["wq12"]
    # zero overlap and exact tiling of the box minus the collar
    assert chk["partition_error"] == 0.0
    assert np.sum(ws.side ** 2) + chk["collar_volume"] == pytest.approx(1.0)
    top = ws.lo[:, 1]
    assert np.all(4 * math.sqrt(2) * ws.side <= top - 1.5 * ws.side + 1e-12)


def test_whitney_axis_cube_side_bracket():
    ws = whitney(make_domain("axis3d"), 6)
    i = ws.locate(np.array([[0.0, 0.0, 0.3]]))[0]
    assert 0.3 / (24 * math.sqrt(3)) <= ws.side[i] <= 0.3 / (4 * math.sqrt(3))


@pytest.mark.parametrize("dom_id", ["cantor2d", "ball-minus-diameter", "sawtooth"])
def test_whitney_checks_on_rough_domains(dom_id):
    d = make_domain(dom_id)
    chk = whitney(d, 6 if d.n == 2 else 5).check(d)
    assert chk["wq11_lower"] == 1.0 and chk["wq11_upper"] == 1.0 and chk["wq12"]
    assert chk["partition_error"] <= 1e-9


def test_unknown_domain():
    with pytest.raises(InadmissibleInput):
        make_domain("moebius")
