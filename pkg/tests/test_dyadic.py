import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from degenlab.dyadic import (
    build_christ, check_christ, cone, cone_aperture, mass_dimension, tent, whitney_regions,
)
from degenlab.errors import InadmissibleInput
from degenlab.geometry import make_domain, whitney
from degenlab.measures import UnitWeight, make_measure

BOX = [[-1.0, 0.0], [2.0, 1.0]]


@pytest.fixture(scope="module")
def unit_interval():
    d = make_domain("halfplane", box=BOX)
    P, W = make_measure("lebesgue", d).sample(1 / 256)
    sel = (P[:, 0] >= 0) & (P[:, 0] <= 1)
    return d, P[sel], W[sel]


@pytest.fixture(scope="module")
def net_tree(unit_interval):
    _, P, W = unit_interval
    return build_christ(P, W, 0, 5)


@pytest.fixture(scope="module")
def regions(unit_interval, net_tree):
    return whitney_regions(net_tree, whitney(unit_interval[0], 9), unit_interval[0], C_a=16)


def test_grid_method_is_dyadic_intervals(unit_interval):
    _, P, W = unit_interval
    tree = build_christ(P, W, 0, 5, method="grid")
    chk = tree.checks
    assert chk["ok"] and chk["a0"] == pytest.approx(0.5)
    for k in tree.generations:
        assert tree.count(k) == 2 ** k
        assert np.allclose(tree.mass(k), 2.0 ** -k)


def test_net_method_properties(net_tree):
    chk = check_christ(net_tree)
    assert chk["partition"] and chk["nesting"] and chk["diameter"] and chk["a0"] > 0


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(1, 5))
def test_nesting_of_containing_cubes(net_tree, x, k):
    tree = net_tree
    X = np.array([x, 0.0])
    child = set(tree.members(k, tree.locate(X, k)).tolist())
    parent = set(tree.members(k - 1, tree.locate(X, k - 1)).tolist())
    assert child <= parent


def test_cantor_cube_masses_scale_with_dimension():
    d = make_domain("cantor2d")
    P, W = make_measure("cantor", d).sample(3.0 ** -9)
    tree = build_christ(P, W, 0, 6)
    dc = math.log(2) / math.log(3)
    scaled = []
    for k in tree.generations:
        m = tree.mass(k)
        m = m[m > 0]
        scaled.extend((m * 2.0 ** (k * dc)).tolist())
    assert max(scaled) / min(scaled) < 4
    assert mass_dimension(tree)[0] == pytest.approx(dc, abs=0.1)


def test_too_coarse_samples_rejected(unit_interval):
    _, P, W = unit_interval
    with pytest.raises(InadmissibleInput):
        build_christ(P[::8], W[::8], 0, 8)


def test_region_contains_corkscrew_cube(regions):
    rep = regions.region_report(1, 0)
    assert rep["n_W"] > 0 and rep["corkscrew_in_W"] and rep["W_subset_Wstar"]


def test_region_sizes_scale_with_cube(regions):
    tree = regions.tree
    x = np.array([0.37, 0.0])
    reps = [regions.region_report(k, tree.locate(x, k)) for k in (4, 5)]
    for key in ("diam_U_over_l", "diam_Ustar_over_l"):
        a, b = (r[key] for r in reps)
        assert max(a / b, b / a) < 1.25
    assert all(r["dist_Ustar_over_l"] > 0 for r in reps)
    assert all(r["diam_Ustar_over_l"] < 32 for r in reps)
    counts = [r["n_Wstar"] for r in reps]
    assert max(counts) < 20000


def test_cone_contains_vertical_ray(regions):
    x = np.array([0.37, 0.0])
    members = set(cone(regions, x).tolist())
    for t in (0.3, 0.1, 0.05):
        assert int(regions.ws.locate(np.array([[0.37, t]]))[0]) in members


def test_cone_aperture_positive_and_nested(regions):
    tree = regions.tree
    x = np.array([0.37, 0.0])
    outer = cone(regions, x, (4, tree.locate(x, 4)))
    inner = cone(regions, x, (5, tree.locate(x, 5)))
    assert set(inner.tolist()) <= set(outer.tolist())
    assert cone_aperture(regions, x, outer) > 0


def test_tent_inclusions_and_mass(regions):
    tree = regions.tree
    x = np.array([0.37, 0.0])
    ratios = []
    for k in (4, 5):
        j = tree.locate(x, k)
        T1, T2 = tent(regions, (k, j)), tent(regions, (k, j), doubled=True)
        ell = tree.side(k)
        assert set(T1.cubes.tolist()) <= set(T2.cubes.tolist())
        assert 0 < T1.r_inner <= T2.R_outer
        assert T2.R_outer / ell < 32
        ratios.append(regions.cube_mass(UnitWeight(), T2.cubes) / (ell * tree.mass(k)[j]))
    assert max(ratios) / min(ratios) < 2
