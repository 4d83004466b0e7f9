"""Discrete trace and Whitney extension, the H seminorm on boundary samples,
and Poincare ratio testers."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from degenlab.discretization import EXTERIOR, Field
from degenlab.errors import InadmissibleInput
from degenlab.measures import m_ball


# --- trace ---------------------------------------------------------------------

@dataclass
class TraceField:
    points: np.ndarray
    values: np.ndarray
    band: tuple
    skipped: int
    weights: np.ndarray = None

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "value"])
            for i, v in enumerate(self.values):
                w.writerow([i, f"{v:.17g}"])


def ball_averages(u, system, centers, radii):
    """m-weighted averages of u over the nodes in B(center, radius)."""
    g = system.grid
    vals = u.values if isinstance(u, Field) else np.asarray(u, float)
    ok = (g.cls != EXTERIOR) & np.isfinite(vals)
    idx = np.flatnonzero(ok)
    tree = _node_tree(system, idx)
    lists = tree.query_ball_point(np.atleast_2d(centers), np.asarray(radii, float))
    out = np.full(len(lists), np.nan)
    for k, nb in enumerate(lists):
        if nb:
            nb = idx[np.asarray(nb, dtype=int)]
            m = system.mass[nb]
            out[k] = float(np.sum(m * vals[nb]) / np.sum(m))
    return out


def _node_tree(system, idx):
    key = ("tree", idx.size, int(idx[:1].sum()) if idx.size else 0)
    cache = system.__dict__.setdefault("_trees", {})
    if key not in cache:
        cache[key] = cKDTree(system.grid.coords[idx])
    return cache[key]


def trace(u, system, points, band=None, aperture=2.0, regions=None):
    """Tr u at boundary samples: mean over cone points X with delta(X) in the band
    of the m-average of u over B(X, delta(X)/2).

    The cone is {X : |X - x| <= aperture * delta(X)} unless dyadic `regions`
    are given, in which case the dyadic access cone gamma(x) is used.
    """
    g = system.grid
    h = g.h
    lo, hi = band if band is not None else (2 * h, 4 * h)
    P = np.atleast_2d(np.asarray(points, float))
    vals = u.values if isinstance(u, Field) else np.asarray(u, float)
    cand = np.flatnonzero((g.cls != EXTERIOR) & (g.delta >= lo * (1 - 1e-12)) &
                          (g.delta <= hi * (1 + 1e-12)) & g.domain.inside(g.coords))
    avg = ball_averages(vals, system, g.coords[cand], 0.5 * g.delta[cand])
    keep = np.isfinite(avg)
    cand, avg = cand[keep], avg[keep]
    out = np.full(len(P), np.nan)
    if len(cand) == 0:
        return TraceField(P, out, (lo, hi), len(P))
    X = g.coords[cand]
    tree = cKDTree(X)
    if regions is not None:
        cube_of = regions.ws.locate(X)
    lists = tree.query_ball_point(P, aperture * hi * (1 + 1e-9))
    from degenlab.dyadic import cone
    for k, nb in enumerate(lists):
        if not nb:
            continue
        nb = np.asarray(nb, dtype=int)
        if regions is None:
            d = np.linalg.norm(X[nb] - P[k], axis=1)
            nb = nb[d <= aperture * g.delta[cand[nb]] * (1 + 1e-12)]
        else:
            members = cone(regions, P[k])
            nb = nb[np.isin(cube_of[nb], members)]
        if len(nb):
            out[k] = float(np.mean(avg[nb]))
    return TraceField(P, out, (lo, hi), int(np.sum(~np.isfinite(out))))


# --- extension -------------------------------------------------------------------

def _bspline3(s):
    """Cubic B-spline on [-2, 2], C^2, peak 2/3 at 0."""
    a = np.abs(s)
    return np.where(a < 1, 2 / 3 - a ** 2 + 0.5 * a ** 3,
                    np.where(a < 2, (2 - a) ** 3 / 6, 0.0))


def cube_averages(g, ws, samples, weights):
    """y_I = mu-average of g over B(xi_I, l(I)); xi_I is the sample nearest to X_I."""
    samples = np.asarray(samples, float)
    weights = np.asarray(weights, float)
    gv = g(samples) if callable(g) else np.asarray(g, float)
    tree = cKDTree(samples)
    _, xi = tree.query(ws.center)
    lists = tree.query_ball_point(samples[xi], ws.side)
    y = np.empty(len(ws))
    for k, nb in enumerate(lists):
        if nb:
            nb = np.asarray(nb, dtype=int)
            y[k] = float(np.sum(weights[nb] * gv[nb]) / np.sum(weights[nb]))
        else:
            y[k] = gv[xi[k]]
    return y, xi


def extend(g, ws, samples, weights, grid, normalize=True):
    """Ext g(X) = sum_I phi_I(X) y_I with cubic-spline bumps supported in 2I,
    normalized to a partition of unity.  Nodes outside every support get NaN."""
    y, _ = cube_averages(g, ws, samples, weights)
    num = np.zeros(grid.size)
    den = np.zeros(grid.size)
    h = grid.h
    n = grid.n
    box0 = grid.box[0]
    for s in np.unique(ws.side):
        sel = np.flatnonzero(ws.side == s)
        m = int(math.floor(2 * s / h)) + 2
        offs = np.stack(np.meshgrid(*([np.arange(m)] * n), indexing="ij"), -1).reshape(-1, n)
        chunk = max(1, 2_000_000 // len(offs))
        for c0 in range(0, len(sel), chunk):
            cs = sel[c0:c0 + chunk]
            c = ws.center[cs]
            start = np.ceil((c - s - box0) / h - 1e-9).astype(int)
            ij = start[:, None, :] + offs[None]
            X = box0 + ij * h
            inside = np.all(np.abs(X - c[:, None, :]) < s, axis=-1)
            for a in range(n):
                if grid.periodic[a]:
                    ij[..., a] %= grid.shape[a]
                else:
                    inside &= (ij[..., a] >= 0) & (ij[..., a] < grid.shape[a])
            phi = np.prod(_bspline3(2 * (X - c[:, None, :]) / s), axis=-1) * inside
            k, q = np.nonzero(phi > 0)
            flat = grid.index(tuple(ij[k, q].T))
            np.add.at(num, flat, phi[k, q] * y[cs][k])
            np.add.at(den, flat, phi[k, q])
    vals = np.full(grid.size, np.nan)
    ok = (den > 0) & (grid.cls != EXTERIOR)
    vals[ok] = num[ok] / den[ok] if normalize else num[ok]
    return Field(grid, vals, "ext")


# --- H seminorm ---------------------------------------------------------------------

@dataclass
class HNormQuote:
    value: float
    samples: int
    exclusion: float
    resolution: dict = field(default_factory=dict)

    def to_dict(self):
        return {"value": self.value, "samples": self.samples, "exclusion": self.exclusion,
                "resolution": self.resolution}


class MassTable:
    """m(B(x_i, r) & Omega) for sample points, log-log interpolated in r."""

    def __init__(self, domain, weight, points, r_min, r_max, count=20, resolution=24):
        self.radii = np.geomspace(r_min, r_max, count)
        self.points = np.asarray(points, float)
        vals = np.empty((len(self.points), count))
        for i, x in enumerate(self.points):
            for j, r in enumerate(self.radii):
                vals[i, j] = m_ball(domain, weight, x, r, resolution, richardson=False).value
        self.log_m = np.log(vals)

    def __call__(self, i, r):
        lr = np.log(np.clip(r, self.radii[0], self.radii[-1]))
        lx = np.log(self.radii)
        j = np.clip(np.searchsorted(lx, lr) - 1, 0, len(lx) - 2)
        t = (lr - lx[j]) / (lx[j + 1] - lx[j])
        return np.exp((1 - t) * self.log_m[i, j] + t * self.log_m[i, j + 1])


def _flat_closed_form(domain, weight):
    from degenlab.geometry import FlatSubspace, HalfSpace
    from degenlab.measures import PowerDistanceWeight, UnitWeight, _flat_power_on_gamma
    if isinstance(domain, (FlatSubspace, HalfSpace)) and isinstance(weight, (PowerDistanceWeight, UnitWeight)):
        c = _flat_power_on_gamma(domain, weight, np.zeros(domain.n), 1.0)
        g = weight.gamma if isinstance(weight, PowerDistanceWeight) else 0.0
        return c, domain.n - g
    return None


def h_norm(g, samples, weights, domain, measure, weight, exclusion, mass_table=None):
    """||g||_H^2 = sum_ij W_i W_j rho(x_i, r_ij)^2 |g_i - g_j|^2 / m(B(x_i, r_ij))
    over pairs with r_ij >= exclusion; returns the square root."""
    P = np.asarray(samples, float)
    W = np.asarray(weights, float)
    gv = g(P) if callable(g) else np.asarray(g, float)
    closed = _flat_closed_form(domain, weight)
    if closed is None and mass_table is None:
        span = float(np.max(np.ptp(P, axis=0))) * 1.5 or 1.0
        mass_table = MassTable(domain, weight, P, exclusion, span)
    total = 0.0
    for s in range(0, len(P), 512):
        blk = slice(s, s + 512)
        R = np.linalg.norm(P[blk, None, :] - P[None], axis=-1)
        far = R >= exclusion
        Rs = np.where(far, R, exclusion)
        if closed is not None:
            c, e = closed
            m = c * Rs ** e
        else:
            rows = np.arange(len(P))[blk]
            m = np.stack([mass_table(i, Rs[k]) for k, i in enumerate(rows)])
        mu = np.stack([measure.ball(P[blk], Rs[:, j]) for j in range(len(P))], axis=1)
        dg = (gv[blk, None] - gv[None]) ** 2
        integrand = np.where(far, m * dg / (Rs ** 2 * mu ** 2), 0.0)
        total += float(np.sum(W[blk, None] * W[None] * integrand))
    return HNormQuote(math.sqrt(total), len(P), exclusion,
                      {"closed_form_mass": closed is not None})


def w_norm(u, system):
    """||grad u||_{L^2(m)} over edges whose endpoints both carry finite values."""
    vals = u.values if isinstance(u, Field) else np.asarray(u, float)
    if system.edges is None:
        v = np.where(np.isfinite(vals), vals, 0.0)
        return math.sqrt(max(float(v @ (system.K @ v)), 0.0))
    i, j, c = system.edges
    ok = np.isfinite(vals[i]) & np.isfinite(vals[j])
    return math.sqrt(float(np.sum(c[ok] * (vals[i[ok]] - vals[j[ok]]) ** 2)))


def lipschitz_family(count=10, n=2, seed=0):
    """Deterministic Lipschitz test functions on boundary points (first coordinate
    carries the variation, the rest enter through |x|)."""
    rng = np.random.default_rng(seed)
    fams = []
    for k in range(count):
        kind = k % 5
        a, b = rng.uniform(0.5, 2.0), rng.uniform(-0.5, 0.5)
        if kind == 0:
            fams.append(lambda X, a=a, b=b: np.sin(a * np.pi * X[:, 0] + b))
        elif kind == 1:
            fams.append(lambda X, a=a, b=b: np.abs(X[:, 0] - b) * a)
        elif kind == 2:
            fams.append(lambda X, a=a, b=b: np.maximum(0.0, 1 - a * np.linalg.norm(X - b * np.eye(X.shape[1])[0], axis=1)))
        elif kind == 3:
            fams.append(lambda X, a=a, b=b: np.cos(a * X[:, 0]) * np.cos(a * X[:, -1] + b))
        else:
            fams.append(lambda X, a=a, b=b: a * X[:, 0] + b)
    return fams


# --- Poincare ratios --------------------------------------------------------------------

@dataclass
class PoincareResult:
    ratio: float
    lhs: float
    rhs: float
    scale: float
    degenerate: bool
    nodes: int


def _region_energy(vals, system, nodes):
    inside = np.zeros(system.grid.size, bool)
    inside[nodes] = True
    if system.edges is None:
        v = np.where(inside & np.isfinite(vals), vals, 0.0)
        return float(v @ (system.K @ v))
    i, j, c = system.edges
    ok = inside[i] & inside[j] & np.isfinite(vals[i]) & np.isfinite(vals[j])
    return float(np.sum(c[ok] * (vals[i[ok]] - vals[j[ok]]) ** 2))


def ball_nodes(system, center, r):
    g = system.grid
    idx = np.flatnonzero(g.cls != EXTERIOR)
    tree = _node_tree(system, idx)
    return idx[np.asarray(tree.query_ball_point(np.asarray(center, float), r), dtype=int)]


def tent_nodes(system, regions, tent_obj):
    g = system.grid
    idx = np.flatnonzero(g.cls != EXTERIOR)
    cube = regions.ws.locate(g.coords[idx])
    return idx[np.isin(cube, tent_obj.cubes)]


def poincare_ratio(u, system, region, scale, kind="interior", grad_nodes=None, p=2, k=1.0,
                   mean_nodes=None):
    """LHS / (scale * RHS) for the chosen inequality.

    interior: avg |u - u_B| dm  vs  (avg |grad u|^2 dm)^(1/2)
    tent:     (avg |u - u_T|^(kp) dm)^(1/kp)  vs  (avg |grad u|^p dm)^(1/p), p = 2
    boundary: (avg_{B} |u|^(kp) dm)^(1/kp)  vs  (avg_{lambda B} |grad u|^p dm)^(1/p)
    `grad_nodes` is the node set for the gradient side (defaults to `region`);
    `mean_nodes` is where the subtracted mean is taken (defaults to `region`).
    """
    if p != 2:
        raise InadmissibleInput("only p = 2 is supported by the edge energy")
    vals = u.values if isinstance(u, Field) else np.asarray(u, float)
    nodes = np.asarray(region, dtype=int)
    nodes = nodes[np.isfinite(vals[nodes])]
    gn = nodes if grad_nodes is None else np.asarray(grad_nodes, dtype=int)
    gn = gn[np.isfinite(vals[gn])]
    if len(nodes) == 0 or len(gn) == 0:
        return PoincareResult(math.nan, math.nan, math.nan, scale, True, 0)
    m = system.mass[nodes]
    v = vals[nodes]
    if kind == "interior":
        ub = float(np.sum(m * v) / np.sum(m))
        lhs = float(np.sum(m * np.abs(v - ub)) / np.sum(m))
    elif kind == "tent":
        mn = nodes if mean_nodes is None else np.asarray(mean_nodes, dtype=int)
        mn = mn[np.isfinite(vals[mn])]
        ub = float(np.sum(system.mass[mn] * vals[mn]) / np.sum(system.mass[mn]))
        lhs = float((np.sum(m * np.abs(v - ub) ** (k * p)) / np.sum(m)) ** (1 / (k * p)))
    elif kind == "boundary":
        lhs = float((np.sum(m * np.abs(v) ** (k * p)) / np.sum(m)) ** (1 / (k * p)))
    else:
        raise InadmissibleInput(f"unknown Poincare kind {kind!r}")
    E = _region_energy(vals, system, gn)
    rhs = math.sqrt(max(E, 0.0) / float(np.sum(system.mass[gn])))
    if rhs == 0:
        return PoincareResult(math.nan if lhs == 0 else math.inf, lhs, rhs, scale, True, len(nodes))
    return PoincareResult(lhs / (scale * rhs), lhs, rhs, scale, False, len(nodes))
