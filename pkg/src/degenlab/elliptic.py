"""Elliptic measure, regularized Green functions, and numerical verifiers for
the quantitative estimates satisfied by solutions of -div(w A grad u) = 0."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid

from degenlab.discretization import (
    EXTERIOR, OUTER, PINNED, CoefficientField, Field, Grid, SolverConfig, assemble,
    interpolate, solve_dirichlet, subsolution_residual,
)
from degenlab.errors import HypothesisViolation, InadmissibleInput
from degenlab.geometry import FlatSubspace, HalfSpace, corkscrew
from degenlab.measures import PowerDistanceWeight, UnitWeight, m_ball
from degenlab.spaces import _region_energy, ball_nodes

log = logging.getLogger(__name__)


# --- problem setup -----------------------------------------------------------

@dataclass
class Setup:
    """A domain, weight and coefficient discretized at mesh size h."""

    domain: object
    weight: object
    h: float
    box: Optional[np.ndarray] = None
    coeff: Optional[CoefficientField] = None
    outer: str = "dirichlet"
    pin_radius: Optional[float] = None
    cfg: SolverConfig = field(default_factory=SolverConfig)
    reference: bool = True
    periodic: tuple = ()

    def __post_init__(self):
        self._systems = {}
        self._green = {}
        self._hm = {}

    @cached_property
    def grid(self):
        return Grid(self.domain, self.h, self.box, self.pin_radius, self.periodic)

    def system_for(self, outer=None, transpose=False):
        outer = outer or self.outer
        key = (outer, transpose)
        if key not in self._systems:
            coeff = self.coeff
            if transpose and coeff is not None and coeff.func is not None:
                f = coeff.func
                coeff = CoefficientField(lambda X: np.swapaxes(np.asarray(f(X)), -1, -2),
                                         coeff.n, coeff._diagonal, coeff.C_A, coeff._symmetric)
            self._systems[key] = assemble(self.domain, self.weight, self.grid, coeff, outer)
        return self._systems[key]

    @property
    def system(self):
        return self.system_for()

    @property
    def symmetric(self):
        return self.system.symmetric

    def refine(self, factor=2):
        return Setup(self.domain, self.weight, self.h / factor, self.box, self.coeff, self.outer,
                     None if self.pin_radius is None else self.pin_radius / factor, self.cfg,
                     self.reference, self.periodic)

    def describe(self):
        return {"domain": self.domain.describe(), "weight": self.weight.describe(),
                "h": self.h, "outer": self.outer, "grid": self.grid.describe()}


# --- boundary sets and harmonic measure ---------------------------------------

@dataclass
class BoundarySet:
    """A subset E of Gamma given by an indicator on boundary points.

    `reference(X)` is the exact omega^X(E) when known; it supplies outer
    Dirichlet data on truncated unbounded domains.
    """

    indicator: Callable
    label: str
    reference: Optional[Callable] = None

    def complement(self):
        ref = None if self.reference is None else (lambda X, r=self.reference: 1.0 - r(X))
        return BoundarySet(lambda p, f=self.indicator: 1.0 - f(p), f"not({self.label})", ref)

    @classmethod
    def whole(cls):
        return cls(lambda p: np.ones(len(p)), "Gamma", lambda X: np.ones(len(X)))

    @classmethod
    def ball(cls, domain, center, r, width=0.0):
        """Gamma & B(center, r); width > 0 mollifies the edge linearly."""
        c = np.asarray(center, float)

        def ind(p):
            d = np.linalg.norm(np.asarray(p) - c, axis=1)
            if width > 0:
                return np.clip((r + 0.5 * width - d) / width, 0.0, 1.0)
            return (d <= r).astype(float)

        ref = None
        if isinstance(domain, HalfSpace) and domain.n == 2 and width == 0:
            ref = halfplane_reference(c[0] - r, c[0] + r)
        return cls(ind, f"ball({c.tolist()},{r:.6g})", ref)

    @classmethod
    def interval(cls, a, b):
        """[a, b] x {0} on the boundary of the upper half-plane."""
        return cls(lambda p: ((p[:, 0] >= a) & (p[:, 0] <= b)).astype(float),
                   f"interval({a:.6g},{b:.6g})", halfplane_reference(a, b))

    @classmethod
    def cube(cls, tree, k, j):
        """Christ cube Q_j^k, through the labels of the nearest boundary sample."""
        from scipy.spatial import cKDTree
        kd = cKDTree(tree.points)
        lab = tree.labels[k - tree.k_min]

        def ind(p):
            _, i = kd.query(np.asarray(p, float))
            return (lab[i] == j).astype(float)

        return cls(ind, f"cube({k},{j})")


def halfplane_reference(a, b):
    """Exact harmonic measure of [a, b] x {0} in the upper half-plane."""
    def ref(X):
        X = np.atleast_2d(X)
        x, y = X[:, 0], np.maximum(X[:, 1], 1e-300)
        return (np.arctan((b - x) / y) - np.arctan((a - x) / y)) / math.pi
    return ref


@dataclass
class HarmonicMeasureField:
    E: BoundarySet
    field: Field
    setup: Setup
    outer_data: str
    report: object = None

    def at(self, X):
        return interpolate(self.field, X)

    @property
    def values(self):
        return self.field.values

    def check(self, tol=1e-9):
        sys_ = self.setup.system_for(self._outer_mode)
        v = self.values[sys_.grid.cls != EXTERIOR]
        _, sub = subsolution_residual(self.field, sys_, tol)
        _, sup = subsolution_residual(Field(sys_.grid, -self.values), sys_, tol)
        return {"min": float(v.min()), "max": float(v.max()),
                "in_unit_interval": bool(v.min() >= -tol and v.max() <= 1 + tol),
                "solution": bool(sub and sup)}

    @property
    def _outer_mode(self):
        return "neumann" if self.outer_data == "neumann" else "dirichlet"


def _hm_data(system, E, use_reference):
    g = system.grid
    vals = np.zeros(g.size)
    pin = np.flatnonzero(system.fixed & (g.cls == PINNED))
    if len(pin):
        vals[pin] = E.indicator(g.domain.project(g.coords[pin]))
    out = np.flatnonzero(system.fixed & (g.cls == OUTER))
    if len(out) and use_reference and E.reference is not None:
        vals[out] = E.reference(g.coords[out])
    return vals


def harmonic_measure(setup, E, outer=None):
    """omega^X(E) at every node.

    outer: "reference" (exact data on the outer faces when E knows it, zero
    otherwise), "zero", or "neumann".  Default follows the setup.
    """
    if outer is None:
        outer = "neumann" if setup.outer == "neumann" else ("reference" if setup.reference else "zero")
    key = (E.label, outer)
    if key in setup._hm:
        return setup._hm[key]
    mode = "neumann" if outer == "neumann" else "dirichlet"
    system = setup.system_for(mode)
    data = _hm_data(system, E, outer == "reference")
    fld, rep = solve_dirichlet(system, data, setup.cfg, name=f"omega[{E.label}]")
    hm = HarmonicMeasureField(E, fld, setup, outer, rep)
    setup._hm[key] = hm
    return hm


# --- Green functions -------------------------------------------------------------

@dataclass
class GreenField:
    y: np.ndarray
    rho: float
    field: Field
    source: np.ndarray
    s: np.ndarray
    profile: np.ndarray
    delta_y: float
    report: object = None

    def at(self, X):
        return interpolate(self.field, X)

    def gamma_y(self, s):
        """Profile int_s^delta(y) t^2 / m(B(y, t)) dt / t, log-interpolated."""
        s = np.asarray(s, float)
        ls = np.log(np.clip(s, self.s[0], self.s[-1]))
        return np.interp(ls, np.log(self.s), self.profile)

    def pairing(self, source):
        """Average of g against another normalized source, e.g. g(y2, y)."""
        return float(np.nansum(source * self.field.values))


def _pole_source(system, y, rho):
    g = system.grid
    live = system.free
    if rho > 0:
        d = np.linalg.norm(g.coords - y, axis=1)
        hit = live & (d < rho)
    else:
        hit = np.zeros(g.size, bool)
    b = np.zeros(g.size)
    if hit.any():
        b[hit] = system.mass[hit]
    else:
        j = int(g.nearest(y)[0])
        if not live[j]:
            raise InadmissibleInput(f"pole {y.tolist()} does not sit at a free node")
        b[j] = 1.0
    return b / b.sum()


def green_profile(domain, weight, y, delta, s_min, count=64):
    """Tabulate gamma_y on `count` log-spaced s in [s_min, delta]."""
    s = np.geomspace(s_min, delta, count)
    m = np.array([m_ball(domain, weight, y, t, resolution=24, richardson=False).value for t in s])
    integrand = s ** 2 / m                       # integrand in d(log t)
    part = cumulative_trapezoid(integrand, np.log(s), initial=0.0)
    return s, part[-1] - part


def green(setup, y, rho=None, min_ratio=100.0, transpose=False):
    """Regularized Green function g^rho(., y) with zero Dirichlet data everywhere."""
    y = np.asarray(y, float)
    rho = 2 * setup.h if rho is None else float(rho)
    dy = float(setup.domain.distance(y))
    if not setup.domain.inside(y) or dy < min_ratio * rho:
        raise InadmissibleInput(
            f"pole {y.tolist()} has delta={dy:.4g}; minimum admissible delta(y) is {min_ratio * rho:.4g}")
    key = (tuple(np.round(y, 12)), rho, transpose)
    if key in setup._green:
        return setup._green[key]
    system = setup.system_for("dirichlet", transpose)
    b = _pole_source(system, y, rho)
    fld, rep = solve_dirichlet(system, None, setup.cfg, source=b, name="green")
    s, prof = green_profile(setup.domain, setup.weight, y, dy, max(rho, setup.h) / 2)
    gf = GreenField(y, rho, fld, b, s, prof, dy, rep)
    setup._green[key] = gf
    return gf


class _MassRadius:
    """r -> m(B(y, r) & Omega) by log-log interpolation of a table."""

    def __init__(self, domain, weight, y, r_min, r_max, count=24):
        self.r = np.geomspace(r_min, r_max, count)
        self.m = np.array([m_ball(domain, weight, y, t, resolution=32, richardson=False).value
                           for t in self.r])

    def __call__(self, r):
        return np.exp(np.interp(np.log(r), np.log(self.r), np.log(self.m)))


def green_bounds(gf, setup, samples=400, seed=0):
    """Far-field ratio g m(B(y,|x-y|))/|x-y|^2 and near-field ratio g/gamma_y."""
    sys_ = setup.system_for("dirichlet")
    g = sys_.grid
    free = np.flatnonzero(sys_.free)
    d = np.linalg.norm(g.coords[free] - gf.y, axis=1)
    vals = gf.field.values[free]
    rng = np.random.default_rng(seed)
    far = free[d >= gf.delta_y / 10]
    near = free[(d >= 2 * gf.rho) & (d <= gf.delta_y / 2)]
    far = rng.choice(far, min(samples, len(far)), replace=False) if len(far) else far
    near = rng.choice(near, min(samples, len(near)), replace=False) if len(near) else near
    out = {"negative_nodes": int(np.sum(vals < -1e-12 * max(vals.max(), 1e-300)))}
    if len(far):
        r = np.linalg.norm(g.coords[far] - gf.y, axis=1)
        mr = _MassRadius(setup.domain, setup.weight, gf.y, r.min(), r.max())
        ratio = gf.field.values[far] * mr(r) / r ** 2
        out["far"] = {"count": len(far), "max": float(ratio.max()), "min": float(ratio.min()),
                      "nodes": far.tolist(), "ratios": ratio.tolist()}
    if len(near):
        r = np.linalg.norm(g.coords[near] - gf.y, axis=1)
        ratio = gf.field.values[near] / gf.gamma_y(r)
        out["near"] = {"count": len(near), "max": float(ratio.max()), "min": float(ratio.min())}
    return out


def green_symmetry(setup, y1, y2, rho=None):
    """|g(y2, y1) - g_T(y1, y2)| / max g for the regularized kernels."""
    g1 = green(setup, y1, rho)
    if setup.symmetric:
        g2 = green(setup, y2, rho)
    else:
        g2 = green(setup, y2, rho, transpose=True)
    a = g1.pairing(g2.source)
    b = g2.pairing(g1.source)
    scale = max(np.nanmax(g1.field.values), np.nanmax(g2.field.values))
    return abs(a - b) / scale


@dataclass
class Representation:
    field: Field
    direct: Field
    deviation: float
    poles: int


def representation(setup, f, rho=None, min_ratio=100.0):
    """Superpose point-source Green fields against f and compare with a direct solve."""
    sys_ = setup.system_for("dirichlet")
    g = sys_.grid
    fv = f(g.coords) if callable(f) else np.asarray(f, float)
    fv = np.where(sys_.free, fv, 0.0)
    supp = np.flatnonzero(fv != 0)
    rho = 2 * setup.h if rho is None else rho
    if len(supp) and g.delta[supp].min() < min_ratio * rho:
        raise InadmissibleInput(f"source support reaches delta={g.delta[supp].min():.4g} "
                                f"< {min_ratio * rho:.4g}")
    load = fv * sys_.mass
    direct, _ = solve_dirichlet(sys_, None, setup.cfg, source=load, name="direct")
    total = np.zeros(g.size)
    for j in supp:
        e = np.zeros(g.size)
        e[j] = 1.0
        gj, _ = solve_dirichlet(sys_, None, setup.cfg, source=e, name="green")
        total += load[j] * np.nan_to_num(gj.values)
    total[g.cls == EXTERIOR] = np.nan
    scale = float(np.nanmax(np.abs(direct.values))) or 1.0
    dev = float(np.nanmax(np.abs(total - direct.values))) / scale
    return Representation(Field(g, total, "representation"), direct, dev, len(supp))


# --- verifiers --------------------------------------------------------------------

ESTIMATES = ("moser_boundary", "holder_boundary", "harnack", "caccioppoli_boundary",
             "max_principle", "nondegeneracy", "hm_doubling", "green_vs_hm",
             "change_of_pole", "local_comparison")


@dataclass
class EstimateVerdict:
    estimate: str
    samples: list
    worst_constant: float
    constants: list
    exponent: Optional[float]
    stable: bool
    passed: bool
    skipped: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {"estimate": self.estimate, "samples": self.samples,
                "worst_constant": self.worst_constant, "constants": self.constants,
                "exponent": self.exponent, "stable": self.stable, "pass": self.passed,
                "skipped": self.skipped, "details": self.details}

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), default=_jsonable, **kw)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(type(o))


def flat_exponent(domain, weight):
    """alpha with L(delta^alpha) = 0 near a flat Gamma, or None."""
    if not isinstance(domain, (FlatSubspace, HalfSpace)):
        return None
    if isinstance(weight, UnitWeight):
        g = 0.0
    elif isinstance(weight, PowerDistanceWeight):
        g = weight.gamma
    else:
        return None
    return g - (domain.n - domain.dim_gamma - 2)


def _scale(domain, box):
    box = np.asarray(domain.box if box is None else box, float)
    return float(np.min(box[1] - box[0])), box


def _fits_box(domain, box, x, R):
    """Every point of B(x, R) & Omega in a probe set lies in the box."""
    n = domain.n
    dirs = np.vstack([np.eye(n), -np.eye(n)])
    if n > 1:
        diag = np.array(np.meshgrid(*([[-1, 1]] * n), indexing="ij")).reshape(n, -1).T / math.sqrt(n)
        dirs = np.vstack([dirs, diag])
    P = x + R * dirs
    ok = domain.inside(P) & (domain.distance(P) > 0)
    inside_box = np.all((P >= box[0] - 1e-12) & (P <= box[1] + 1e-12), axis=1)
    return bool(np.all(inside_box | ~ok))


def _gamma_candidates(domain, box, L):
    pts = domain.boundary_points(L / 256)
    keep = np.all((pts >= box[0]) & (pts <= box[1]), axis=1)
    return pts[keep]


def _balls(domain, box, rng, count, r_range, reach):
    """(x, r) with x in Gamma and B(x, reach * r) & Omega inside the box."""
    L, box = _scale(domain, box)
    pts = _gamma_candidates(domain, box, L)
    out = []
    for _ in range(50 * count):
        if len(out) == count:
            break
        x = pts[rng.integers(len(pts))]
        r = float(np.exp(rng.uniform(*np.log(r_range))))
        while r >= r_range[0] / 4 and not _fits_box(domain, box, x, reach * r):
            r /= 2
        if r >= r_range[0] / 4:
            out.append((x, r))
    if len(out) < count:
        raise InadmissibleInput(f"found only {len(out)} admissible balls of {count}")
    return out


def _poles(domain, box, rng, count, accept):
    L, box = _scale(domain, box)
    out = []
    for _ in range(2000 * count):
        if len(out) == count:
            break
        X = rng.uniform(box[0] + 0.05 * L, box[1] - 0.05 * L)
        if domain.inside(X) and accept(X):
            out.append(X)
    if len(out) < count:
        raise InadmissibleInput(f"found only {len(out)} admissible poles of {count}")
    return out


def _nodes_in(system, c, r, live_only=True):
    idx = ball_nodes(system, c, r)
    if live_only:
        idx = idx[system.grid.cls[idx] != EXTERIOR]
    return idx


def _avg(system, vals, idx, power=1):
    m = system.mass[idx]
    return float(np.sum(m * np.abs(vals[idx]) ** power) / np.sum(m))


def _zero_trace_solution(setup, x, r, far=3.0):
    """omega(Gamma \\ B(x, far r)): positive, zero trace on B(x, far r)."""
    E = BoundarySet.ball(setup.domain, x, far * r).complement()
    return harmonic_measure(setup, E)


def _cfg_ball(x, r, **kw):
    d = {"x": np.asarray(x).tolist(), "r": float(r)}
    d.update({k: (np.asarray(v).tolist() if isinstance(v, np.ndarray) else v) for k, v in kw.items()})
    return d


def _configs(estimate, setup, samples, rng, params):
    dom, box = setup.domain, setup.box
    L, box = _scale(dom, box)
    r_range = params.get("r_range", (L / 16, L / 8))
    if estimate == "max_principle":
        return [{"seed": int(s)} for s in rng.integers(0, 2 ** 31, samples)]
    if estimate == "harnack":
        def ok(X):
            return _fits_box(dom, box, X, 2 * r_of(X))

        def r_of(X):
            return 0.4 * float(dom.distance(X))
        d_min = params.get("harnack_delta", L / 8)
        poles = _poles(dom, box, rng, samples, lambda X: dom.distance(X) >= d_min and ok(X))
        return [_cfg_ball(X, r_of(X)) for X in poles]
    if estimate == "holder_boundary":
        return [_cfg_ball(x, r) for x, r in
                _balls(dom, box, rng, samples, params.get("r_range", (L / 8, L / 4)), 2.0)]
    if estimate in ("moser_boundary", "caccioppoli_boundary", "nondegeneracy"):
        return [_cfg_ball(x, r) for x, r in _balls(dom, box, rng, samples, r_range, 4.0)]
    if estimate == "hm_doubling":
        per = params.get("poles_per_ball", 4)
        alpha = params.get("alpha", 2.0)
        balls = _balls(dom, box, rng, max(samples // per, 1), params.get("r_range", (L / 24, L / 12)), 2.5)
        out = []
        for x, r in balls:
            for X in _poles(dom, box, rng, per, lambda X: np.linalg.norm(X - x) >= 2 * alpha * r
                            and dom.distance(X) >= r):
                out.append(_cfg_ball(x, r, X=X))
        return out
    if estimate == "green_vs_hm":
        per = params.get("poles_per_ball", 4)
        need = params.get("pole_delta")
        balls = _balls(dom, box, rng, max(samples // per, 1), params.get("r_range", (L / 24, L / 12)), 1.5)
        out = []
        for x, r in balls:
            X0 = corkscrew(dom, x, r).point
            for X in _poles(dom, box, rng, per, lambda X: np.linalg.norm(X - x) >= 2 * r
                            and dom.distance(X) >= need):
                out.append(_cfg_ball(x, r, X=X, X0=X0))
        return out
    if estimate == "change_of_pole":
        balls = _balls(dom, box, rng, samples, params.get("r_range", (L / 16, L / 8)), 2.5)
        pts = _gamma_candidates(dom, box, L)
        out = []
        for x, r in balls:
            X0 = corkscrew(dom, x, r).point
            near = pts[np.linalg.norm(pts - x, axis=1) <= r / 2]
            e, f = near[rng.integers(len(near), size=2)]
            X = _poles(dom, box, rng, 1, lambda X: np.linalg.norm(X - x) >= 2 * r
                       and dom.distance(X) >= r)[0]
            out.append(_cfg_ball(x, r, X=X, X0=X0, e=e, f=f, re=r / 4, rf=r / 8))
        return out
    if estimate == "local_comparison":
        r0 = params.get("r", L / 40)
        balls = _balls(dom, box, rng, samples, (r0, r0 * 1.0001), 1.0)
        pts = _gamma_candidates(dom, box, L)
        out = []
        for x, r in balls:
            X0 = corkscrew(dom, x, r).point
            far = pts[np.linalg.norm(pts - x, axis=1) >= 16 * r + L / 8]
            if not len(far):
                continue
            e = far[rng.integers(len(far))]
            out.append(_cfg_ball(x, r, X0=X0, e=e, re=L / 16))
        return out
    raise InadmissibleInput(f"unknown estimate {estimate!r}; known: {ESTIMATES}")


def _run_one(estimate, setup, cfg, params):
    """Constant (and extras) for one configuration on one setup."""
    sys_ = setup.system
    vals = None
    if estimate == "max_principle":
        rng = np.random.default_rng(cfg["seed"])
        data = rng.uniform(-1, 1, sys_.grid.size)
        fld, rep = solve_dirichlet(sys_, data, setup.cfg)
        fixed = sys_.fixed
        live = sys_.free
        hi, lo = data[fixed].max(), data[fixed].min()
        tol = (1e-12 if rep.method == "direct" else 10 * setup.cfg.tol) * max(abs(hi), abs(lo))
        u = fld.values[live]
        viol = int(np.sum(u > hi + tol) + np.sum(u < lo - tol))
        return {"constant": float((u.max() - hi) / (hi - lo)), "violations": viol}
    x, r = np.asarray(cfg["x"]), cfg["r"]
    if estimate == "harnack":
        alpha = flat_exponent(setup.domain, setup.weight)
        if alpha is None:
            raise InadmissibleInput("harnack oracle needs a flat Gamma with a power weight")
        key = "delta^alpha"
        if key not in setup._hm:
            d = setup.domain.distance
            data = np.where(sys_.grid.cls == PINNED, 0.0, d(sys_.grid.coords) ** alpha)
            setup._hm[key], _ = solve_dirichlet(sys_, data, setup.cfg, name=key)
        u = setup._hm[key]
        idx = _nodes_in(sys_, x, r)
        v = u.values[idx]
        dl = sys_.grid.delta[idx]
        ratio = float(v.max() / v.min())
        closed = float((dl.max() / dl.min()) ** alpha)
        return {"constant": ratio, "closed_form": closed, "deviation": abs(ratio / closed - 1)}
    if estimate in ("moser_boundary", "holder_boundary", "caccioppoli_boundary"):
        u = _zero_trace_solution(setup, x, r, 1.5 if estimate == "holder_boundary" else 3.0).values
        if estimate == "moser_boundary":
            sup = float(np.nanmax(u[_nodes_in(sys_, x, r)]))
            mean = _avg(sys_, u, _nodes_in(sys_, x, 2 * r))
            return {"constant": sup / mean if mean > 0 else math.inf}
        if estimate == "caccioppoli_boundary":
            e = _region_energy(u, sys_, _nodes_in(sys_, x, r))
            idx = _nodes_in(sys_, x, 2 * r)
            l2 = float(np.sum(sys_.mass[idx] * u[idx] ** 2))
            return {"constant": r ** 2 * e / l2 if l2 > 0 else math.inf}
        s_min = params.get("s_min_h", 2.0) * params.get("h_max", setup.h)
        ss, osc = [], []
        s = r
        while s >= s_min:
            idx = _nodes_in(sys_, x, s)
            v = u[idx]
            ss.append(s)
            osc.append(float(np.nanmax(v) - np.nanmin(v)))
            s /= 2
        ss, osc = np.array(ss), np.array(osc)
        if len(ss) < 3 or np.any(osc <= 0):
            raise InadmissibleInput(f"too few dyadic scales above {s_min:.3g}")
        a, lc = np.polyfit(np.log(ss / r), np.log(osc), 1)
        C = float(np.max(osc / (ss / r) ** a))
        return {"constant": C, "exponent": float(a)}
    if estimate == "nondegeneracy":
        alpha = params.get("alpha", 2.0)
        om = harmonic_measure(setup, BoundarySet.ball(setup.domain, x, r)).values
        idx = _nodes_in(sys_, x, r / alpha)
        idx = idx[sys_.free[idx]]
        if idx.size == 0:
            raise InadmissibleInput(f"no free nodes within r/{alpha} of the boundary point")
        return {"constant": 1.0 / float(np.min(om[idx]))}
    if estimate == "hm_doubling":
        X = np.asarray(cfg["X"])[None]
        w1 = harmonic_measure(setup, BoundarySet.ball(setup.domain, x, r)).at(X)[0]
        w2 = harmonic_measure(setup, BoundarySet.ball(setup.domain, x, 2 * r)).at(X)[0]
        out = {"constant": float(w2 / w1)}
        ref = BoundarySet.ball(setup.domain, x, r).reference
        if ref is not None:
            ex = float(BoundarySet.ball(setup.domain, x, 2 * r).reference(X)[0] / ref(X)[0])
            out["oracle"] = ex
            out["deviation"] = abs(out["constant"] / ex - 1)
        return out
    if estimate == "green_vs_hm":
        X, X0 = np.asarray(cfg["X"]), np.asarray(cfg["X0"])
        om = harmonic_measure(setup, BoundarySet.ball(setup.domain, x, r), outer="zero").at(X[None])[0]
        gX = green(setup, X, transpose=not setup.symmetric).at(X0[None])[0]
        m = m_ball(setup.domain, setup.weight, x, r).value
        ratio = r ** 2 * om / (m * gX)
        return {"constant": float(max(ratio, 1 / ratio)), "ratio": float(ratio)}
    if estimate == "change_of_pole":
        X, X0 = np.asarray(cfg["X"])[None], np.asarray(cfg["X0"])[None]
        wE = harmonic_measure(setup, BoundarySet.ball(setup.domain, cfg["e"], cfg["re"]))
        wF = harmonic_measure(setup, BoundarySet.ball(setup.domain, cfg["f"], cfg["rf"]))
        v = (wE.at(X)[0] / wF.at(X)[0]) / (wE.at(X0)[0] / wF.at(X0)[0])
        return {"constant": float(max(v, 1 / v)), "ratio": float(v)}
    if estimate == "local_comparison":
        X0 = np.asarray(cfg["X0"])[None]
        Ks = params.get("Ks", (2, 4, 8, 16))
        v = harmonic_measure(setup, BoundarySet.ball(setup.domain, cfg["e"], cfg["re"])).values
        idx = _nodes_in(sys_, x, r)
        idx = idx[sys_.free[idx]]
        v0 = interpolate(Field(sys_.grid, v), X0)[0]
        per_K = {}
        for K in Ks:
            u = harmonic_measure(setup, BoundarySet.ball(setup.domain, x, K * r).complement()).values
            u0 = interpolate(Field(sys_.grid, u), X0)[0]
            R = u[idx] * v0 / (v[idx] * u0)
            R = R[np.isfinite(R) & (R > 0)]
            per_K[K] = float(max(R.max(), 1 / R.min()))
        K = params.get("K", 8)
        return {"constant": per_K[K], "per_K": per_K}
    raise InadmissibleInput(f"unknown estimate {estimate!r}")


def _stable(constants, factor=2.0):
    c = [abs(v) for v in constants]
    for a, b in zip(c, c[1:]):
        if not (math.isfinite(a) and math.isfinite(b)):
            return False
        if a == 0 or b == 0:
            continue
        if max(a / b, b / a) > factor:
            return False
    return True


def verify(setups, estimate, samples=20, seed=0, **params):
    """Run one verifier over identical sample configurations on every setup.

    setups is a Setup or a list of successive refinements.  The verdict keeps
    the worst constant per setup and flags refinement stability (x2).
    """
    if isinstance(setups, Setup):
        setups = [setups]
    if estimate not in ESTIMATES:
        raise InadmissibleInput(f"unknown estimate {estimate!r}; known: {ESTIMATES}")
    rng = np.random.default_rng(seed)
    coarse = setups[0]
    params.setdefault("h_max", max(s.h for s in setups))
    if estimate == "green_vs_hm":
        params.setdefault("pole_delta", 200 * params["h_max"] * 1.02)
    if estimate == "max_principle" and samples == 20:
        samples = 100
    configs = _configs(estimate, coarse, samples, rng, params)
    skipped, results = [], []
    for st in setups:
        level = []
        for i, cfg in enumerate(configs):
            try:
                level.append(_run_one(estimate, st, cfg, params))
            except (InadmissibleInput, HypothesisViolation) as exc:
                log.info("skipping %s sample %d at h=%g: %s", estimate, i, st.h, exc)
                skipped.append({"index": i, "h": st.h, "reason": str(exc)})
                level.append(None)
        results.append(level)
    keep = [i for i in range(len(configs)) if all(lv[i] is not None for lv in results)]
    if not keep:
        return EstimateVerdict(estimate, configs, math.nan, [], None, False, False, skipped,
                               {"h": [s.h for s in setups]})
    constants = [max(lv[i]["constant"] for i in keep) for lv in results]
    details = {"h": [s.h for s in setups], "kept": keep}
    exponent = None
    stable = _stable(constants)
    ok = stable and all(math.isfinite(c) for c in constants)
    if estimate == "max_principle":
        viol = [sum(lv[i]["violations"] for i in keep) for lv in results]
        details["violations"] = viol
        stable = True
        ok = all(v == 0 for v in viol)
    elif estimate == "harnack":
        dev = [max(lv[i]["deviation"] for i in keep) for lv in results]
        details["max_deviation"] = dev
        ok = ok and dev[-1] <= params.get("harnack_tol", 0.05)
    elif estimate == "holder_boundary":
        ex = [min(lv[i]["exponent"] for i in keep) for lv in results]
        details["min_exponent"] = ex
        details["median_exponent"] = [float(np.median([lv[i]["exponent"] for i in keep])) for lv in results]
        exponent = ex[-1]
        ok = ok and exponent > 0
    elif estimate == "hm_doubling" and "deviation" in results[-1][keep[0]]:
        oracle = max(results[-1][i]["oracle"] for i in keep)
        details["oracle_constant"] = oracle
        details["oracle_deviation"] = abs(constants[-1] / oracle - 1)
    elif estimate == "local_comparison":
        Ks = params.get("Ks", (2, 4, 8, 16))
        perK = {K: max(results[-1][i]["per_K"][K] for i in keep) for K in Ks}
        details["per_K"] = perK
        ref = perK[max(Ks)]
        details["smallest_stable_K"] = next(K for K in Ks if perK[K] <= 1.25 * ref)
    elif estimate in ("green_vs_hm", "change_of_pole"):
        details["ratio_range"] = [[min(lv[i]["ratio"] for i in keep), max(lv[i]["ratio"] for i in keep)]
                                  for lv in results]
    return EstimateVerdict(estimate, configs, constants[-1], constants, exponent, stable, ok,
                           skipped, details)
