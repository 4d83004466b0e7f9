"""Vertex-centred finite volumes for a(u, v) = int w A grad u . grad v on a
Cartesian lattice, with Dirichlet pinning near Gamma and CG / direct solves."""

from __future__ import annotations

import csv
import json
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.stats import qmc

from degenlab.errors import InadmissibleInput, SolverError

INTERIOR, PINNED, OUTER, EXTERIOR = 0, 1, 2, 3
CLASS_NAMES = {INTERIOR: "interior", PINNED: "pinned", OUTER: "outer", EXTERIOR: "exterior"}


class Grid:
    """Node lattice box[0] + h * i over a box; periodic axes wrap around.

    Node classes: pinned iff delta(node) <= pin_radius; exterior for nodes
    outside Omega beyond the pin radius; outer for the remaining nodes on
    non-periodic box faces; interior otherwise.
    """

    def __init__(self, domain, h, box=None, pin_radius=None, periodic=()):
        self.domain = domain
        self.h = float(h)
        self.box = np.asarray(domain.box if box is None else box, float)
        self.n = domain.n
        self.periodic = tuple(bool(a in periodic) for a in range(self.n))
        ext = self.box[1] - self.box[0]
        cells = ext / self.h
        if not np.allclose(cells, np.rint(cells), rtol=0, atol=1e-9):
            raise InadmissibleInput(f"box extents {ext.tolist()} are not multiples of h={h}")
        cells = np.rint(cells).astype(int)
        self.shape = tuple(int(c) if p else int(c) + 1 for c, p in zip(cells, self.periodic))
        self.pin_radius = self.h if pin_radius is None else float(pin_radius)
        axes = [self.box[0, a] + self.h * np.arange(self.shape[a]) for a in range(self.n)]
        self.axes = axes
        mesh = np.meshgrid(*axes, indexing="ij")
        self.coords = np.stack([m.reshape(-1) for m in mesh], axis=1)
        self.delta = domain.distance(self.coords)
        inside = domain.inside(self.coords)
        cls = np.full(self.size, INTERIOR, dtype=np.int8)
        on_face = np.zeros(self.size, bool)
        multi = np.unravel_index(np.arange(self.size), self.shape)
        self.half = np.ones(self.size)
        for a in range(self.n):
            if self.periodic[a]:
                continue
            f = (multi[a] == 0) | (multi[a] == self.shape[a] - 1)
            on_face |= f
            self.half[f] *= 0.5
        cls[on_face] = OUTER
        cls[self.delta <= self.pin_radius * (1 + 1e-12)] = PINNED
        cls[(~inside) & (self.delta > self.pin_radius * (1 + 1e-12))] = EXTERIOR
        self.cls = cls
        self.multi = multi

    @property
    def size(self):
        return int(np.prod(self.shape))

    def mask(self, kind):
        return self.cls == kind

    def counts(self):
        return {CLASS_NAMES[k]: int(np.sum(self.cls == k)) for k in CLASS_NAMES}

    def index(self, multi):
        return np.ravel_multi_index(multi, self.shape)

    def nearest(self, X):
        """Flat index of the lattice node nearest to each point."""
        X = np.atleast_2d(np.asarray(X, float))
        ij = np.rint((X - self.box[0]) / self.h).astype(int)
        for a in range(self.n):
            ij[:, a] = ij[:, a] % self.shape[a] if self.periodic[a] else np.clip(ij[:, a], 0, self.shape[a] - 1)
        return self.index(tuple(ij.T))

    def describe(self):
        return {"h": self.h, "shape": list(self.shape), "box": self.box.tolist(),
                "pin_radius": self.pin_radius, "periodic": list(self.periodic),
                "classes": self.counts()}


class CoefficientField:
    """Normalized matrix field A(X); A = w * A is the full coefficient."""

    def __init__(self, func: Optional[Callable] = None, n=None, diagonal=None, C_A=None,
                 symmetric=None):
        self.func = func
        self.n = n
        self._diagonal = diagonal
        self._symmetric = symmetric
        self.C_A = C_A

    @classmethod
    def identity(cls, n):
        return cls(None, n, diagonal=True, C_A=1.0, symmetric=True)

    @classmethod
    def constant(cls, M):
        M = np.asarray(M, float)
        diag = bool(np.allclose(M, np.diag(np.diag(M))))
        return cls(lambda X: np.broadcast_to(M, X.shape[:-1] + M.shape), M.shape[0],
                   diagonal=diag, symmetric=bool(np.allclose(M, M.T)))

    def __call__(self, X):
        X = np.asarray(X, float)
        if self.func is None:
            return np.broadcast_to(np.eye(X.shape[-1]), X.shape[:-1] + (X.shape[-1],) * 2)
        return np.asarray(self.func(X), float)

    def probe(self, domain, samples=512, seed=0):
        """Ellipticity and boundedness constants on a Sobol probe set."""
        lo, hi = domain.box
        P = qmc.Sobol(domain.n, scramble=True, seed=seed).random(samples) * (hi - lo) + lo
        P = P[domain.inside(P) & (domain.distance(P) > 0)]
        A = self(P)
        sym = 0.5 * (A + np.swapaxes(A, -1, -2))
        lam_min = np.linalg.eigvalsh(sym)[:, 0]
        norm = np.linalg.norm(A, ord=2, axis=(-2, -1))
        i = int(np.argmin(lam_min))
        C = max(float(np.max(norm)), 1.0 / float(lam_min[i]) if lam_min[i] > 0 else math.inf)
        diag = bool(np.allclose(A, A * np.eye(domain.n)))
        symmetric = bool(np.allclose(A, np.swapaxes(A, -1, -2)))
        return {"C_A": C, "lambda_min": float(lam_min.min()), "norm_max": float(norm.max()),
                "worst_point": P[i].tolist(), "diagonal": diag, "symmetric": symmetric}


@dataclass
class LinearSystem:
    grid: Grid
    K: sp.csr_matrix              # all-node operator, rows sum to zero
    mass: np.ndarray              # per-node cell mass m(cell)
    wnode: np.ndarray             # clamped nodal weights
    fixed: np.ndarray             # Dirichlet nodes (pinned + outer when Dirichlet)
    edges: Optional[tuple] = None  # (i, j, conductance) for 2n+1-point stencils
    outer: str = "dirichlet"
    symmetric: bool = True
    diagonal: bool = True
    _factor: object = field(default=None, repr=False)

    @property
    def free(self):
        return ~self.fixed & (self.grid.cls != EXTERIOR)

    def blocks(self):
        if not hasattr(self, "_blocks"):
            f = np.flatnonzero(self.free)
            d = np.flatnonzero(self.fixed)
            Kf = self.K[f]
            self._blocks = (f, d, Kf[:, f].tocsr(), Kf[:, d].tocsr())
        return self._blocks


def _harmonic(a, b):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where((a > 0) & (b > 0), 2 * a * b / (a + b), 0.0)


def assemble(domain, weight, grid, coeff=None, outer="dirichlet", weight_floor=None,
             probe=True):
    """Assemble the finite-volume operator of -div(w A grad).

    Diagonal A: two-point fluxes with harmonic-mean face weights of the nodal
    values w A_aa, w clamped at weight_floor (0.5 h by default).  Full A: a
    cell-based gradient-averaging stencil (9-point in 2D, 27-point in 3D).
    """
    n = grid.n
    coeff = coeff or CoefficientField.identity(n)
    if probe and coeff.func is not None:
        pr = coeff.probe(domain)
        if coeff.C_A is not None and pr["C_A"] > coeff.C_A * (1 + 1e-9):
            raise InadmissibleInput(f"coefficient not elliptic with C_A={coeff.C_A}: {pr}")
        if not math.isfinite(pr["C_A"]):
            raise InadmissibleInput(f"coefficient fails the ellipticity probe: {pr}")
        diagonal, symmetric = pr["diagonal"], pr["symmetric"]
    else:
        diagonal = True if coeff._diagonal is None else coeff._diagonal
        symmetric = True if coeff._symmetric is None else coeff._symmetric
    floor = 0.5 * grid.h if weight_floor is None else weight_floor
    active = grid.cls != EXTERIOR
    w = np.where(active, weight(grid.coords, floor=floor), 0.0)
    mass = w * grid.h ** n * grid.half
    if diagonal:
        K, edges = _two_point(grid, w, coeff, active)
    else:
        K = _cell_stencil(grid, weight, coeff, active, floor)
        edges = None
    fixed = grid.cls == PINNED
    if outer == "dirichlet":
        fixed = fixed | (grid.cls == OUTER)
    elif outer != "neumann":
        raise InadmissibleInput("outer must be 'dirichlet' or 'neumann'")
    return LinearSystem(grid, K, mass, w, fixed, edges, outer, symmetric, diagonal)


def _two_point(grid, w, coeff, active):
    n, h = grid.n, grid.h
    rows, cols, vals = [], [], []
    diagA = None
    if coeff.func is not None:
        diagA = np.diagonal(coeff(grid.coords), axis1=-2, axis2=-1)
    all_i, all_j, all_c = [], [], []
    for a in range(n):
        m = list(grid.multi)
        if grid.periodic[a]:
            src = np.arange(grid.size)
            nb = list(m)
            nb[a] = (m[a] + 1) % grid.shape[a]
        else:
            keep = m[a] < grid.shape[a] - 1
            src = np.flatnonzero(keep)
            nb = [x[keep] for x in m]
            nb[a] = nb[a] + 1
        dst = grid.index(tuple(nb))
        ok = active[src] & active[dst]
        i, j = src[ok], dst[ok]
        wa_i, wa_j = w[i], w[j]
        if diagA is not None:
            wa_i = wa_i * diagA[i, a]
            wa_j = wa_j * diagA[j, a]
        face = h ** (n - 1)
        # dual faces on the box boundary are halved in every other axis
        other = np.ones(len(i))
        for b in range(n):
            if b != a and not grid.periodic[b]:
                mb = grid.multi[b][i]
                other *= np.where((mb == 0) | (mb == grid.shape[b] - 1), 0.5, 1.0)
        c = _harmonic(wa_i, wa_j) * face * other / h
        all_i.append(i)
        all_j.append(j)
        all_c.append(c)
    i = np.concatenate(all_i)
    j = np.concatenate(all_j)
    c = np.concatenate(all_c)
    N = grid.size
    K = sp.coo_matrix((np.concatenate([c, c, -c, -c]),
                       (np.concatenate([i, j, i, j]), np.concatenate([i, j, j, i]))),
                      shape=(N, N)).tocsr()
    return K, (i, j, c)


def _cell_stencil(grid, weight, coeff, active, floor):
    n, h = grid.n, grid.h
    corners = np.array(np.meshgrid(*([[0, 1]] * n), indexing="ij")).reshape(n, -1).T
    m = np.array(grid.multi).T
    lo_ok = np.ones(grid.size, bool)
    for a in range(n):
        if not grid.periodic[a]:
            lo_ok &= m[:, a] < grid.shape[a] - 1
    base = np.flatnonzero(lo_ok)
    nodes = []
    for c in corners:
        mm = m[base] + c
        for a in range(n):
            if grid.periodic[a]:
                mm[:, a] %= grid.shape[a]
        nodes.append(grid.index(tuple(mm.T)))
    nodes = np.stack(nodes, 1)
    ok = np.all(active[nodes], axis=1)
    base, nodes = base[ok], nodes[ok]
    center = grid.coords[base] + 0.5 * h
    A = weight(center, floor=floor)[:, None, None] * coeff(center)
    # gradient of the cell: average of the 2^(n-1) edge differences per axis
    G = np.zeros((n, len(corners)))
    for a in range(n):
        for k, c in enumerate(corners):
            G[a, k] = (1 if c[a] else -1) / (h * 2 ** (n - 1))
    Kloc = h ** n * np.einsum("ak,cab,bl->ckl", G, A, G)
    r = np.repeat(nodes, len(corners), axis=1).reshape(-1)
    q = np.tile(nodes, (1, len(corners))).reshape(-1)
    N = grid.size
    return sp.coo_matrix((Kloc.reshape(-1), (r, q)), shape=(N, N)).tocsr()


# --- solving -------------------------------------------------------------------

_DEFAULTS = {"tol": 1e-10, "strict": False}


@contextmanager
def solver_defaults(**overrides):
    """Temporarily change the defaults picked up by new SolverConfig objects."""
    unknown = set(overrides) - set(_DEFAULTS)
    if unknown:
        raise KeyError(f"unknown solver defaults: {sorted(unknown)}")
    saved = dict(_DEFAULTS)
    _DEFAULTS.update(overrides)
    try:
        yield
    finally:
        _DEFAULTS.clear()
        _DEFAULTS.update(saved)


@dataclass
class SolverConfig:
    tol: float = field(default_factory=lambda: _DEFAULTS["tol"])
    max_iter: Optional[int] = None
    method: str = "auto"          # "cg", "direct" or "auto"
    strict: bool = field(default_factory=lambda: _DEFAULTS["strict"])


@dataclass
class SolveReport:
    iterations: int
    residual: float
    energy: float
    wall_time: float
    method: str
    converged: bool = True
    history: list = field(default_factory=list)

    def to_dict(self):
        return {"iterations": self.iterations, "residual": self.residual, "energy": self.energy,
                "wall_time": self.wall_time, "method": self.method, "converged": self.converged,
                "history_tail": self.history[-5:]}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class Field:
    grid: Grid
    values: np.ndarray
    name: str = "u"
    units: str = "1"

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["node"] + [f"x{a}" for a in range(self.grid.n)] + [self.name])
            for i in np.flatnonzero(self.grid.cls != EXTERIOR):
                wr.writerow([int(i)] + [f"{v:.17g}" for v in self.grid.coords[i]] +
                            [f"{self.values[i]:.17g}"])

    def to_npz(self, path):
        np.savez(path, values=self.values, coords=self.grid.coords, cls=self.grid.cls,
                 name=self.name, units=self.units)


def pcg(A, b, tol=1e-10, max_iter=None, x0=None):
    """Jacobi-preconditioned conjugate gradients; returns x, iterations, history."""
    N = A.shape[0]
    max_iter = max_iter or int(20 * math.sqrt(max(N, 1))) + 50
    dinv = 1.0 / A.diagonal()
    x = np.zeros(N) if x0 is None else x0.copy()
    r = b - A @ x if x0 is not None else b.copy()
    nb = float(np.linalg.norm(b))
    if nb == 0:
        return np.zeros(N), 0, [0.0]
    z = dinv * r
    p = z.copy()
    rz = float(r @ z)
    hist = [float(np.linalg.norm(r)) / nb]
    for it in range(1, max_iter + 1):
        Ap = A @ p
        alpha = rz / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        res = float(np.linalg.norm(r)) / nb
        hist.append(res)
        if res <= tol:
            return x, it, hist
        z = dinv * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(f"CG did not reach tol={tol} in {max_iter} iterations "
                      f"(residual {hist[-1]:.3e})", hist)


def _choose(system, cfg):
    if cfg.method != "auto":
        return cfg.method
    if not system.symmetric:
        return "direct"
    nfree = int(system.free.sum())
    return "direct" if (system.grid.n <= 2 and nfree <= 2_000_000) else "cg"


def factorize(system):
    """Cache a sparse LU of the free block (reused across right-hand sides)."""
    if system._factor is None:
        _, _, Aff, _ = system.blocks()
        # structurally symmetric stencil: minimum degree on A^T + A halves the fill of COLAMD
        system._factor = splu(Aff.tocsc(), permc_spec="MMD_AT_PLUS_A")
    return system._factor


def boundary_values(system, data):
    """Node values on fixed nodes: data(project(X)) on pinned nodes, data(X) on outer ones."""
    g = system.grid
    vals = np.zeros(g.size)
    fixed = np.flatnonzero(system.fixed)
    if callable(data):
        pin = fixed[g.cls[fixed] == PINNED]
        out = fixed[g.cls[fixed] == OUTER]
        if len(pin):
            vals[pin] = data(g.domain.project(g.coords[pin]))
        if len(out):
            vals[out] = data(g.coords[out])
    elif data is None:
        pass
    else:
        data = np.asarray(data, float)
        if data.shape == (g.size,):
            vals[fixed] = data[fixed]
        else:
            raise InadmissibleInput("data must be callable or a node array")
    if not np.all(np.isfinite(vals[fixed])):
        raise InadmissibleInput("non-finite boundary data")
    return vals


def solve_dirichlet(system, data=None, cfg=None, source=None, name="u"):
    """Solve K u = source on free nodes with u = data on fixed nodes."""
    cfg = cfg or SolverConfig()
    t0 = time.perf_counter()
    f, d, Aff, Afd = system.blocks()
    u = boundary_values(system, data)
    b = -(Afd @ u[d])
    if source is not None:
        b = b + np.asarray(source, float)[f]
    method = _choose(system, cfg)
    hist = []
    if len(f) == 0:
        it, res = 0, 0.0
    elif method == "direct":
        x = factorize(system).solve(b)
        it = 1
        nb = float(np.linalg.norm(b))
        res = float(np.linalg.norm(b - Aff @ x)) / nb if nb > 0 else 0.0
        u[f] = x
    elif method == "cg":
        if not system.symmetric:
            raise InadmissibleInput("CG needs a symmetric system")
        x, it, hist = pcg(Aff, b, cfg.tol, cfg.max_iter)
        res = hist[-1]
        u[f] = x
    else:
        raise InadmissibleInput(f"unknown solver method {cfg.method!r}")
    u[system.grid.cls == EXTERIOR] = np.nan
    fld = Field(system.grid, u, name)
    report = SolveReport(int(it), float(res), energy(fld, system), time.perf_counter() - t0,
                         method, True, hist)
    return fld, report


def _vals(u, system):
    v = u.values if isinstance(u, Field) else np.asarray(u, float)
    return np.where(system.grid.cls == EXTERIOR, 0.0, v)


def apply(system, u):
    """K u on all nodes (exterior nodes carry zero)."""
    return system.K @ _vals(u, system)


def subsolution_residual(u, system, tol=1e-9):
    """Per-node (K u) on free nodes; u is a discrete subsolution iff every
    value is <= tol times the scale of K|u|."""
    v = _vals(u, system)
    r = system.K @ v
    free = system.free
    scale = float(np.max(np.abs(system.K) @ np.abs(v))) or 1.0
    out = np.full(system.grid.size, np.nan)
    out[free] = r[free]
    return out, bool(np.all(r[free] <= tol * scale))


def energy(u, system):
    """a(u, u) = u^T K u (>= 0)."""
    v = _vals(u, system)
    return float(v @ (system.K @ v))


def bilinear(u, v, system):
    return float(_vals(u, system) @ (system.K @ _vals(v, system)))


def face_weights(system, axis=None):
    """(i, j, w_face) for the two-point stencil, w_face = conductance * h / area."""
    if system.edges is None:
        raise InadmissibleInput("face weights exist only for diagonal coefficients")
    i, j, c = system.edges
    return i, j, c


def interpolate(u, X):
    """Multilinear interpolation of a node field at points; falls back to the
    nearest node when a surrounding node is exterior."""
    g = u.grid
    X = np.atleast_2d(np.asarray(X, float))
    s = (X - g.box[0]) / g.h
    base = np.floor(s).astype(int)
    frac = s - base
    out = np.zeros(len(X))
    bad = np.zeros(len(X), bool)
    corners = np.array(np.meshgrid(*([[0, 1]] * g.n), indexing="ij")).reshape(g.n, -1).T
    for c in corners:
        ij = base + c
        wgt = np.prod(np.where(c, frac, 1 - frac), axis=1)
        for a in range(g.n):
            if g.periodic[a]:
                ij[:, a] %= g.shape[a]
            else:
                over = ij[:, a] >= g.shape[a]
                ij[:, a] = np.clip(ij[:, a], 0, g.shape[a] - 1)
                bad |= over & (wgt > 0)
        v = u.values[g.index(tuple(ij.T))]
        miss = ~np.isfinite(v) & (wgt > 0)
        bad |= miss
        out += np.where(miss, 0.0, wgt * np.nan_to_num(v))
    if np.any(bad):
        out[bad] = u.values[g.nearest(X[bad])]
    return out
