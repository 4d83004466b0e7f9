"""Domains Omega = R^n minus Gamma (or bounded variants) with exact distance
oracles, plus corkscrew points, Harnack chains and Whitney decompositions."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import qmc

from degenlab.errors import HypothesisViolation, InadmissibleInput

CANTOR_DEPTH = 20
CANTOR_DIM = math.log(2) / math.log(3)


def _as_points(X, n):
    X = np.asarray(X, dtype=float)
    if X.shape[-1] != n:
        raise InadmissibleInput(f"expected points of dimension {n}, got shape {X.shape}")
    return X


def _interval_gap(lo, hi, a=0.0, b=0.0):
    """Distance between intervals [lo, hi] and [a, b], elementwise."""
    return np.maximum(np.maximum(lo - b, a - hi), 0.0)


class DomainSpec:
    """Base class: subclasses fill in the oracles for one boundary kind.

    All oracles are vectorized over a leading axis of points (shape (..., n)).
    Instances are immutable after construction.
    """

    kind = "abstract"
    bounded_omega = False
    bounded_gamma = False

    def __init__(self, n, box, name=None, dim_gamma=None):
        self.n = int(n)
        box = np.asarray(box, dtype=float)
        if box.shape != (2, self.n) or np.any(box[1] <= box[0]):
            raise InadmissibleInput(f"bad box {box!r} for n={n}")
        self.box = box
        self.box.setflags(write=False)
        self.name = name or self.kind
        self.dim_gamma = dim_gamma

    # --- oracles -----------------------------------------------------------
    def distance(self, X):
        raise NotImplementedError

    def project(self, X):
        """Nearest point of Gamma."""
        raise NotImplementedError

    def inside(self, X):
        """Membership in Omega (points of Gamma itself report False)."""
        return self.distance(X) > 0

    def weight_distance(self, X):
        """Distance to the set that carries the power weight."""
        return self.distance(X)

    def box_distance(self, lo, hi):
        """dist(box, Gamma) for boxes [lo, hi]; exact unless overridden otherwise.

        The default is the conservative lower bound delta(center) - half diagonal.
        """
        lo = np.asarray(lo, float)
        hi = np.asarray(hi, float)
        c = 0.5 * (lo + hi)
        half = 0.5 * np.linalg.norm(hi - lo, axis=-1)
        return np.maximum(self.distance(c) - half, 0.0)

    box_distance_exact = False

    def box_outside(self, lo, hi):
        """True when the box certainly misses Omega."""
        return np.zeros(np.asarray(lo).shape[:-1], dtype=bool)

    def normal(self, x):
        """Preferred direction into Omega at a boundary point, or None."""
        return None

    def boundary_points(self, spacing):
        """Points of Gamma inside the box, roughly `spacing` apart."""
        raise NotImplementedError

    @property
    def diam_gamma(self):
        return math.inf

    @property
    def diam_omega(self):
        return math.inf

    def describe(self):
        return {"kind": self.kind, "name": self.name, "n": self.n,
                "dim_gamma": self.dim_gamma, "box": self.box.tolist(),
                "bounded_omega": self.bounded_omega,
                "bounded_gamma": self.bounded_gamma,
                "diam_gamma": None if math.isinf(self.diam_gamma) else self.diam_gamma}

    def __repr__(self):
        return f"{type(self).__name__}(name={self.name!r}, n={self.n})"


class FlatSubspace(DomainSpec):
    """Gamma = R^d x {0}; Omega = R^n minus Gamma."""

    kind = "flat-subspace"
    box_distance_exact = True

    def __init__(self, d, n, box, name=None):
        if not 0 <= d < n:
            raise InadmissibleInput(f"need 0 <= d < n, got d={d}, n={n}")
        super().__init__(n, box, name, dim_gamma=d)
        self.d = d

    def distance(self, X):
        X = _as_points(X, self.n)
        return np.linalg.norm(X[..., self.d:], axis=-1)

    def project(self, X):
        P = np.array(_as_points(X, self.n), dtype=float, copy=True)
        P[..., self.d:] = 0.0
        return P

    def box_distance(self, lo, hi):
        lo = np.asarray(lo, float)
        hi = np.asarray(hi, float)
        gap = _interval_gap(lo[..., self.d:], hi[..., self.d:])
        return np.linalg.norm(gap, axis=-1)

    def normal(self, x):
        e = np.zeros(self.n)
        e[self.d] = 1.0
        return e

    def boundary_points(self, spacing):
        axes = [np.arange(self.box[0, i] + spacing / 2, self.box[1, i], spacing)
                for i in range(self.d)]
        if self.d == 0:
            return np.zeros((1, self.n))
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.d)
        P = np.zeros((len(grid), self.n))
        P[:, : self.d] = grid
        return P


class HalfSpace(DomainSpec):
    """Omega = {x_n > 0}, Gamma = R^(n-1) x {0}."""

    kind = "half-space"
    box_distance_exact = True

    def __init__(self, n, box, name=None):
        super().__init__(n, box, name, dim_gamma=n - 1)

    def distance(self, X):
        X = _as_points(X, self.n)
        return np.abs(X[..., -1])

    def inside(self, X):
        return _as_points(X, self.n)[..., -1] > 0

    def project(self, X):
        P = np.array(_as_points(X, self.n), dtype=float, copy=True)
        P[..., -1] = 0.0
        return P

    def box_distance(self, lo, hi):
        return _interval_gap(np.asarray(lo, float)[..., -1], np.asarray(hi, float)[..., -1])

    def box_outside(self, lo, hi):
        return np.asarray(hi)[..., -1] <= 0

    def normal(self, x):
        e = np.zeros(self.n)
        e[-1] = 1.0
        return e

    def boundary_points(self, spacing):
        axes = [np.arange(self.box[0, i] + spacing / 2, self.box[1, i], spacing)
                for i in range(self.n - 1)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.n - 1)
        return np.hstack([grid, np.zeros((len(grid), 1))])


class BallMinusDiameter(DomainSpec):
    """Unit ball minus its diameter along the first axis.

    Gamma = sphere + diameter; the power weight is carried by the line.
    """

    kind = "ball-minus-diameter"
    bounded_omega = True
    bounded_gamma = True
    box_distance_exact = True

    def __init__(self, n, box=None, name=None):
        if n < 2:
            raise InadmissibleInput("need n >= 2")
        if box is None:
            box = [[-1.0] * n, [1.0] * n]
        super().__init__(n, box, name, dim_gamma=1)

    def _line_dist(self, X):
        return np.linalg.norm(X[..., 1:], axis=-1)

    def distance(self, X):
        X = _as_points(X, self.n)
        r = np.linalg.norm(X, axis=-1)
        seg = np.hypot(np.maximum(np.abs(X[..., 0]) - 1.0, 0.0), self._line_dist(X))
        return np.minimum(np.abs(1.0 - r), seg)

    def inside(self, X):
        X = _as_points(X, self.n)
        return (np.linalg.norm(X, axis=-1) < 1.0) & (self._line_dist(X) > 0)

    def weight_distance(self, X):
        return self._line_dist(_as_points(X, self.n))

    def project(self, X):
        X = _as_points(X, self.n)
        r = np.linalg.norm(X, axis=-1)
        safe = np.where(r > 0, r, 1.0)
        on_sphere = X / safe[..., None]
        on_sphere = np.where((r > 0)[..., None], on_sphere, np.eye(self.n)[0])
        on_seg = np.zeros_like(X)
        on_seg[..., 0] = np.clip(X[..., 0], -1.0, 1.0)
        d_sph = np.abs(1.0 - r)
        d_seg = np.linalg.norm(X - on_seg, axis=-1)
        return np.where((d_sph <= d_seg)[..., None], on_sphere, on_seg)

    def box_distance(self, lo, hi):
        lo = np.asarray(lo, float)
        hi = np.asarray(hi, float)
        near = np.clip(0.0, lo, hi)
        far = np.maximum(np.abs(lo), np.abs(hi))
        rmin = np.linalg.norm(near, axis=-1)
        rmax = np.linalg.norm(far, axis=-1)
        d_sph = np.where(rmax < 1.0, 1.0 - rmax, np.where(rmin > 1.0, rmin - 1.0, 0.0))
        gx = _interval_gap(lo[..., 0], hi[..., 0], -1.0, 1.0)
        gt = np.linalg.norm(_interval_gap(lo[..., 1:], hi[..., 1:]), axis=-1)
        return np.minimum(d_sph, np.hypot(gx, gt))

    def box_outside(self, lo, hi):
        near = np.clip(0.0, np.asarray(lo, float), np.asarray(hi, float))
        return np.linalg.norm(near, axis=-1) >= 1.0

    def normal(self, x):
        x = np.asarray(x, float)
        if abs(np.linalg.norm(x) - 1.0) < 1e-9:
            return -x / np.linalg.norm(x)
        e = np.zeros(self.n)
        e[1] = 1.0
        return e

    def boundary_points(self, spacing):
        seg = np.arange(-1.0 + spacing / 2, 1.0, spacing)
        P1 = np.zeros((len(seg), self.n))
        P1[:, 0] = seg
        return np.vstack([P1, sphere_points(self.n, spacing)])

    @property
    def diam_gamma(self):
        return 2.0

    @property
    def diam_omega(self):
        return 2.0


def sphere_points(n, spacing):
    """Near-uniform points on the unit sphere of R^n (n = 2 or 3)."""
    if n == 2:
        k = max(int(math.ceil(2 * math.pi / spacing)), 8)
        th = (np.arange(k) + 0.5) * 2 * math.pi / k
        return np.stack([np.cos(th), np.sin(th)], axis=1)
    if n == 3:
        k = max(int(math.ceil(4 * math.pi / spacing ** 2)), 32)
        i = np.arange(k) + 0.5
        z = 1 - 2 * i / k
        phi = math.pi * (1 + math.sqrt(5)) * i
        s = np.sqrt(1 - z ** 2)
        return np.stack([z, s * np.cos(phi), s * np.sin(phi)], axis=1)
    raise InadmissibleInput("sphere sampling only for n = 2, 3")


def cantor_neighbors(x, depth=CANTOR_DEPTH):
    """Largest point of the middle-thirds Cantor set <= x and smallest >= x.

    Resolution 3**-depth: inside a surviving interval at full depth both
    neighbours are reported as x itself.
    """
    x = np.asarray(x, dtype=float)
    pred = np.full(x.shape, np.nan)
    succ = np.full(x.shape, np.nan)
    left = x < 0
    right = x > 1
    succ[left] = 0.0
    pred[right] = 1.0
    active = ~(left | right)
    a = np.zeros(x.shape)
    L = 1.0
    for _ in range(depth):
        L3 = L / 3.0
        g1 = a + L3
        g2 = a + 2 * L3
        in_gap = active & (x > g1) & (x < g2)
        pred[in_gap] = g1[in_gap]
        succ[in_gap] = g2[in_gap]
        active &= ~in_gap
        a = np.where(active & (x >= g2), g2, a)
        L = L3
    pred[active] = x[active]
    succ[active] = x[active]
    return pred, succ


def cantor_distance_1d(x, depth=CANTOR_DEPTH):
    pred, succ = cantor_neighbors(x, depth)
    x = np.asarray(x, float)
    dp = np.where(np.isnan(pred), np.inf, x - pred)
    ds = np.where(np.isnan(succ), np.inf, succ - x)
    return np.minimum(dp, ds)


class CantorBoundary(DomainSpec):
    """Gamma = middle-thirds Cantor set in [0,1] x {0} inside R^2."""

    kind = "cantor-boundary"
    bounded_gamma = True
    box_distance_exact = True

    def __init__(self, box=None, name=None, depth=CANTOR_DEPTH):
        if box is None:
            box = [[-1.0, -1.5], [2.0, 1.5]]
        super().__init__(2, box, name, dim_gamma=CANTOR_DIM)
        self.depth = depth

    def distance(self, X):
        X = _as_points(X, 2)
        return np.hypot(cantor_distance_1d(X[..., 0], self.depth), X[..., 1])

    def project(self, X):
        X = _as_points(X, 2)
        pred, succ = cantor_neighbors(X[..., 0], self.depth)
        x = X[..., 0]
        dp = np.where(np.isnan(pred), np.inf, x - pred)
        ds = np.where(np.isnan(succ), np.inf, succ - x)
        px = np.where(dp <= ds, pred, succ)
        return np.stack([px, np.zeros_like(px)], axis=-1)

    def box_distance(self, lo, hi):
        lo = np.asarray(lo, float)
        hi = np.asarray(hi, float)
        pred, succ = cantor_neighbors(lo[..., 0], self.depth)
        hits = ~np.isnan(succ) & (succ <= hi[..., 0])
        d_succ = np.where(np.isnan(succ), np.inf, succ - hi[..., 0])
        d_pred = np.where(np.isnan(pred), np.inf, lo[..., 0] - pred)
        dx = np.where(hits, 0.0, np.maximum(np.minimum(d_succ, d_pred), 0.0))
        dy = _interval_gap(lo[..., 1], hi[..., 1])
        return np.hypot(dx, dy)

    def normal(self, x):
        return np.array([0.0, 1.0])

    def boundary_points(self, spacing):
        k = max(int(math.ceil(math.log(1.0 / spacing) / math.log(3))), 1)
        return np.stack([cantor_left_endpoints(k), np.zeros(2 ** k)], axis=1)

    @property
    def diam_gamma(self):
        return 1.0


def cantor_left_endpoints(k):
    """Left endpoints of the 2**k generation-k Cantor intervals, in order."""
    pts = np.zeros(1)
    L = 1.0
    for _ in range(k):
        L /= 3.0
        pts = np.concatenate([pts[:, None], pts[:, None] + 2 * L], axis=1).ravel()
    return pts


class SawtoothGraph(DomainSpec):
    """Sawtooth region above a Lipschitz graph Gamma_0 = {(x, A(x))} in R^3:
    Omega_s = {(x, t) : |t - A(x)| > M dist(x, F)} with F the kept set.

    A is piecewise linear (knots, values in R^2); E = R minus F is a finite
    union of open intervals. Distances are minima over a sampled family of
    fibres, hence resolution-bounded but exactly 1-Lipschitz.
    """

    kind = "sawtooth-graph"
    box_distance_exact = False

    def __init__(self, knots, values, removed, box=None, name=None, resolution=2e-3,
                 M=None):
        if box is None:
            box = [[-1.0] * 3, [1.0] * 3]
        super().__init__(3, box, name, dim_gamma=1)
        self.knots = np.asarray(knots, float)
        self.values = np.asarray(values, float).reshape(len(self.knots), 2)
        self.removed = [tuple(map(float, iv)) for iv in removed]
        slopes = np.diff(self.values, axis=0) / np.diff(self.knots)[:, None]
        self.lipschitz = float(np.max(np.linalg.norm(slopes, axis=1))) if len(slopes) else 0.0
        # M strictly above the Lipschitz norm; a flat graph still needs a cone
        self.M = float(M) if M is not None else max(2.0 * self.lipschitz, 1.0)
        lo, hi = self.box[0, 0] - 1.0, self.box[1, 0] + 1.0
        self._xs = np.arange(lo, hi + resolution, resolution)
        self._As = self.A(self._xs)
        self._Rs = self.M * self.dist_to_F(self._xs)
        self.resolution = resolution

    def A(self, x):
        x = np.asarray(x, float)
        return np.stack([np.interp(x, self.knots, self.values[:, j]) for j in range(2)], axis=-1)

    def dist_to_F(self, x):
        x = np.asarray(x, float)
        d = np.zeros(x.shape)
        for a, b in self.removed:
            inside = (x > a) & (x < b)
            d = np.where(inside, np.minimum(x - a, b - x), d)
        return d

    def _fibre_min(self, X, target="omega", chunk=2048):
        X = _as_points(X, 3)
        flat = X.reshape(-1, 3)
        best = np.empty(len(flat))
        arg = np.empty(len(flat), dtype=int)
        R = self._Rs if target == "omega" else np.zeros_like(self._Rs)
        for s in range(0, len(flat), chunk):
            P = flat[s:s + chunk]
            dx = P[:, None, 0] - self._xs[None, :]
            dt = np.linalg.norm(P[:, None, 1:] - self._As[None, :, :], axis=-1)
            val = np.hypot(dx, np.abs(dt - R[None, :]))
            k = np.argmin(val, axis=1)
            arg[s:s + chunk] = k
            best[s:s + chunk] = val[np.arange(len(P)), k]
        return best.reshape(X.shape[:-1]), arg.reshape(X.shape[:-1])

    def distance(self, X):
        return self._fibre_min(X)[0]

    def inside(self, X):
        X = _as_points(X, 3)
        t = np.linalg.norm(X[..., 1:] - self.A(X[..., 0]), axis=-1)
        return t > self.M * self.dist_to_F(X[..., 0])

    def weight_distance(self, X):
        return self._fibre_min(X, target="graph")[0]

    def project(self, X):
        X = _as_points(X, 3)
        _, k = self._fibre_min(X)
        xs = self._xs[k]
        c = self._As[k]
        R = self._Rs[k]
        v = X[..., 1:] - c
        nv = np.linalg.norm(v, axis=-1, keepdims=True)
        u = np.where(nv > 0, v / np.where(nv > 0, nv, 1.0), np.array([1.0, 0.0]))
        t = c + R[..., None] * u
        return np.concatenate([xs[..., None], t], axis=-1)

    def boundary_points(self, spacing):
        xs = np.arange(self.box[0, 0] + spacing / 2, self.box[1, 0], spacing)
        R = self.M * self.dist_to_F(xs)
        A = self.A(xs)
        pts = [np.column_stack([xs[R == 0], A[R == 0]])]
        for x, a, rad in zip(xs[R > 0], A[R > 0], R[R > 0]):
            k = max(int(math.ceil(2 * math.pi * rad / spacing)), 4)
            th = (np.arange(k) + 0.5) * 2 * math.pi / k
            ring = a + rad * np.stack([np.cos(th), np.sin(th)], axis=1)
            pts.append(np.column_stack([np.full(k, x), ring]))
        return np.vstack(pts)


class PointCloud(DomainSpec):
    """Gamma is a finite point set (a sampled boundary)."""

    kind = "point-cloud"
    bounded_gamma = True
    box_distance_exact = True

    def __init__(self, points, box, name=None, dim_gamma=0):
        points = np.asarray(points, float)
        super().__init__(points.shape[1], box, name, dim_gamma=dim_gamma)
        self.points = points
        self._tree = cKDTree(points)

    def distance(self, X):
        X = _as_points(X, self.n)
        d, _ = self._tree.query(X.reshape(-1, self.n))
        return d.reshape(X.shape[:-1])

    def project(self, X):
        X = _as_points(X, self.n)
        _, i = self._tree.query(X.reshape(-1, self.n))
        return self.points[i].reshape(X.shape)

    def box_distance(self, lo, hi):
        lo = np.atleast_2d(np.asarray(lo, float))
        hi = np.atleast_2d(np.asarray(hi, float))
        out = np.empty(len(lo))
        for i in range(len(lo)):
            c = 0.5 * (lo[i] + hi[i])
            rad = 0.5 * np.linalg.norm(hi[i] - lo[i])
            d0 = self._tree.query(c)[0]
            cand = self._tree.query_ball_point(c, d0 + rad + 1e-12)
            P = self.points[cand]
            out[i] = np.min(np.linalg.norm(_interval_gap(lo[i], hi[i], P, P), axis=1))
        return out.reshape(np.asarray(lo).shape[:-1]) if out.size > 1 else out

    def boundary_points(self, spacing):
        return self.points.copy()

    @property
    def diam_gamma(self):
        P = self.points
        return float(np.max(np.linalg.norm(P[:, None] - P[None], axis=-1))) if len(P) < 3000 else float(
            np.linalg.norm(P.max(0) - P.min(0)))


# --- catalog ----------------------------------------------------------------

def _circle_cloud(k=256):
    th = np.arange(k) * 2 * math.pi / k
    return np.stack([np.cos(th), np.sin(th)], axis=1)


CATALOG = {
    "axis3d": lambda **kw: FlatSubspace(1, 3, kw.get("box", [[-0.5] * 3, [0.5] * 3]), "axis3d"),
    "line2d": lambda **kw: FlatSubspace(1, 2, kw.get("box", [[-1.0] * 2, [1.0] * 2]), "line2d"),
    "halfplane": lambda **kw: HalfSpace(2, kw.get("box", [[-2.0, 0.0], [2.0, 2.0]]), "halfplane"),
    "halfspace3d": lambda **kw: HalfSpace(3, kw.get("box", [[-1.0, -1.0, 0.0], [1.0, 1.0, 1.0]]),
                                          "halfspace3d"),
    "ball-minus-diameter": lambda **kw: BallMinusDiameter(kw.get("n", 3), kw.get("box"),
                                                          "ball-minus-diameter"),
    "disk-minus-diameter": lambda **kw: BallMinusDiameter(2, kw.get("box"), "disk-minus-diameter"),
    "cantor2d": lambda **kw: CantorBoundary(kw.get("box"), "cantor2d"),
    "sawtooth": lambda **kw: SawtoothGraph(
        kw.get("knots", [-1.0, 0.0, 1.0]),
        kw.get("values", [[0.0, 0.0], [0.25, 0.0], [0.0, 0.0]]),
        kw.get("removed", [(-0.5, 0.5)]),
        kw.get("box"), "sawtooth", kw.get("resolution", 2e-3)),
    "point-cloud": lambda **kw: PointCloud(kw.get("points", _circle_cloud()),
                                           kw.get("box", [[-1.5] * 2, [1.5] * 2]), "point-cloud"),
}


def make_domain(domain_id, **params):
    try:
        factory = CATALOG[domain_id]
    except KeyError:
        raise InadmissibleInput(f"unknown domain id {domain_id!r}; known: {sorted(CATALOG)}")
    return factory(**params)


# --- corkscrew points and Harnack chains ------------------------------------

@dataclass(frozen=True)
class Corkscrew:
    point: np.ndarray
    delta: float
    c1: float


def corkscrew(domain, x, r, c1=2.0, samples=256):
    """Point X with |X - x| <= r and B(X, r / c1) inside Omega.

    Candidates, in order: the point at distance r/2 along the domain's normal,
    then a scrambled-free Sobol sample of B(x, r) maximizing the distance.
    """
    x = np.asarray(x, float)
    if r <= 0:
        raise InadmissibleInput("corkscrew radius must be positive")
    if domain.bounded_omega and r > domain.diam_omega * (1 + 1e-12):
        raise InadmissibleInput(f"r={r} exceeds diam(Omega)={domain.diam_omega}")
    need = r / c1
    nu = domain.normal(x)
    best_X, best_d = None, -1.0
    if nu is not None:
        X = x + 0.5 * r * nu
        d = float(domain.distance(X))
        if domain.inside(X) and d >= need * (1 - 1e-12):
            return Corkscrew(X, d, r / d)
        best_X, best_d = X, d if domain.inside(X) else -1.0
    P = _ball_samples(domain.n, samples) * r + x
    ok = domain.inside(P)
    dist = np.where(ok, domain.distance(P), -1.0)
    i = int(np.argmax(dist))
    if dist[i] > best_d:
        best_X, best_d = P[i], float(dist[i])
    if best_d >= need * (1 - 1e-12):
        return Corkscrew(best_X, best_d, r / best_d)
    raise HypothesisViolation(
        f"no corkscrew point with constant {c1} at x={x.tolist()}, r={r}", "H1",
        best=Corkscrew(best_X, best_d, r / best_d if best_d > 0 else math.inf))


_BALL_CACHE = {}


def _ball_samples(n, k):
    key = (n, k)
    if key not in _BALL_CACHE:
        m = 1 << int(math.ceil(math.log2(4 * k)))
        U = qmc.Sobol(n, scramble=False).random(m) * 2 - 1
        U = U[np.linalg.norm(U, axis=1) <= 1][:k]
        _BALL_CACHE[key] = U
    return _BALL_CACHE[key]


@dataclass(frozen=True)
class Chain:
    points: np.ndarray
    radii: np.ndarray = field(default=None)

    @property
    def length(self):
        return len(self.points) - 1


def _segment_clear(domain, A, B, floor):
    L = np.linalg.norm(B - A)
    k = max(int(math.ceil(L / (0.25 * floor))), 1)
    t = np.linspace(0, 1, k + 1)[:, None]
    P = A + t * (B - A)
    return bool(np.all(domain.inside(P)) and np.min(domain.distance(P)) >= floor)


def _walk(domain, A, B, max_steps):
    pts = [A]
    Z = A
    for _ in range(max_steps):
        gap = np.linalg.norm(B - Z)
        dz = float(domain.distance(Z))
        if gap <= 0.5 * dz:
            pts.append(B)
            return pts
        Z = Z + (0.5 * dz / gap) * (B - Z)
        pts.append(Z)
    raise HypothesisViolation("segment walk exceeded its step budget", "H2", best=np.array(pts))


def _link(domain, A, B, max_steps, depth=0):
    floor = 0.25 * min(float(domain.distance(A)), float(domain.distance(B)))
    if np.allclose(A, B):
        return [A]
    if _segment_clear(domain, A, B, floor):
        return _walk(domain, A, B, max_steps)
    if depth >= 4:
        raise HypothesisViolation("no Harnack link found between points", "H2", best=(A, B))
    mid = 0.5 * (A + B)
    rad = 0.5 * np.linalg.norm(B - A)
    P = _ball_samples(domain.n, 256) * rad + mid
    dist = np.where(domain.inside(P), domain.distance(P), -1.0)
    W = P[int(np.argmax(dist))]
    first = _link(domain, A, W, max_steps, depth + 1)
    return first[:-1] + _link(domain, W, B, max_steps, depth + 1)


def harnack_chain(domain, X, Y, r, c1=2.0, max_steps=10_000):
    """Chain Z_0 = X, ..., Z_N = Y with |Z_i - Z_{i+1}| <= delta(Z_i)/2.

    Straight segment walk when Lambda r <= max(delta(X), delta(Y)), or when the
    segment stays clear of Gamma and the walk is no longer than a logarithmic
    budget; otherwise the dyadic corkscrew ladder above the nearest boundary
    points of X and Y.
    """
    X = np.asarray(X, float)
    Y = np.asarray(Y, float)
    dX, dY = float(domain.distance(X)), float(domain.distance(Y))
    if min(dX, dY) <= r:
        raise InadmissibleInput(f"endpoints must satisfy delta > r={r}; got {dX}, {dY}")
    if np.allclose(X, Y):
        return Chain(X[None, :].copy(), np.array([dX / 2]))
    lam = max(np.linalg.norm(X - Y) / r, 1.0)
    if lam * r <= max(dX, dY):
        pts = _walk(domain, X, Y, max_steps)
    else:
        clear = _segment_clear(domain, X, Y, 0.25 * min(dX, dY))
        # a clear but low segment costs ~|X-Y|/delta steps; the ladder costs ~log
        budget = 4 * (math.log2(1 + lam) + 2)
        if clear and _walk_estimate(domain, X, Y) <= budget:
            pts = _walk(domain, X, Y, max_steps)
        else:
            try:
                pts = _ladder_chain(domain, X, Y, dX, dY, lam * r, c1, max_steps)
            except HypothesisViolation:
                if not clear:
                    raise
                pts = _walk(domain, X, Y, max_steps)
    P = np.array(pts)
    return Chain(P, domain.distance(P) / 2)


def _walk_estimate(domain, A, B, samples=64):
    t = (np.arange(samples) + 0.5) / samples
    d = domain.distance(A + t[:, None] * (B - A))
    return float(np.sum(2.0 / d) * np.linalg.norm(B - A) / samples)


def _ladder_chain(domain, X, Y, dX, dY, top, c1, max_steps):
    rungs = _ladder(domain, X, dX, top, c1) + _ladder(domain, Y, dY, top, c1)[::-1]
    pts = [X]
    for A, B in zip(rungs[:-1], rungs[1:]):
        pts.extend(_link(domain, A, B, max_steps)[1:])
    return pts


def _ladder(domain, X, dX, top, c1):
    x = domain.project(X)
    rungs = [X]
    j = 0
    while (2 ** j) * dX < top:
        j += 1
        R = c1 * (2 ** j) * dX
        if domain.bounded_omega:
            R = min(R, domain.diam_omega)
        rungs.append(corkscrew(domain, x, R, c1).point)
        if domain.bounded_omega and R >= domain.diam_omega:
            break
    return rungs


def check_chain(domain, chain, X, r, n_h2=2, c1=2.0):
    """Evaluate the three chain properties; returns a dict of flags and margins."""
    P = chain.points
    d = domain.distance(P)
    steps = np.linalg.norm(np.diff(P, axis=0), axis=1)
    lam = max(np.linalg.norm(P[-1] - P[0]) / r, 1.0)
    reach = np.linalg.norm(P - np.asarray(X), axis=1)
    return {
        "steps_ok": bool(np.all(steps <= 0.5 * d[:-1] * (1 + 1e-12))),
        "floor_ok": bool(np.all(d >= 2.0 ** (-n_h2) * r)),
        "ball_ok": bool(np.all(reach <= c1 * 2 ** (n_h2 + 4) * lam * r)),
        "min_delta_over_r": float(d.min() / r),
        "length": chain.length,
        "lambda": float(lam),
    }


def fit_chain_length(domain, pairs, r):
    """Least-squares fit N ~ A ln(1 + Lambda) + B over (X, Y) pairs."""
    lam, N, skipped = [], [], 0
    for X, Y in pairs:
        try:
            ch = harnack_chain(domain, X, Y, r)
        except HypothesisViolation:
            skipped += 1
            continue
        lam.append(max(np.linalg.norm(np.asarray(X) - np.asarray(Y)) / r, 1.0))
        N.append(ch.length)
    lam = np.array(lam)
    N = np.array(N, float)
    if len(N) < 2:
        return {"A": math.nan, "B": math.nan, "B_envelope": math.nan, "lambda": lam.tolist(),
                "lengths": N.astype(int).tolist(), "skipped": skipped}
    G = np.column_stack([np.log1p(lam), np.ones_like(lam)])
    (A, B), *_ = np.linalg.lstsq(G, N, rcond=None)
    bound_B = float(np.max(N - A * np.log1p(lam)))
    return {"A": float(A), "B": float(B), "B_envelope": bound_B, "lambda": lam.tolist(),
            "lengths": N.astype(int).tolist(), "skipped": skipped}


# --- Whitney decomposition ---------------------------------------------------

@dataclass(frozen=True)
class WhitneySet:
    lo: np.ndarray          # (N, n) lower corners
    side: np.ndarray        # (N,)
    level: np.ndarray       # (N,) generation relative to the root side
    root_side: float
    adj_ptr: np.ndarray
    adj_idx: np.ndarray
    truncated_lo: np.ndarray
    truncated_side: float
    pruned_volume: float
    box: np.ndarray

    @property
    def n(self):
        return self.lo.shape[1]

    @property
    def center(self):
        return self.lo + 0.5 * self.side[:, None]

    @property
    def hi(self):
        return self.lo + self.side[:, None]

    def __len__(self):
        return len(self.side)

    def neighbors(self, i):
        return self.adj_idx[self.adj_ptr[i]:self.adj_ptr[i + 1]]

    def locate(self, X):
        """Index of the cube containing each point (-1 if none)."""
        X = np.atleast_2d(np.asarray(X, float))
        out = np.full(len(X), -1)
        for lev in np.unique(self.level):
            sel = np.nonzero(self.level == lev)[0]
            s = self.side[sel[0]]
            radix = np.int64(2 ** 20)
            cube_ij = np.rint((self.lo[sel] - self.box[0]) / s).astype(np.int64)
            keys = _encode(cube_ij, radix)
            order = np.argsort(keys)
            keys = keys[order]
            ij = np.floor((X - self.box[0]) / s).astype(np.int64)
            valid = np.all((ij >= 0) & (ij < radix), axis=1)
            q = _encode(np.where(valid[:, None], ij, 0), radix)
            pos = np.clip(np.searchsorted(keys, q), 0, len(keys) - 1)
            hit = valid & (keys[pos] == q) & (out < 0)
            out[hit] = sel[order[pos[hit]]]
        return out

    def check(self, domain):
        """Check the distance bracket, the neighbour size ratio and the partition bookkeeping."""
        n = self.n
        diam = math.sqrt(n) * self.side
        lo4 = self.lo - 1.5 * self.side[:, None]
        hi4 = self.hi + 1.5 * self.side[:, None]
        d4 = domain.box_distance(lo4, hi4)
        d1 = domain.box_distance(self.lo, self.hi)
        tol = 1e-12
        lower = (4 * diam <= d4 + tol) & (d4 <= d1 + tol)
        upper = d1 <= 12 * diam + tol
        ratios = []
        for i in range(len(self)):
            nb = self.neighbors(i)
            ratios.append(self.side[nb] / self.side[i])
        ratios = np.concatenate(ratios) if ratios else np.zeros(0)
        wq12 = np.all(np.isin(np.round(ratios, 9), [0.5, 1.0, 2.0]))
        vol = float(np.sum(self.side ** n))
        vol_trunc = len(self.truncated_lo) * self.truncated_side ** n
        box_vol = float(np.prod(self.box[1] - self.box[0]))
        return {
            "cubes": len(self),
            "wq11_lower": float(np.mean(lower)) if len(self) else 1.0,
            "wq11_upper": float(np.mean(upper)) if len(self) else 1.0,
            "wq12": bool(wq12),
            "partition_error": abs(vol + vol_trunc + self.pruned_volume - box_vol) / box_vol,
            "collar_volume": vol_trunc,
            "exact_distances": domain.box_distance_exact,
        }

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(self.n)] + ["side", "generation"])
            for c, s, k in zip(self.center, self.side, self.level):
                w.writerow([f"{v:.17g}" for v in c] + [f"{s:.17g}", int(k)])


def whitney(domain, k_max, box=None):
    """Dyadic Whitney cubes of box & Omega down to side root_side * 2**-k_max.

    A cube is emitted when 4 diam I <= dist(4I, Gamma) and its parent failed the
    same test; unresolved cubes at the floor form the reported collar.
    """
    box = domain.box if box is None else np.asarray(box, float)
    n = domain.n
    ext = box[1] - box[0]
    root = float(np.min(ext))
    counts = np.rint(ext / root).astype(int)
    if not np.allclose(counts * root, ext):
        raise InadmissibleInput("box extents must be integer multiples of the shortest side")
    lo = np.stack(np.meshgrid(*[np.arange(c) for c in counts], indexing="ij"), -1).reshape(-1, n)
    lo = box[0] + lo * root
    emitted_lo, emitted_side, emitted_level = [], [], []
    pruned = 0.0
    side = root
    trunc = np.zeros((0, n))
    corners = np.stack(np.meshgrid(*[[0, 1]] * n, indexing="ij"), -1).reshape(-1, n)
    for k in range(k_max + 1):
        if len(lo) == 0:
            break
        out = domain.box_outside(lo, lo + side)
        pruned += float(np.sum(out)) * side ** n
        lo = lo[~out]
        d4 = domain.box_distance(lo - 1.5 * side, lo + 2.5 * side)
        ok = 4 * math.sqrt(n) * side <= d4
        if np.any(ok):
            c = lo[ok] + 0.5 * side
            inside = domain.inside(c)
            emitted_lo.append(lo[ok][inside])
            emitted_side.append(np.full(int(inside.sum()), side))
            emitted_level.append(np.full(int(inside.sum()), k))
            pruned += float(np.sum(~inside)) * side ** n
        rest = lo[~ok]
        if k == k_max:
            trunc = rest
            break
        side /= 2
        lo = (rest[:, None, :] + corners[None] * side).reshape(-1, n)
    L = np.vstack(emitted_lo) if emitted_lo else np.zeros((0, n))
    S = np.concatenate(emitted_side) if emitted_side else np.zeros(0)
    K = np.concatenate(emitted_level) if emitted_level else np.zeros(0, int)
    ptr, idx = _adjacency(L, S)
    return WhitneySet(L, S, K.astype(int), root, ptr, idx, trunc, root * 2.0 ** (-k_max),
                      pruned, box)


def _encode(ij, radix):
    key = np.zeros(len(ij), dtype=np.int64)
    for j in range(ij.shape[1]):
        key = key * radix + ij[:, j]
    return key


def _adjacency(lo, side):
    N = len(side)
    if N == 0:
        return np.zeros(1, int), np.zeros(0, int)
    hi = lo + side[:, None]
    center = lo + 0.5 * side[:, None]
    levels = np.unique(side)
    trees = {s: (np.nonzero(side == s)[0]) for s in levels}
    pairs = []
    n = lo.shape[1]
    for s1 in levels:
        i1 = trees[s1]
        for s2 in levels:
            if s2 < s1:
                continue
            i2 = trees[s2]
            tree = cKDTree(center[i2])
            rad = 0.5 * (s1 + s2) * math.sqrt(n) * (1 + 1e-9)
            hits = tree.query_ball_point(center[i1], rad)
            for a, lst in zip(i1, hits):
                for b in i2[lst]:
                    if a == b:
                        continue
                    touch = np.all(np.maximum(lo[a], lo[b]) <= np.minimum(hi[a], hi[b]) + 1e-12 * s1)
                    if touch:
                        pairs.append((a, b))
                        pairs.append((b, a))
    if not pairs:
        return np.zeros(N + 1, int), np.zeros(0, int)
    P = np.unique(np.array(pairs), axis=0)
    ptr = np.searchsorted(P[:, 0], np.arange(N + 1))
    return ptr, P[:, 1].copy()
