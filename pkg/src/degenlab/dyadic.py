"""Christ dyadic cubes on sampled boundaries, Whitney regions W_Q / W*_Q,
access cones and tent sets."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from degenlab.errors import HypothesisViolation, InadmissibleInput
from degenlab.geometry import corkscrew, harnack_chain


# --- Christ tree -------------------------------------------------------------

@dataclass
class ChristTree:
    points: np.ndarray
    weights: np.ndarray
    k_min: int
    k_max: int
    labels: list          # per generation: cube index of every sample
    centers: list         # per generation: sample index of each cube center
    parents: list         # per generation: parent cube index (None at k_min)
    method: str
    a0: float = math.nan
    checks: dict = field(default_factory=dict)

    def __post_init__(self):
        self._tree = cKDTree(self.points)
        self._members = {}

    @property
    def generations(self):
        return range(self.k_min, self.k_max + 1)

    def side(self, k):
        return 2.0 ** (-k)

    def count(self, k):
        return len(self.centers[k - self.k_min])

    def center(self, k, j):
        return self.points[self.centers[k - self.k_min][j]]

    def members(self, k, j):
        key = (k, j)
        if key not in self._members:
            self._members[key] = np.flatnonzero(self.labels[k - self.k_min] == j)
        return self._members[key]

    def mass(self, k):
        return np.bincount(self.labels[k - self.k_min], weights=self.weights,
                           minlength=self.count(k))

    def parent(self, k, j):
        if k == self.k_min:
            return None
        return (k - 1, int(self.parents[k - self.k_min][j]))

    def children(self, k, j):
        if k == self.k_max:
            return []
        return [(k + 1, int(c)) for c in np.flatnonzero(self.parents[k + 1 - self.k_min] == j)]

    def descendants(self, k, j, depth=None):
        """All cubes (k', j') with k' >= k contained in (k, j), including itself."""
        out = [(k, j)]
        frontier = np.array([j])
        stop = self.k_max if depth is None else min(self.k_max, k + depth)
        for kk in range(k + 1, stop + 1):
            frontier = np.flatnonzero(np.isin(self.parents[kk - self.k_min], frontier))
            out.extend((kk, int(c)) for c in frontier)
        return out

    def locate(self, x, k):
        """Generation-k cube containing the boundary point nearest to x."""
        _, i = self._tree.query(np.asarray(x, float))
        return int(self.labels[k - self.k_min][i])

    def dilate(self, k, j, lam=2.0):
        """Sample indices of lam*Q = {x : dist(x, Q) <= (lam - 1) l(Q)}."""
        mem = self.points[self.members(k, j)]
        t = cKDTree(mem)
        d, _ = t.query(self.points, distance_upper_bound=(lam - 1) * self.side(k) * (1 + 1e-12))
        return np.flatnonzero(np.isfinite(d))

    def to_dict(self):
        cubes = []
        for k in self.generations:
            mass = self.mass(k)
            for j in range(self.count(k)):
                p = self.parent(k, j)
                cubes.append({"id": f"{k}:{j}", "generation": k,
                              "center": self.center(k, j).tolist(),
                              "parent": None if p is None else f"{p[0]}:{p[1]}",
                              "mass": float(mass[j])})
        return {"method": self.method, "k_min": self.k_min, "k_max": self.k_max,
                "a0": self.a0, "checks": self.checks, "cubes": cubes}

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _farthest_extend(P, seeds, radius):
    """Greedy farthest-point extension of `seeds` until every point is within radius."""
    chosen = list(seeds)
    if chosen:
        dist = cKDTree(P[chosen]).query(P)[0]
    else:
        chosen = [0]
        dist = np.linalg.norm(P - P[0], axis=1)
    while True:
        i = int(np.argmax(dist))
        if dist[i] < radius:
            return np.array(chosen)
        chosen.append(i)
        dist = np.minimum(dist, np.linalg.norm(P - P[i], axis=1))


def build_christ(points, weights, k_min, k_max, method="net", check=True):
    """Nested dyadic cubes on a weighted boundary sample.

    method="net": every generation-k cube is cut into the Voronoi cells of a
    farthest-point net of its members with covering radius 2^-k / 2, so
    diameters stay below 2^-k and cubes remain convex cells of the sample.
    method="grid": Euclidean dyadic intervals along the first axis (d = 1).
    """
    P = np.asarray(points, float)
    W = np.asarray(weights, float)
    if k_max < k_min:
        raise InadmissibleInput("k_max must be >= k_min")
    if len(P) < 2:
        raise InadmissibleInput("need at least two boundary samples")
    nn = cKDTree(P).query(P, k=2)[0][:, 1]
    need = 2.0 ** (-k_max) / 4
    if np.median(nn) > need:
        raise InadmissibleInput(
            f"sample spacing {np.median(nn):.3g} too coarse for k_max={k_max}; need <= {need:.3g}")
    if method == "grid":
        labels, centers, parents = _grid_levels(P, k_min, k_max)
    elif method == "net":
        labels, centers, parents = _net_levels(P, k_min, k_max)
    else:
        raise InadmissibleInput(f"unknown Christ method {method!r}")
    tree = ChristTree(P, W, k_min, k_max, labels, centers, parents, method)
    if method == "net":
        tree.centers = _deep_centers(tree)
    if check:
        tree.checks = check_christ(tree)
        tree.a0 = tree.checks["a0"]
    return tree


def _grid_levels(P, k_min, k_max):
    x = P[:, 0]
    labels, centers, parents = [], [], []
    prev_keys = None
    for k in range(k_min, k_max + 1):
        key = np.floor(x * 2.0 ** k).astype(np.int64)
        uniq, lab = np.unique(key, return_inverse=True)
        mids = (uniq + 0.5) * 2.0 ** (-k)
        # the sample closest to the interval midpoint stands in for z_Q
        cen = np.array([np.flatnonzero(lab == j)[np.argmin(np.abs(x[lab == j] - m))]
                        for j, m in enumerate(mids)])
        labels.append(lab)
        centers.append(cen)
        if prev_keys is None:
            parents.append(None)
        else:
            parents.append(np.searchsorted(prev_keys, uniq // 2))
        prev_keys = uniq
    return labels, centers, parents


def _net_levels(P, k_min, k_max):
    """Top-down nets: each parent is split into the Voronoi cells of a
    farthest-point 2^-k / 2 net of its own members, seeded by its anchor."""
    N = len(P)
    anchors = _farthest_extend(P, [], 2.0 ** (-k_min) / 2)
    _, lab = cKDTree(P[anchors]).query(P)
    labels, centers, parents = [lab], [anchors], [None]
    for k in range(k_min + 1, k_max + 1):
        radius = 2.0 ** (-k) / 2
        new_lab = np.empty(N, dtype=int)
        new_cen, new_par = [], []
        prev_lab, prev_cen = labels[-1], centers[-1]
        order = np.argsort(prev_lab, kind="stable")
        bounds = np.concatenate([[0], np.cumsum(np.bincount(prev_lab, minlength=len(prev_cen)))])
        for j, anchor in enumerate(prev_cen):
            mem = order[bounds[j]:bounds[j + 1]]
            local = P[mem]
            seed = int(np.flatnonzero(mem == anchor)[0])
            net = _farthest_extend(local, [seed], radius)
            _, sub = cKDTree(local[net]).query(local)
            new_lab[mem] = len(new_cen) + sub
            new_cen.extend(mem[net].tolist())
            new_par.extend([j] * len(net))
        labels.append(new_lab)
        centers.append(np.array(new_cen))
        parents.append(np.array(new_par))
    return labels, centers, parents


def _diameter(X):
    if len(X) < 2:
        return 0.0
    if len(X) <= 2500:
        return float(pdist(X).max())
    # exact diameter is attained on extreme points; thin out interior ones
    c = X.mean(0)
    r = np.linalg.norm(X - c, axis=1)
    keep = r >= np.sort(r)[-2500]
    return max(float(pdist(X[keep]).max()), 0.0)


def _foreign_distance(P, tree, nbrs, lab):
    """Distance from every sample to the nearest sample with another label."""
    border = np.any(lab[nbrs] != lab[:, None], axis=1)
    out = np.full(len(P), np.inf)
    if not np.any(border):
        return out
    B = np.flatnonzero(border)
    bt = cKDTree(P[B])
    pending = np.arange(len(P))
    k = 8
    while len(pending):
        kq = min(k, len(B))
        d, i = bt.query(P[pending], k=kq)
        d, i = d.reshape(len(pending), -1), i.reshape(len(pending), -1)
        foreign = lab[B[i]] != lab[pending][:, None]
        hit = foreign.any(1)
        out[pending[hit]] = d[hit, np.argmax(foreign[hit], axis=1)]
        if kq == len(B):
            break
        pending = pending[~hit]
        k *= 4
    return out


def _deep_centers(tree):
    """z_Q = member sample farthest from the other cubes of its generation."""
    P = tree.points
    nbrs = tree._tree.query(P, k=min(9, len(P)))[1][:, 1:]
    centers = []
    for g, lab in enumerate(tree.labels):
        d = _foreign_distance(P, tree._tree, nbrs, lab)
        order = np.lexsort((np.arange(len(P)), -d, lab))
        first = np.searchsorted(lab[order], np.arange(tree.count(tree.k_min + g)))
        centers.append(order[first])
    return centers


def check_christ(tree):
    """Partition, nesting, diameter and inner-ball checks on the sample set; reports a0."""
    out = {"partition": True, "nesting": True, "diameter": True, "a0": math.inf,
           "max_diam_ratio": 0.0, "max_radius_ratio": 0.0, "min_mass": math.inf}
    for k in tree.generations:
        g = k - tree.k_min
        lab = tree.labels[g]
        if lab.shape != (len(tree.points),) or lab.min() < 0 or lab.max() >= tree.count(k):
            out["partition"] = False
        counts = np.bincount(lab, minlength=tree.count(k))
        out["partition"] &= bool(np.all(counts > 0))
        if g > 0:
            out["nesting"] &= bool(np.all(tree.labels[g - 1] == tree.parents[g][lab]))
        side = tree.side(k)
        order = np.argsort(lab, kind="stable")
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for j in range(tree.count(k)):
            X = tree.points[order[bounds[j]:bounds[j + 1]]]
            z = tree.center(k, j)
            rad = float(np.max(np.linalg.norm(X - z, axis=1)))
            out["max_radius_ratio"] = max(out["max_radius_ratio"], rad / side)
            diam = rad if rad == 0 else (2 * rad if 2 * rad <= side else _diameter(X))
            out["max_diam_ratio"] = max(out["max_diam_ratio"], diam / side)
            if diam > side * (1 + 1e-12) or rad > side * (1 + 1e-12):
                out["diameter"] = False
            # exact inner ball: shrink until every sample inside belongs to Q
            r = _inner_radius(tree, lab, j, z, side)
            out["a0"] = min(out["a0"], r / side)
        out["min_mass"] = min(out["min_mass"], float(tree.mass(k).min()))
    if not math.isfinite(out["a0"]):
        out["a0"] = 1.0
    out["ok"] = out["partition"] and out["nesting"] and out["diameter"] and out["a0"] > 0
    return out


def _inner_radius(tree, lab, j, z, side):
    idx = np.array(tree._tree.query_ball_point(z, side), dtype=int)
    foreign = idx[lab[idx] != j]
    if len(foreign) == 0:
        return side
    return float(np.min(np.linalg.norm(tree.points[foreign] - z, axis=1)))


def mass_dimension(tree):
    """Fit log2 mu(Q) = -s k + c over all cubes; returns s and per-generation ranges."""
    ks, ms, ranges = [], [], {}
    for k in tree.generations:
        m = tree.mass(k)
        m = m[m > 0]
        ks.extend([k] * len(m))
        ms.extend(np.log2(m))
        ranges[k] = (float(m.min()), float(m.max()))
    slope, _ = np.polyfit(ks, ms, 1)
    return -float(slope), ranges


# --- Whitney regions ---------------------------------------------------------

def _box_point_dist(lo, hi, P):
    """Distances between boxes (m, n) and points (p, n) -> (m, p)."""
    gap = np.maximum(np.maximum(lo[:, None, :] - P[None], P[None] - hi[:, None, :]), 0.0)
    return np.sqrt(np.sum(gap ** 2, axis=-1))


def _box_box_dist(lo1, hi1, lo2, hi2):
    gap = np.maximum(np.maximum(lo1 - hi2, lo2 - hi1), 0.0)
    return np.sqrt(np.sum(gap ** 2, axis=-1))


class WhitneyRegions:
    """Lazily computed W_Q, W*_Q (and unions U_Q, U*_Q as cube-index arrays)."""

    def __init__(self, domain, tree, ws, C_a=None, c1=2.0):
        self.domain, self.tree, self.ws = domain, tree, ws
        self.c1 = c1
        self.C_a = C_a if C_a is not None else 1000 * c1 * math.sqrt(domain.n)
        centers = ws.center
        self._levels = []
        for s in np.unique(ws.side):
            idx = np.flatnonzero(ws.side == s)
            self._levels.append((idx, cKDTree(centers[idx]), 0.5 * math.sqrt(domain.n) * s))
        self._W, self._Wstar, self._IQ = {}, {}, {}
        self.floor = float(ws.side.min()) if len(ws) else math.inf
        self.chain_failures = 0
        self._lo, self._hi = ws.lo, ws.hi

    def _near(self, z, radius):
        """Cubes whose center lies within radius + own half-diagonal of z."""
        out = [idx[np.asarray(t.query_ball_point(z, radius + half), dtype=int)]
               for idx, t, half in self._levels]
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    def _near_many(self, Z, radius):
        """(cube, point) candidate pairs, per-level padded queries."""
        cubes, balls = [], []
        for idx, t, half in self._levels:
            lists = t.query_ball_point(Z, radius + half)
            sizes = np.fromiter((len(x) for x in lists), dtype=int, count=len(lists))
            if sizes.sum():
                cubes.append(idx[np.concatenate([np.asarray(x, dtype=int) for x in lists if x])])
                balls.append(np.repeat(np.arange(len(Z)), sizes))
        if not cubes:
            return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
        return np.concatenate(cubes), np.concatenate(balls)

    def truncated(self, k):
        """True when the smallest admissible cube size of generation k is unresolved."""
        return self.tree.side(k) / self.C_a < self.floor

    def W(self, k, j):
        key = (k, j)
        if key in self._W:
            return self._W[key]
        ell = self.tree.side(k)
        mem = self.tree.points[self.tree.members(k, j)]
        z = self.tree.center(k, j)
        rad = float(np.max(np.linalg.norm(mem - z, axis=1)))
        cand = self._near(z, 2 * ell + rad)
        cand = cand[self.ws.side[cand] >= ell / self.C_a * (1 - 1e-12)]
        if len(cand):
            lo, hi = self._lo[cand], self._hi[cand]
            dmin = np.full(len(cand), np.inf)
            for s in range(0, len(mem), 512):
                dmin = np.minimum(dmin, _box_point_dist(lo, hi, mem[s:s + 512]).min(1))
            cand = cand[dmin <= 2 * ell * (1 + 1e-12)]
        self._W[key] = np.sort(cand)
        return self._W[key]

    def corkscrew_cube(self, k, j):
        key = (k, j)
        if key not in self._IQ:
            X = corkscrew(self.domain, self.tree.center(k, j), self.tree.side(k), self.c1).point
            self._IQ[key] = (X, int(self.ws.locate(X[None])[0]))
        return self._IQ[key]

    def _cubes_meeting_balls(self, Z, rad):
        """Indices of Whitney cubes meeting at least one open ball B(Z_i, rad_i)."""
        Z = np.atleast_2d(Z)
        rad = np.asarray(rad, float)
        Z, first = np.unique(Z, axis=0, return_index=True)
        rad = rad[first]
        cube, ball = self._near_many(Z, rad)
        if len(cube) == 0:
            return set()
        gap = np.maximum(np.maximum(self._lo[cube] - Z[ball], Z[ball] - self._hi[cube]), 0.0)
        hit = np.einsum("ij,ij->i", gap, gap) < rad[ball] ** 2
        return set(np.unique(cube[hit]).tolist())

    def W0(self, k, j):
        """Cubes meeting B(X, delta(X)/2) for some X in U_Q or U_Q' (Q' the parent)."""
        base = list(self.W(k, j))
        p = self.tree.parent(k, j)
        if p is not None:
            base.extend(self.W(*p))
        base = np.unique(np.array(base, dtype=int))
        if len(base) == 0:
            return base
        # over X in I, B(X, delta(X)/2) stays within reach of the cube I
        half = 0.5 * math.sqrt(self.domain.n) * self.ws.side[base]
        c = self.ws.center[base]
        reach = 0.5 * (self.domain.distance(c) + half)
        cube, ball = self._near_many(c, reach + half)
        d = _box_box_dist(self._lo[cube], self._hi[cube], self._lo[base[ball]], self._hi[base[ball]])
        out = np.union1d(base, cube[d <= reach[ball]])
        return out.astype(int)

    def Wstar(self, k, j):
        """W_Q^0 plus every cube met by a Harnack chain ball linking a W_Q^0
        center to the corkscrew cube of Q."""
        key = (k, j)
        if key in self._Wstar:
            return self._Wstar[key]
        w0 = self.W0(k, j)
        out = set(w0.tolist())
        X_Q, I_Q = self.corkscrew_cube(k, j)
        hub = self.ws.center[I_Q] if I_Q >= 0 else X_Q
        dh = float(self.domain.distance(hub[None])[0])
        pts, rads = [], []
        for c, dc in zip(self.ws.center[w0], self.domain.distance(self.ws.center[w0])):
            try:
                ch = harnack_chain(self.domain, c, hub, 0.5 * min(float(dc), dh), self.c1)
            except HypothesisViolation:
                self.chain_failures += 1
                continue
            pts.append(ch.points)
            rads.append(ch.radii)
        if pts:
            out |= self._cubes_meeting_balls(np.vstack(pts), np.concatenate(rads))
        self._Wstar[key] = np.array(sorted(out), dtype=int)
        return self._Wstar[key]

    # unions are represented by their cube lists
    U = W
    Ustar = Wstar

    def cube_mass(self, weight, idx):
        idx = np.asarray(idx, dtype=int)
        if len(idx) == 0:
            return 0.0
        return float(np.sum(weight(self.ws.center[idx]) * self.ws.side[idx] ** self.domain.n))

    def diam(self, idx):
        if len(idx) == 0:
            return 0.0
        lo, hi = self._lo[idx], self._hi[idx]
        return float(np.linalg.norm(hi.max(0) - lo.min(0)))

    def dist_to_Q(self, idx, k, j):
        if len(idx) == 0:
            return math.inf
        mem = self.tree.points[self.tree.members(k, j)]
        lo, hi = self._lo[idx], self._hi[idx]
        dmin = math.inf
        for s in range(0, len(mem), 512):
            dmin = min(dmin, float(_box_point_dist(lo, hi, mem[s:s + 512]).min()))
        return dmin

    def region_report(self, k, j):
        """Size and distance ratios of U_Q and U*_Q for one cube, normalized by l(Q)."""
        ell = self.tree.side(k)
        W, Ws = self.W(k, j), self.Wstar(k, j)
        X_Q, I_Q = self.corkscrew_cube(k, j)
        return {"cube": f"{k}:{j}", "n_W": len(W), "n_Wstar": len(Ws),
                "corkscrew_in_W": bool(I_Q in set(W.tolist())),
                "W_subset_Wstar": bool(np.all(np.isin(W, Ws))),
                "dist_Ustar_over_l": self.dist_to_Q(Ws, k, j) / ell,
                "dist_U_over_l": self.dist_to_Q(W, k, j) / ell,
                "diam_U_over_l": self.diam(W) / ell,
                "diam_Ustar_over_l": self.diam(Ws) / ell,
                "truncated": self.truncated(k)}


def whitney_regions(tree, ws, domain, C_a=None, c1=2.0):
    if len(ws) and float(ws.side.min()) > tree.side(tree.k_max):
        raise InadmissibleInput("Whitney resolution must be at least the Christ resolution")
    return WhitneyRegions(domain, tree, ws, C_a, c1)


# --- cones and tents ---------------------------------------------------------------

def cone(regions, x, Q_top=None, star=False):
    """Cube indices of gamma(x) (all generations) or, with Q_top=(k, j), of the
    truncated cone gamma*_Q(x) over generations >= k."""
    tree = regions.tree
    k0 = tree.k_min if Q_top is None else Q_top[0]
    use_star = star or Q_top is not None
    out = set()
    for k in range(k0, tree.k_max + 1):
        j = tree.locate(x, k)
        out.update((regions.Wstar(k, j) if use_star else regions.W(k, j)).tolist())
    return np.array(sorted(out), dtype=int)


def cone_aperture(regions, x, idx):
    """min over member-cube corners of delta(corner) / |corner - x|."""
    if len(idx) == 0:
        return math.inf
    n = regions.domain.n
    lo, side = regions.ws.lo[idx], regions.ws.side[idx]
    offs = np.array(np.meshgrid(*([[0.0, 1.0]] * n), indexing="ij")).reshape(n, -1).T
    corners = (lo[:, None, :] + side[:, None, None] * offs[None]).reshape(-1, n)
    d = regions.domain.distance(corners)
    return float(np.min(d / np.linalg.norm(corners - np.asarray(x, float), axis=1)))


@dataclass
class Tent:
    cube: tuple
    doubled: bool
    cubes: np.ndarray
    z: np.ndarray
    r_inner: float
    R_outer: float

    def to_dict(self):
        return {"cube": f"{self.cube[0]}:{self.cube[1]}", "doubled": self.doubled,
                "cubes": self.cubes.tolist(), "z": self.z.tolist(),
                "r_inner": self.r_inner, "R_outer": self.R_outer}


def tent(regions, Q, doubled=False):
    """T_Q (or T_2Q): union of U*_Q' over descendants Q' of generation >= k(Q)
    meeting Q (or 2Q)."""
    tree = regions.tree
    k, j = Q
    if doubled:
        base = tree.dilate(k, j, 2.0)
    else:
        base = tree.members(k, j)
    out = set()
    for kk in range(k, tree.k_max + 1):
        for jj in np.unique(tree.labels[kk - tree.k_min][base]):
            out.update(regions.Wstar(kk, int(jj)).tolist())
    cubes = np.array(sorted(out), dtype=int)
    z = tree.center(k, j)
    ws = regions.ws
    if len(cubes):
        far = np.maximum(np.abs(ws.lo[cubes] - z), np.abs(ws.hi[cubes] - z))
        R = float(np.max(np.linalg.norm(far, axis=1)))
    else:
        R = 0.0
    # inner radius: nearest resolved cube outside the tent
    resolved = np.flatnonzero(ws.side >= tree.side(tree.k_max))
    outside = np.setdiff1d(resolved, cubes)
    if len(outside):
        r = float(_box_point_dist(ws.lo[outside], ws.hi[outside], z[None]).min())
    else:
        r = math.inf
    return Tent(Q, doubled, cubes, z, r, R)


def overlap_count(regions, k, doubled=False):
    """Max number of generation-k tents that share one Whitney cube."""
    counts = np.zeros(len(regions.ws), dtype=int)
    for j in range(regions.tree.count(k)):
        counts[tent(regions, (k, j), doubled).cubes] += 1
    return int(counts.max()) if len(counts) else 0


def rho_Q(regions, measure_mass, weight, k, j):
    """rho(Q) = m(U*_Q) / (mu(Q) l(Q))."""
    return regions.cube_mass(weight, regions.Wstar(k, j)) / (measure_mass * regions.tree.side(k))
