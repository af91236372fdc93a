"""Agmon distances to the classically allowed region and the weight W = f/2 + d_A."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .exprdsl import ScalarExpr
from .geometry import PotentialField, Region, _as_expr, sample
from .quad import adaptive_simpson

QUAD_TOL = 1e-8


class AgmonError(ValueError):
    pass


@dataclass(frozen=True)
class AgmonField:
    grid: object = field(repr=False)
    E: float
    d_A: np.ndarray = field(repr=False)
    K_E: np.ndarray = field(repr=False)
    topology: str
    W: Optional[np.ndarray] = field(default=None, repr=False)
    f_vals: Optional[np.ndarray] = field(default=None, repr=False)
    W_omega: Optional[float] = None
    W_m: Optional[float] = None
    W_boundary: Optional[dict] = None
    key_points: tuple = ()
    # 1D helpers: cumulative integral of the metric and the potential
    cumulative: Optional[np.ndarray] = field(default=None, repr=False)
    pot: Optional[PotentialField] = field(default=None, repr=False, compare=False)

    def metric(self, s):
        V = self.pot.func(s)
        return np.sqrt(np.maximum(V - self.E, 0.0))

    def integral(self, a, b) -> np.ndarray:
        """Signed integral of the Agmon metric from a to b (arrays), split at key points."""
        a = np.atleast_1d(np.asarray(a, float))
        b = np.atleast_1d(np.asarray(b, float))
        return _piecewise_integral(self.metric, a, b, self.key_points)

    def at(self, s) -> np.ndarray:
        """d_A at arbitrary abscissas (1D)."""
        s = np.atleast_1d(np.asarray(s, float))
        spec = self.pot.spec
        if spec.periodic:
            s = spec.wrap(s)
        nodes = self.grid
        out = np.full(s.shape, np.inf)
        # the metric blows up like c/R at a pole, so the distance to it is infinite
        pole = np.zeros(s.shape, bool)
        if self.pot.c > 0:
            for p in spec.pole_set:
                pole |= np.abs(s - p) < 1e-14
        ok = ~pole
        idx = np.clip(np.searchsorted(nodes, s[ok]) - 1, 0, len(nodes) - 1)
        C = self.cumulative[idx] + self.integral(nodes[idx], s[ok])
        out[ok] = _distance_from_cumulative(C, self._key_cumulative(), self.topology, self.cumulative_total)
        return out

    @property
    def cumulative_total(self):
        return self._total

    def _key_cumulative(self):
        return self._keyC


def _piecewise_integral(g, a, b, keys):
    """Integral of g over [a_i, b_i] (either orientation) with singular splits at keys."""
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    sign = np.where(b >= a, 1.0, -1.0)
    pieces_lo, pieces_hi, owner, kind = [], [], [], []
    keys = np.asarray(sorted(keys), float)
    for i in range(lo.size):
        pts = [lo[i]] + [k for k in keys if lo[i] < k < hi[i]] + [hi[i]]
        for j in range(len(pts) - 1):
            pieces_lo.append(pts[j])
            pieces_hi.append(pts[j + 1])
            owner.append(i)
            # which end touches a key point (for the u^2 substitution)
            left_key = np.any(np.abs(keys - pts[j]) <= 1e-15 * max(1.0, abs(pts[j]))) if keys.size else False
            right_key = np.any(np.abs(keys - pts[j + 1]) <= 1e-15 * max(1.0, abs(pts[j + 1]))) if keys.size else False
            kind.append(1 if left_key else (2 if right_key else 0))
    pieces_lo = np.asarray(pieces_lo)
    pieces_hi = np.asarray(pieces_hi)
    owner = np.asarray(owner, int)
    kind = np.asarray(kind, int)
    vals = np.zeros(pieces_lo.size)
    plain = kind == 0
    if plain.any():
        vals[plain] = adaptive_simpson(g, pieces_lo[plain], pieces_hi[plain], QUAD_TOL)
    for k in (1, 2):
        sel = kind == k
        if not sel.any():
            continue
        anchor = pieces_lo[sel] if k == 1 else pieces_hi[sel]
        width = pieces_hi[sel] - pieces_lo[sel]
        direction = 1.0 if k == 1 else -1.0
        # s = anchor + direction*u^2 removes the sqrt-type singularity at the anchor
        vals_sel = np.zeros(anchor.size)
        for j in range(anchor.size):
            p, dirn = anchor[j], direction

            def sub(u, p=p, dirn=dirn):
                return g(p + dirn * u * u) * 2.0 * u
            vals_sel[j] = adaptive_simpson(sub, [0.0], [math.sqrt(width[j])], QUAD_TOL)[0]
        vals[sel] = vals_sel
    out = np.zeros(lo.size)
    np.add.at(out, owner, vals)
    return out * sign


def _distance_from_cumulative(C, keyC, topology, total):
    d = np.full(C.shape, np.inf)
    for kc in keyC:
        gap = np.abs(C - kc)
        if topology == "circle":
            gap = np.minimum(gap, total - gap)
        d = np.minimum(d, gap)
    return d


def _bisect_level(V, E, outside, inside):
    """Point between `outside` (V > E) and `inside` (V < E) where V crosses E."""
    a, b = float(outside), float(inside)
    for _ in range(200):
        m = 0.5 * (a + b)
        if float(V(m)) > E:
            a = m
        else:
            b = m
        if abs(b - a) < 1e-15 * max(1.0, abs(m)):
            break
    return 0.5 * (a + b)


def _turning_points(V, E, nodes, vals, periodic, L):
    pts = []
    above = vals > E
    n = len(nodes)
    rng = range(n) if periodic else range(n - 1)
    for i in rng:
        j = (i + 1) % n
        if above[i] != above[j]:
            a, b = nodes[i], nodes[j] if j > i else nodes[j] + L
            fa = float(V(a)) - E
            for _ in range(200):
                m = 0.5 * (a + b)
                fm = float(V(m)) - E
                if (fm > 0) == (fa > 0):
                    a, fa = m, fm
                else:
                    b = m
                if b - a < 1e-15 * max(1.0, abs(m)):
                    break
            pts.append(0.5 * (a + b))
    return pts


def agmon_distance_1d(pot: PotentialField, E=None, topology=None) -> AgmonField:
    """Agmon distance to K_E = {V <= E} on an interval or circle by cumulative quadrature."""
    spec = pot.spec
    if spec.dim != 1:
        raise AgmonError("agmon_distance_1d needs a one-dimensional grid")
    E = pot.V_min if E is None else float(E)
    if E < pot.V_min - 1e-12 * max(1.0, abs(pot.V_min)):
        raise AgmonError(f"E={E} is below the potential minimum {pot.V_min}")
    topology = topology or ("circle" if spec.periodic else "interval")
    nodes = pot.grid
    vals = pot.values
    V = pot.func
    L = spec.L
    if spec.periodic:
        Vw = lambda s: V(spec.wrap(s))
    else:
        Vw = V

    # round-off slack so equal-depth wells (V = sin^2 s at s = pi) all count
    E_in = E + 1e-13 * max(1.0, abs(E))
    K = vals <= E_in
    keys = []
    if not K.any():
        # K_E lies between two nodes around s_min: a point at the bottom level, else a short
        # interval whose ends are bracketed by s_min and its neighbouring nodes
        s0 = float(pot.s_min)
        keys = [s0]
        if float(Vw(s0)) < E:
            i = int(np.searchsorted(nodes, s0))
            left = nodes[i - 1] if i > 0 else (nodes[-1] - L if spec.periodic else None)
            right = nodes[i] if i < len(nodes) else (nodes[0] + L if spec.periodic else None)
            keys = [_bisect_level(Vw, E, b, s0) for b in (left, right) if b is not None] or [s0]
        dist = spec.distance(nodes, s0)
        K = np.zeros(len(nodes), dtype=bool)
        K[int(np.argmin(dist))] = True
    else:
        keys = _turning_points(Vw, E_in, nodes, vals, spec.periodic, L)
        if not keys and K.all():
            keys = [float(nodes[0])]
        if not K.any():
            raise AgmonError("allowed region {V <= E} is empty on the grid")
    if spec.periodic:
        keys = sorted(float(spec.wrap(k)) for k in keys)

    def metric(s):
        return np.sqrt(np.maximum(Vw(s) - E, 0.0))

    ext_nodes = np.append(nodes, nodes[0] + L) if spec.periodic else nodes
    ext_keys = list(keys) + ([k + L for k in keys] if spec.periodic else [])
    cell_int = _piecewise_integral(metric, ext_nodes[:-1], ext_nodes[1:], ext_keys)
    C = np.concatenate([[0.0], np.cumsum(cell_int)])
    total = float(C[-1]) if spec.periodic else None
    C_nodes = C[: len(nodes)]

    # cumulative value at each key point
    idx = np.clip(np.searchsorted(nodes, keys) - 1, 0, len(nodes) - 1)
    keyC = C_nodes[idx] + _piecewise_integral(metric, nodes[idx], np.asarray(keys), ext_keys)
    d = _distance_from_cumulative(C_nodes, keyC, topology, total)
    d[vals <= E_in] = 0.0

    out = AgmonField(nodes, E, d, K, topology, key_points=tuple(ext_keys),
                     cumulative=C_nodes, pot=pot)
    object.__setattr__(out, "_total", total)
    object.__setattr__(out, "_keyC", keyC)
    return out


def agmon_distance_grid(pot: PotentialField, E=None) -> AgmonField:
    """First-order fast marching for |grad d| = sqrt((V-E)_+) on a 2D lattice, d = 0 on K_E."""
    spec = pot.spec
    if spec.dim != 2:
        raise AgmonError("agmon_distance_grid needs a box2d potential")
    E = pot.V_min if E is None else float(E)
    if E < pot.V_min - 1e-12 * max(1.0, abs(pot.V_min)):
        raise AgmonError(f"E={E} is below the potential minimum {pot.V_min}")
    vals = pot.values
    speed = np.sqrt(np.maximum(vals - E, 0.0))
    h = float(spec.nodes[1] - spec.nodes[0])
    K = vals <= E
    n1, n2 = vals.shape
    d = np.full(vals.shape, np.inf)
    frozen = np.zeros(vals.shape, dtype=bool)
    heap = []
    for i, j in zip(*np.nonzero(K)):
        d[i, j] = 0.0
        heap.append((0.0, int(i), int(j)))
    heapq.heapify(heap)
    while heap:
        val, i, j = heapq.heappop(heap)
        if frozen[i, j]:
            continue
        frozen[i, j] = True
        for a, b in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
            if a < 0 or b < 0 or a >= n1 or b >= n2 or frozen[a, b]:
                continue
            ux = min(d[a - 1, b] if a > 0 else np.inf, d[a + 1, b] if a < n1 - 1 else np.inf)
            uy = min(d[a, b - 1] if b > 0 else np.inf, d[a, b + 1] if b < n2 - 1 else np.inf)
            fh = speed[a, b] * h
            lo, hi = (ux, uy) if ux <= uy else (uy, ux)
            if hi - lo >= fh:
                cand = lo + fh
            else:
                cand = 0.5 * (lo + hi + math.sqrt(2 * fh * fh - (hi - lo) ** 2))
            if cand < d[a, b]:
                d[a, b] = cand
                heapq.heappush(heap, (cand, a, b))
    return AgmonField(pot.grid, E, d, K, "box2d", pot=pot)


def weight_W(agmon: AgmonField, f, omega: Optional[Region] = None) -> AgmonField:
    """Fill W = d_A + f/2 and its minima over omega-bar (W_omega) and the whole grid (W_m)."""
    spec = agmon.pot.spec
    fx = _as_expr(f, ("x1", "x2") if spec.dim == 2 else ("s",))
    fv = sample(spec, fx)
    W = agmon.d_A + fv / 2.0
    W_m = float(np.min(W))
    W_omega = None
    W_bd = None
    if spec.dim == 1:
        # include the refined minimum point and the omega endpoints
        W_m = min(W_m, float(agmon.at(agmon.pot.s_min)[0] + fx(agmon.pot.s_min) / 2.0))
        if omega is not None:
            inside = omega.mask(spec, agmon.grid)
            cands = list(W[inside])
            for p in omega.boundary_points(spec):
                if spec.contains(p):
                    cands.append(float(agmon.at(p)[0] + fx(p) / 2.0))
            W_omega = float(min(cands)) if cands else None
        if spec.boundary:
            W_bd = {float(b): float(agmon.at(b)[0] + fx(b) / 2.0) for b in spec.boundary}
    elif omega is not None:
        X1, X2 = np.meshgrid(spec.nodes, spec.nodes, indexing="ij")
        inside = omega.mask(spec, (X1, X2))
        W_omega = float(np.min(W[inside])) if inside.any() else None
    out = replace(agmon, W=W, f_vals=fv, W_omega=W_omega, W_m=W_m, W_boundary=W_bd)
    for attr in ("_total", "_keyC"):
        if hasattr(agmon, attr):
            object.__setattr__(out, attr, getattr(agmon, attr))
    return out


def to_csv_rows(agmon: AgmonField):
    pot = agmon.pot
    if pot.spec.dim == 2:
        X1, X2 = np.meshgrid(pot.spec.nodes, pot.spec.nodes, indexing="ij")
        cols = [X1.ravel(), X2.ravel(), pot.values.ravel(), agmon.d_A.ravel()]
        header = ["x1", "x2", "V", "d_A"]
        if agmon.W is not None:
            cols.append(agmon.W.ravel())
            header.append("W")
        return header, np.column_stack(cols)
    cols = [agmon.grid, pot.values, agmon.d_A]
    header = ["s", "V", "d_A"]
    if agmon.W is not None:
        cols.append(agmon.W)
        header.append("W")
    return header, np.column_stack(cols)
