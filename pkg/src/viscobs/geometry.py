"""Computational domains: revolution surfaces (meridian grids) and flat 1D/2D domains."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .exprdsl import ScalarExpr, differentiate, parse_expr

REVOLUTION = ("sphere", "disk", "cylinder", "torus")
FLAT = ("interval", "circle", "box2d")
CASES = REVOLUTION + FLAT

POLE_TOL = 1e-6
PERIODIC_TOL = 1e-8


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class SurfaceSpec:
    case: str
    L: float
    R: Optional[ScalarExpr]
    pole_set: tuple
    boundary: tuple
    grid_n: int
    s_start: float
    grid: np.ndarray = field(repr=False)
    # computational nodes (no poles); Dirichlet nodes included
    nodes: np.ndarray = field(repr=False)
    # dual-cell lengths for the nodes and the face positions between them
    cells: np.ndarray = field(repr=False)
    faces: np.ndarray = field(repr=False)
    dirichlet: np.ndarray = field(repr=False)
    checks: dict = field(default_factory=dict, repr=False)

    @property
    def periodic(self) -> bool:
        return self.case in ("torus", "circle")

    @property
    def revolution(self) -> bool:
        return self.case in REVOLUTION

    @property
    def dim(self) -> int:
        return 2 if self.case == "box2d" else 1

    @property
    def s_end(self) -> float:
        return self.s_start + self.L

    @property
    def h(self) -> float:
        return float(np.min(np.diff(self.nodes))) if self.nodes.size > 1 else self.L

    def R_at(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if self.R is None:
            return np.ones_like(s)
        return self.R(s)

    def wrap(self, s):
        """Map abscissas into [s_start, s_start + L) on periodic domains."""
        if not self.periodic:
            return s
        return self.s_start + np.mod(np.asarray(s, dtype=float) - self.s_start, self.L)

    def contains(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if self.periodic:
            return np.ones(s.shape, dtype=bool)
        return (s >= self.s_start) & (s <= self.s_end)

    def distance(self, a, b):
        """Meridian (1D) distance, periodic-aware."""
        d = np.abs(np.asarray(a, float) - np.asarray(b, float))
        if self.periodic:
            d = np.mod(d, self.L)
            d = np.minimum(d, self.L - d)
        return d

    def volume_weights(self) -> np.ndarray:
        """Quadrature weights on `nodes` for the measure R ds (ds on flat cases)."""
        return self.cells * self.R_at(self.nodes)

    def lattice(self):
        """box2d only: the two coordinate axes."""
        if self.case != "box2d":
            raise GeometryError("lattice is defined for box2d only")
        return self.nodes, self.nodes


def _richardson_slope(R: ScalarExpr, offsets: np.ndarray, pole: float, sign: float) -> float:
    # fit R(s)/distance by a quadratic in the distance and extrapolate to 0
    dist = offsets
    ratio = R(pole + sign * dist) / dist
    coeffs = np.polyfit(dist, ratio, 2)
    return float(np.polyval(coeffs, 0.0))


def _as_expr(value, variables=("s",)) -> ScalarExpr:
    if isinstance(value, ScalarExpr):
        return value
    if isinstance(value, (int, float)):
        return parse_expr(repr(float(value)), variables)
    return parse_expr(str(value), variables)


def build_surface(config: dict) -> SurfaceSpec:
    """Build and validate a domain from a scenario geometry section.

    Keys: case, L, R (revolution cases), grid_n, optional s_start and
    boundary (flat interval: "dirichlet" default, or "none").
    """
    cfg = dict(config)
    case = cfg.pop("case", None)
    if case not in CASES:
        raise GeometryError(f"unknown case {case!r}; expected one of {', '.join(CASES)}")
    L = float(cfg.pop("L", 0.0))
    if not L > 0:
        raise GeometryError(f"L must be positive, got {L}")
    grid_n = int(cfg.pop("grid_n", 512))
    if grid_n < 64:
        raise GeometryError(f"grid_n must be at least 64, got {grid_n}")
    s_start = float(cfg.pop("s_start", 0.0))
    bc = cfg.pop("boundary", "dirichlet")
    R_src = cfg.pop("R", None)
    if cfg:
        raise GeometryError(f"unknown geometry keys: {', '.join(sorted(cfg))}")

    R = None
    if case in REVOLUTION:
        if R_src is None:
            raise GeometryError(f"case {case} needs a profile R")
        R = _as_expr(R_src)
    elif R_src is not None:
        raise GeometryError(f"case {case} is flat; R must be absent")

    checks = {}
    pole_set: tuple = ()
    boundary: tuple = ()

    if case == "sphere":
        h = L / grid_n
        nodes = h / 2 + h * np.arange(grid_n)
        faces = h * np.arange(grid_n + 1)
        cells = np.full(grid_n, h)
        grid = np.concatenate([[0.0], nodes, [L]])
        pole_set = (0.0, L)
        dirichlet = np.zeros(grid_n, dtype=bool)
    elif case == "disk":
        h = L / (grid_n + 0.5)
        nodes = h / 2 + h * np.arange(grid_n + 1)
        nodes[-1] = L
        faces = h * np.arange(grid_n + 1)
        cells = np.full(grid_n + 1, h)
        cells[-1] = h / 2
        grid = np.concatenate([[0.0], nodes])
        pole_set = (0.0,)
        boundary = (L,)
        dirichlet = np.zeros(grid_n + 1, dtype=bool)
        dirichlet[-1] = True
    elif case in ("cylinder", "interval", "box2d"):
        nodes = np.linspace(s_start, s_start + L, grid_n)
        h = L / (grid_n - 1)
        faces = 0.5 * (nodes[1:] + nodes[:-1])
        cells = np.full(grid_n, h)
        cells[0] = cells[-1] = h / 2
        grid = nodes.copy()
        dirichlet = np.zeros(grid_n, dtype=bool)
        if case == "cylinder" or (case == "interval" and bc == "dirichlet"):
            dirichlet[0] = dirichlet[-1] = True
            boundary = (s_start, s_start + L)
        elif case == "interval" and bc not in ("none", "neumann"):
            raise GeometryError(f"unknown interval boundary {bc!r}")
    else:  # torus, circle
        h = L / grid_n
        nodes = s_start + h * np.arange(grid_n)
        faces = nodes + h / 2
        cells = np.full(grid_n, h)
        grid = nodes.copy()
        dirichlet = np.zeros(grid_n, dtype=bool)

    if R is not None:
        Rp = differentiate(R, "s")
        if case in ("sphere", "disk"):
            offsets = nodes[:3] - 0.0 if case == "sphere" else (h / 2 + h * np.arange(3))
            r0 = R(0.0)
            slope0 = _richardson_slope(R, np.asarray(offsets), 0.0, 1.0)
            checks["R(0)"] = r0
            checks["R'(0)"] = slope0
            if abs(r0) > POLE_TOL:
                raise GeometryError(f"pole condition R(0)=0 fails: measured R(0)={r0:.6g}")
            if abs(slope0 - 1.0) > POLE_TOL:
                raise GeometryError(f"pole condition R'(0)=1 fails: measured R'(0)={slope0:.10g}")
        if case == "sphere":
            rL = R(L)
            checks["R(L)"] = rL
            if abs(rL) > POLE_TOL:
                raise GeometryError(f"pole condition R(L)=0 fails: measured R(L)={rL:.6g}")
            slopeL = -_richardson_slope(R, h / 2 + h * np.arange(3), L, -1.0)
            checks["R'(L)"] = slopeL
            if abs(slopeL + 1.0) > POLE_TOL:
                raise GeometryError(f"pole condition R'(L)=-1 fails: measured R'(L)={slopeL:.10g}")
        if case == "torus":
            gap = abs(R(s_start) - R(s_start + L))
            dgap = abs(Rp(s_start) - Rp(s_start + L))
            checks["R periodicity gap"] = gap
            checks["R' periodicity gap"] = dgap
            if gap > PERIODIC_TOL or dgap > PERIODIC_TOL:
                raise GeometryError(
                    f"torus profile is not periodic: |R(0)-R(L)|={gap:.3g}, |R'(0)-R'(L)|={dgap:.3g}")
        Rvals = R(nodes)
        if np.any(Rvals <= 0):
            bad = nodes[np.argmax(Rvals <= 0)]
            raise GeometryError(f"R must be positive away from poles; R({bad:.6g})={R(bad):.6g}")
        checks["min R"] = float(np.min(Rvals))

    return SurfaceSpec(case, L, R, pole_set, boundary, grid_n, s_start, grid, nodes,
                       cells, faces, dirichlet, checks)


# ------------------------------------------------------------------ regions

@dataclass(frozen=True)
class Region:
    """Finite union of closed s-intervals (1D) or boxes/balls (box2d)."""
    intervals: tuple = ()
    boxes: tuple = ()
    balls: tuple = ()
    whole: bool = False

    def mask(self, spec: SurfaceSpec, pts) -> np.ndarray:
        return self._test(spec, pts, closed=True)

    def mask_open(self, spec: SurfaceSpec, pts) -> np.ndarray:
        return self._test(spec, pts, closed=False)

    def _test(self, spec, pts, closed):
        if spec.dim == 2:
            x1, x2 = pts
            x1 = np.asarray(x1, float)
            x2 = np.asarray(x2, float)
            out = np.zeros(np.broadcast(x1, x2).shape, dtype=bool)
            if self.whole:
                return ~out
            for (a1, b1), (a2, b2) in self.boxes:
                if closed:
                    out |= (x1 >= a1) & (x1 <= b1) & (x2 >= a2) & (x2 <= b2)
                else:
                    out |= (x1 > a1) & (x1 < b1) & (x2 > a2) & (x2 < b2)
            for (c1, c2), r in self.balls:
                d2 = (x1 - c1) ** 2 + (x2 - c2) ** 2
                out |= (d2 <= r * r) if closed else (d2 < r * r)
            return out
        s = np.asarray(pts, dtype=float)
        out = np.zeros(s.shape, dtype=bool)
        if self.whole:
            return ~out
        for a, b in self.intervals:
            if spec.periodic:
                # interval measured forward from a, possibly wrapping
                length = b - a
                off = np.mod(s - a, spec.L)
                if length >= spec.L:
                    out |= True
                elif closed:
                    out |= (off <= length) | np.isclose(off, spec.L, rtol=0, atol=1e-12)
                else:
                    out |= (off > 0) & (off < length)
            else:
                if closed:
                    out |= (s >= a) & (s <= b)
                else:
                    # open relative to the domain: an end on the domain edge stays included
                    left = (s > a) | ((a <= spec.s_start) & (s >= spec.s_start))
                    right = (s < b) | ((b >= spec.s_end) & (s <= spec.s_end))
                    out |= left & right
        return out

    def boundary_points(self, spec: SurfaceSpec) -> list:
        if spec.dim == 2 or self.whole:
            return []
        pts = []
        for a, b in self.intervals:
            pts.extend([a, b])
        return [float(spec.wrap(p)) for p in pts]


def region_from_config(obj) -> Region:
    """Accepts "all", a list of [a, b] intervals, or a dict with boxes/balls."""
    if obj is None or obj == "all" or obj == "whole":
        return Region(whole=True)
    if isinstance(obj, Region):
        return obj
    if isinstance(obj, dict):
        return Region(tuple(tuple(map(float, iv)) for iv in obj.get("intervals", ())),
                      tuple(tuple(tuple(map(float, ab)) for ab in bx) for bx in obj.get("boxes", ())),
                      tuple((tuple(map(float, c)), float(r)) for c, r in obj.get("balls", ())))
    ivs = [obj] if len(obj) == 2 and not isinstance(obj[0], (list, tuple)) else obj
    return Region(intervals=tuple((float(a), float(b)) for a, b in ivs))


# ------------------------------------------------------------------ potential

@dataclass(frozen=True)
class PotentialField:
    grid: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    c: float
    E_ref: float
    s_min: object
    V_min: float
    unique_min: bool
    spec: SurfaceSpec = field(repr=False)
    func: Callable = field(repr=False, compare=False)


def _golden(fn, a, b, iters=80):
    gr = (math.sqrt(5) - 1) / 2
    x1 = b - gr * (b - a)
    x2 = a + gr * (b - a)
    f1, f2 = fn(x1), fn(x2)
    for _ in range(iters):
        if b - a < 1e-13 * max(1.0, abs(a)):
            break
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - gr * (b - a)
            f1 = fn(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + gr * (b - a)
            f2 = fn(x2)
    return (x1, f1) if f1 <= f2 else (x2, f2)


def _potential_function(spec: SurfaceSpec, f: ScalarExpr, c: float):
    if spec.dim == 2:
        g1, g2 = differentiate(f, f.variables[0]), differentiate(f, f.variables[1])

        def V2(x1, x2):
            return (g1(x1, x2) ** 2 + g2(x1, x2) ** 2) / 4.0
        return V2
    fp = differentiate(f, "s")
    R = spec.R

    def V(s):
        s = np.asarray(s, dtype=float)
        out = fp(s) ** 2 / 4.0
        if c > 0 and R is not None:
            with np.errstate(divide="ignore"):
                out = out + c * c / R(s) ** 2
        return out
    return V


def effective_potential(spec: SurfaceSpec, f, c: float = 0.0, E_choice="bottom") -> PotentialField:
    """Sample V_c = c^2/R^2 + |f'|^2/4 (|grad f|^2/4 on flat domains) and locate its minimum."""
    if c < 0:
        raise GeometryError("c must be nonnegative")
    if c > 0 and not spec.revolution:
        raise GeometryError("rotation parameter c needs a revolution surface")
    if spec.dim == 2:
        f = _as_expr(f, ("x1", "x2"))
        V = _potential_function(spec, f, c)
        ax = spec.nodes
        X1, X2 = np.meshgrid(ax, ax, indexing="ij")
        vals = V(X1, X2)
        idx = np.unravel_index(np.argmin(vals), vals.shape)
        vmin = float(vals[idx])
        close = vals <= vmin + 1e-12 * max(1.0, abs(vmin))
        unique = bool(np.count_nonzero(close) == 1)
        E = vmin if E_choice == "bottom" else float(E_choice)
        return PotentialField((ax, ax), vals, c, E, (float(ax[idx[0]]), float(ax[idx[1]])),
                              vmin, unique, spec, V)

    f = _as_expr(f)
    V = _potential_function(spec, f, c)
    s = spec.nodes
    vals = V(s)
    n = len(s)
    i0 = int(np.argmin(vals))
    # refine inside the three-cell bracket around the sampled minimum
    if spec.periodic:
        lo, hi = s[i0] - spec.h, s[i0] + spec.h
        s_star, v_star = _golden(lambda x: float(V(spec.wrap(x))), lo, hi)
        s_star = float(spec.wrap(s_star))
    else:
        lo = s[max(i0 - 1, 0)]
        hi = s[min(i0 + 1, n - 1)]
        s_star, v_star = _golden(lambda x: float(V(x)), lo, hi)
    if v_star > vals[i0]:
        s_star, v_star = float(s[i0]), float(vals[i0])
    vmin = float(v_star)

    spread = float(np.max(vals) - np.min(vals))
    unique = spread > 1e-12 * max(1.0, abs(vmin))
    if unique:
        # other discrete local minima (plateaus count once) that come within 1e-9
        left = np.roll(vals, 1)
        right = np.roll(vals, -1)
        if not spec.periodic:
            left[0] = np.inf
            right[-1] = np.inf
        is_loc = (vals <= left) & (vals <= right)
        close = is_loc & (vals <= vmin + 1e-9 + 1e-9 * abs(vmin))
        # group adjacent cells
        clusters = 0
        prev = False
        for j in range(n):
            if close[j] and not prev:
                clusters += 1
            prev = close[j]
        if spec.periodic and close[0] and close[-1] and clusters > 1:
            clusters -= 1
        # a plateau wider than the bracket also breaks uniqueness
        flat = np.count_nonzero(vals <= vmin + 1e-12 * max(1.0, abs(vmin)))
        unique = clusters <= 1 and flat <= 2
    E = vmin if E_choice == "bottom" else float(E_choice)
    return PotentialField(s.copy(), vals, float(c), E, s_star, vmin, bool(unique), spec, V)


def sample(spec: SurfaceSpec, f) -> np.ndarray:
    """Evaluate an expression on the computational nodes (2D lattice for box2d)."""
    if spec.dim == 2:
        f = _as_expr(f, ("x1", "x2"))
        X1, X2 = np.meshgrid(spec.nodes, spec.nodes, indexing="ij")
        return f(X1, X2)
    return _as_expr(f)(spec.nodes)
