"""Gradient flow integration, (GCC)/(FC) decisions and minimal control times."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exprdsl import differentiate
from .geometry import Region, SurfaceSpec, _as_expr
from .quad import adaptive_simpson

STEP_TOL = 1e-9
INF = math.inf


class FlowError(RuntimeError):
    pass


@dataclass
class Trajectory:
    times: np.ndarray
    points: np.ndarray
    exited: bool = False
    exit_time: Optional[float] = None
    stagnant: bool = False


@dataclass
class FlowReport:
    condition: str
    satisfied: bool
    T_min: float
    witness: object
    g_field: Optional[np.ndarray] = field(default=None, repr=False)
    g_T: Optional[float] = None
    method: str = "simulation"
    hitting: Optional[np.ndarray] = field(default=None, repr=False)
    starts: Optional[np.ndarray] = field(default=None, repr=False)
    censored: bool = False
    reason: str = ""


def gradient_field(spec: SurfaceSpec, f):
    """Vector field grad f on the meridian (1D) or on the plane (box2d)."""
    if spec.dim == 2:
        f = _as_expr(f, ("x1", "x2"))
        g1, g2 = differentiate(f, "x1"), differentiate(f, "x2")

        def X2(y):
            return np.stack([g1(y[:, 0], y[:, 1]), g2(y[:, 0], y[:, 1])], axis=1)
        return X2
    fp = differentiate(_as_expr(f), "s")

    def X1(y):
        return fp(spec.wrap(y[:, 0]))[:, None]
    return X1


def _rk4(X, y, dt):
    dt = dt[:, None]
    k1 = X(y)
    k2 = X(y + 0.5 * dt * k1)
    k3 = X(y + 0.5 * dt * k2)
    k4 = X(y + dt * k3)
    return y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _outside(spec: SurfaceSpec, y):
    if spec.periodic:
        return np.zeros(len(y), dtype=bool)
    lo, hi = spec.s_start, spec.s_end
    return np.any((y < lo - 1e-14) | (y > hi + 1e-14), axis=1)


def _integrate_batch(spec, X, y0, t_end, event=None, max_step=INF, tol=STEP_TOL):
    """Adaptive RK4 (step doubling) on a batch; stops each point at t_end or at its first event.

    Returns final positions, stop times and a flag for points that stopped on an event.
    """
    y = np.array(y0, dtype=float)
    m = len(y)
    t = np.zeros(m)
    dt = np.full(m, min(1e-2, max_step, t_end if t_end < INF else 1e-2))
    hit = np.zeros(m, dtype=bool)
    stagnant = np.zeros(m, dtype=bool)
    active = np.ones(m, dtype=bool)
    if event is not None:
        hit = event(y, start=True)
        active &= ~hit
    t_end_arr = np.full(m, t_end)
    cross_idx, cross_y, cross_h = [], [], []
    for _ in range(200000):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        yi, ti = y[idx], t[idx]
        speed = np.max(np.abs(X(yi)), axis=1)
        still = speed < 1e-14
        if still.any():
            # an exact stationary point never moves
            stagnant[idx[still]] = True
            t[idx[still]] = t_end_arr[idx[still]]
            active[idx[still]] = False
            keep = ~still
            idx, yi, ti = idx[keep], yi[keep], ti[keep]
            if idx.size == 0:
                continue
        h = np.minimum(dt[idx], t_end_arr[idx] - ti)
        h = np.minimum(h, max_step)
        full = _rk4(X, yi, h)
        half = _rk4(X, _rk4(X, yi, h / 2), h / 2)
        err = np.max(np.abs(half - full), axis=1) / 15.0
        ok = err <= tol
        if np.any(h[~ok] < 1e-14):
            bad = idx[~ok][h[~ok] < 1e-14]
            raise FlowError(f"step underflow near s={y[bad[0]]} (stagnation point?)")
        grow = np.where(err > 0, 0.9 * (tol / np.maximum(err, 1e-300)) ** 0.2, 4.0)
        dt[idx] = h * np.clip(grow, 0.2, 4.0)
        acc = idx[ok]
        if acc.size == 0:
            continue
        y_new = half[ok] + (half[ok] - full[ok]) / 15.0
        h_acc = h[ok]
        if event is not None:
            ev = event(y_new)
            if ev.any():
                # entry time is bisected later, all crossings in one batch
                sub = acc[ev]
                cross_idx.append(sub)
                cross_y.append(y[sub].copy())
                cross_h.append(h_acc[ev].copy())
                hit[sub] = True
                active[sub] = False
                rest = ~ev
                acc, y_new, h_acc = acc[rest], y_new[rest], h_acc[rest]
        y[acc] = y_new
        t[acc] += h_acc
        done = t[acc] >= t_end_arr[acc] - 1e-15
        active[acc[done]] = False
    if cross_idx:
        sub = np.concatenate(cross_idx)
        y_start = np.concatenate(cross_y)
        lo = np.zeros(sub.size)
        hi = np.concatenate(cross_h)
        for _ in range(55):
            mid = 0.5 * (lo + hi)
            inside = event(_rk4(X, _rk4(X, y_start, mid / 2), mid / 2))
            hi = np.where(inside, mid, hi)
            lo = np.where(inside, lo, mid)
        y[sub] = _rk4(X, _rk4(X, y_start, hi / 2), hi / 2)
        t[sub] += hi
    return y, t, hit, stagnant


def integrate_flow(spec: SurfaceSpec, f, x0, t_span, direction="forward", samples=200) -> Trajectory:
    """Sampled trajectory of ds/dt = +-grad f starting at x0 over t_span=(t0, t1)."""
    X = gradient_field(spec, f)
    sign = 1.0 if direction == "forward" else -1.0
    Xs = (lambda y: sign * X(y))
    t0, t1 = float(t_span[0]), float(t_span[1])
    y = np.atleast_2d(np.asarray(x0, dtype=float).reshape(1, -1))
    times = np.linspace(t0, t1, samples + 1)
    pts = [y[0].copy()]
    exited = False
    exit_time = None
    stagnant = False
    event = None
    if not spec.periodic and spec.dim == 1:
        event = lambda z, start=False: _outside(spec, z)
    for k in range(samples):
        dt = times[k + 1] - times[k]
        y_new, t_used, hit, stag = _integrate_batch(spec, Xs, y, dt, event=event)
        stagnant |= bool(stag[0])
        if hit[0]:
            exited = True
            exit_time = times[k] + float(t_used[0])
            pts.append(y_new[0].copy())
            times = np.append(times[: k + 1], exit_time)
            break
        y = y_new
        pts.append(y[0].copy())
    P = np.array(pts)
    if spec.periodic:
        P = spec.wrap(P)
    if spec.dim == 1:
        P = P[:, 0]
    return Trajectory(times[: len(P)], P, exited, exit_time, stagnant)


def _starts(spec: SurfaceSpec, omega: Region):
    if spec.dim == 2:
        X1, X2 = np.meshgrid(spec.nodes, spec.nodes, indexing="ij")
        return np.column_stack([X1.ravel(), X2.ravel()])
    pts = list(spec.grid)
    pts += [p for p in omega.boundary_points(spec) if spec.contains(p)]
    arr = np.unique(np.asarray(pts, float))
    return arr[:, None]


def _min_width(spec, omega: Region):
    widths = [abs(b - a) for a, b in omega.intervals]
    widths += [min(b1 - a1, b2 - a2) for (a1, b1), (a2, b2) in omega.boxes]
    widths += [2 * r for _, r in omega.balls]
    return min(widths) if widths else spec.L


def gcc_time(spec: SurfaceSpec, f, omega: Region, condition="GCC", method="simulation",
             T_cap=100.0, threads=1, g_samples=2000) -> FlowReport:
    """Minimal time for (GCC) or (FC): sup over starting points of the backward hitting time."""
    if condition not in ("GCC", "FC"):
        raise ValueError(f"unknown condition {condition!r}")
    if method == "closed_form":
        return _closed_form(spec, f, omega, condition, T_cap)
    if method != "simulation":
        raise ValueError(f"unknown method {method!r}")

    X = gradient_field(spec, f)
    back = lambda y: -X(y)
    starts = _starts(spec, omega)
    vmax = float(np.max(np.abs(X(starts)))) if len(starts) else 1.0
    max_step = 0.25 * _min_width(spec, omega) / max(vmax, 1e-12) if not omega.whole else INF

    def in_target(y, start=False):
        pts = y[:, 0] if spec.dim == 1 else (y[:, 0], y[:, 1])
        if spec.periodic:
            pts = spec.wrap(pts)
        inside = omega.mask_open(spec, pts) if start else omega.mask(spec, pts)
        if condition == "FC":
            inside = inside | _outside_any(spec, y)
        elif not spec.periodic:
            inside = inside & ~_outside_any(spec, y)
        return inside

    def work(chunk):
        return _integrate_batch(spec, back, chunk, T_cap, event=in_target, max_step=max_step)

    chunks = np.array_split(starts, max(1, int(threads)) * 4) if threads and threads > 1 else [starts]
    chunks = [c for c in chunks if len(c)]
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=int(threads)) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    hit = np.concatenate([p[2] for p in parts])
    t_hit = np.concatenate([p[1] for p in parts])
    hitting = np.where(hit, t_hit, INF)
    if condition == "GCC" and not spec.periodic:
        # leaving through the boundary never meets omega
        ends = np.concatenate([p[0] for p in parts])
        hitting = np.where(hit & ~_outside_any(spec, ends), hitting, INF)
    satisfied = bool(np.all(np.isfinite(hitting)))
    i_w = int(np.argmax(hitting))
    witness = starts[i_w, 0] if spec.dim == 1 else tuple(starts[i_w])
    T_min = float(hitting[i_w]) if satisfied else INF
    g_T = 1.05 * T_min if satisfied and T_min > 0 else (T_cap if not satisfied else 1e-3)
    g = g_field(spec, f, omega, g_T, condition=condition, samples=g_samples)
    return FlowReport(condition, satisfied, T_min, witness, g, g_T, "simulation", hitting,
                      starts[:, 0] if spec.dim == 1 else starts, censored=not satisfied,
                      reason="" if satisfied else "some backward trajectory never meets omega before T_cap")


def _outside_any(spec, y):
    if spec.periodic:
        return np.zeros(len(y), dtype=bool)
    lo, hi = spec.s_start, spec.s_end
    return np.any((y < lo - 1e-12) | (y > hi + 1e-12), axis=1)


def g_field(spec: SurfaceSpec, f, omega: Region, T: float, condition="GCC", samples=2000):
    """g_{omega,T}(y) = time spent in omega by the backward trajectory from y (midpoint rule)."""
    X = gradient_field(spec, f)
    if spec.dim == 2:
        X1, X2 = np.meshgrid(spec.nodes, spec.nodes, indexing="ij")
        y = np.column_stack([X1.ravel(), X2.ravel()])
    else:
        y = spec.grid[:, None].astype(float)
    dt = T / samples
    step = np.full(len(y), dt / 2)
    total = np.zeros(len(y))
    gone = np.zeros(len(y), dtype=bool)
    y = _rk4(lambda z: -X(z), y, step)  # move to the first midpoint
    for k in range(samples):
        pts = y[:, 0] if spec.dim == 1 else (y[:, 0], y[:, 1])
        if spec.periodic:
            pts = spec.wrap(pts)
        out = _outside_any(spec, y)
        gone |= out
        inside = omega.mask(spec, pts) & ~gone
        if condition == "FC":
            inside |= gone
        total += dt * inside
        if k < samples - 1:
            y = np.where(gone[:, None], y, _rk4(lambda z: -X(z), y, np.full(len(y), dt)))
    if spec.dim == 2:
        return total.reshape(len(spec.nodes), len(spec.nodes))
    return total


def _complement_components(spec: SurfaceSpec, omega: Region):
    """Open components of the domain minus omega as (a, b, a_is_edge, b_is_edge) tuples."""
    if omega.whole:
        return []
    ivs = sorted((float(a), float(b)) for a, b in omega.intervals)
    if spec.periodic:
        # unwrap to start at the first interval's end
        spans = []
        for a, b in ivs:
            a0 = spec.wrap(a)
            spans.append((a0, a0 + (b - a)))
        spans.sort()
        merged = []
        for a, b in spans:
            if merged and a <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(merged[-1][1], b))
            else:
                merged.append((a, b))
        if not merged:
            return [(spec.s_start, spec.s_start + spec.L, False, False)]
        comps = []
        for i, (a, b) in enumerate(merged):
            nxt = merged[(i + 1) % len(merged)][0] + (spec.L if i == len(merged) - 1 else 0.0)
            if nxt > b:
                comps.append((b, nxt, False, False))
        return comps
    lo, hi = spec.s_start, spec.s_end
    comps = []
    cur = lo
    cur_edge = True
    for a, b in ivs:
        a, b = max(a, lo), min(b, hi)
        if b < a:
            continue
        if a > cur:
            comps.append((cur, a, cur_edge, False))
        if b >= cur:
            cur, cur_edge = b, False
    if cur < hi:
        comps.append((cur, hi, cur_edge, True))
    return comps


def _closed_form(spec, f, omega, condition, T_cap) -> FlowReport:
    if spec.dim != 1:
        raise ValueError("closed_form needs a one-dimensional or rotational geometry")
    fp = differentiate(_as_expr(f), "s")
    comps = _complement_components(spec, omega)
    poles = set(spec.pole_set)
    worst = 0.0
    witness = None
    for a, b, a_edge, b_edge in comps:
        probe = np.linspace(a, b, 4001)
        vals = fp(spec.wrap(probe))
        scale = max(1.0, float(np.max(np.abs(vals))))
        if np.any(np.abs(vals) <= 1e-12 * scale) or (np.any(vals > 0) and np.any(vals < 0)):
            return FlowReport(condition, False, INF, None, method="closed_form", censored=True,
                              reason=f"grad f vanishes or changes sign on ({a:.6g}, {b:.6g})")
        sgn = 1.0 if vals[0] > 0 else -1.0
        # backward motion is along -sgn; the trajectory runs to the end it moves toward
        toward_lo = sgn > 0
        end_edge = a_edge if toward_lo else b_edge
        if end_edge and condition == "GCC" and (a if toward_lo else b) not in poles:
            return FlowReport(condition, False, INF, None, method="closed_form", censored=True,
                              reason="backward flow leaves through the boundary before meeting omega")
        seg = adaptive_simpson(lambda s: 1.0 / np.abs(fp(spec.wrap(s))), [a], [b], 1e-12)[0]
        if seg > worst:
            worst = seg
            witness = b if toward_lo else a
    if worst > T_cap:
        return FlowReport(condition, False, INF, witness, method="closed_form", censored=True,
                          reason="T_cap exceeded")
    return FlowReport(condition, True, float(worst), witness, method="closed_form")
