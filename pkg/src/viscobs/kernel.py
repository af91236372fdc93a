"""Action distances, Hopf-Lax tables, viscous kernels and positive-solution observability."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import eigh, solve_banded

from .exprdsl import differentiate
from .geometry import Region, SurfaceSpec, _as_expr, sample
from .spectral import DiscreteOperator
from .observability import slope_sweep, t_unif_bracket, DELTA_FIT, EPS_FLOOR

FORMS = ("rho", "dX_plus", "dX_minus")

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


class KernelError(ValueError):
    pass


# ---------------------------------------------------------------- action along paths

@dataclass
class ActionResult:
    x: object
    y: object
    t: float
    value: float
    form: str
    path: np.ndarray = field(repr=False)
    converged: bool
    iterations: int


class _Field1D:
    """f and its first three derivatives along the meridian (or the line)."""

    def __init__(self, f):
        self.f = _as_expr(f)
        self.d1 = differentiate(self.f, "s")
        self.d2 = differentiate(self.d1, "s")
        self.d3 = differentiate(self.d2, "s")

    def secant(self, a, b):
        """Discrete gradient g with g*(b-a) = f(b)-f(a) exactly, and its partials."""
        d = b - a
        m = 0.5 * (a + b)
        small = np.abs(d) < 1e-3
        safe = np.where(small, 1.0, d)
        fa, fb = self.f(a), self.f(b)
        g = np.where(small, 0.0, (fb - fa) / safe)
        ga = np.where(small, 0.0, (g - self.d1(a)) / safe)
        gb = np.where(small, 0.0, (self.d1(b) - g) / safe)
        if small.any():
            # Taylor at the midpoint, consistent with the secant to O(d^4)
            p2, p3 = self.d2(m), self.d3(m)
            g = np.where(small, self.d1(m) + p3 * d * d / 24.0, g)
            ga = np.where(small, 0.5 * p2 - p3 * d / 12.0, ga)
            gb = np.where(small, 0.5 * p2 + p3 * d / 12.0, gb)
        return g, ga, gb, fb - fa


def _discrete_action(fld: _Field1D, path, dt, Rfun=None, theta=None):
    """Secant discretization of int 1/4|dot gamma|^2 + 1/4|grad f|^2 and its gradient.

    With the secant gradient the three forms differ by exactly (f(y)-f(x))/2, so
    d_grad_f = rho + (f(x)-f(y))/2 holds to rounding for every discrete path.
    """
    a, b = path[:-1], path[1:]
    g, ga, gb, df = fld.secant(a, b)
    ds = b - a
    J = np.sum(ds * ds) / (4 * dt) + dt * np.sum(g * g) / 4.0
    grad = np.zeros_like(path)
    grad[:-1] += -ds / (2 * dt) + dt * g * ga / 2.0
    grad[1:] += ds / (2 * dt) + dt * g * gb / 2.0
    gth = None
    if theta is not None:
        mid = 0.5 * (a + b)
        R = Rfun(mid)
        Rp = Rfun.diff("s")(mid)
        dth = theta[1:] - theta[:-1]
        J += np.sum(R * R * dth * dth) / (4 * dt)
        dR2 = R * Rp * dth * dth / (4 * dt)       # d/d(mid) of R^2 dth^2/(4dt), half to each end
        grad[:-1] += dR2
        grad[1:] += dR2
        gth = np.zeros_like(theta)
        w = R * R * dth / (2 * dt)
        gth[:-1] -= w
        gth[1:] += w
    return J, grad, gth, float(np.sum(df))


def _flow_path(fld: _Field1D, x, t, m, sign=1.0, sub=8):
    """Nodes of the gradient flow s' = sign*f'(s) at m+1 equal times (RK4)."""
    h = t / (m * sub)
    out = np.empty(m + 1)
    s = float(x)
    out[0] = s
    for i in range(m):
        for _ in range(sub):
            k1 = sign * fld.d1(s)
            k2 = sign * fld.d1(s + 0.5 * h * k1)
            k3 = sign * fld.d1(s + 0.5 * h * k2)
            k4 = sign * fld.d1(s + h * k3)
            s = s + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        out[i + 1] = s
    return out


def flow_map(f, x, t, sub=400):
    """Time-t gradient flow of +grad f from x (1D)."""
    fld = _Field1D(f)
    return float(_flow_path(fld, x, t, 1, 1.0, sub)[-1])


def _optimize(fld, path, dt, bounds, Rfun=None, theta=None, max_iter=3000, tol=1e-10):
    """Preconditioned gradient descent with Armijo backtracking on the interior nodes.

    The preconditioner is the kinetic Hessian (tridiagonal), i.e. steepest descent
    in the discrete H^1 metric; the endpoints stay fixed.
    """
    path = path.copy()
    theta = None if theta is None else theta.copy()
    n = len(path) - 2
    if n <= 0:
        J, *_ = _discrete_action(fld, path, dt, Rfun, theta)
        return path, theta, J, True, 0
    ab = np.zeros((3, n))
    ab[0, 1:] = -1.0
    ab[1, :] = 2.0
    ab[2, :-1] = -1.0
    ab /= 2 * dt
    # curvature of the potential part keeps the metric well scaled for long horizons
    ab[1, :] += dt * 0.5 * float(np.max(np.abs(fld.d2(path)) ** 2 + 1e-12))
    J, g, gth, _ = _discrete_action(fld, path, dt, Rfun, theta)
    history = [J]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        d = -solve_banded((1, 1), ab, g[1:-1])
        dth = None
        if theta is not None:
            dth = -solve_banded((1, 1), ab, gth[1:-1])
        slope = float(g[1:-1] @ d + (0.0 if dth is None else gth[1:-1] @ dth))
        if slope >= 0:
            converged = True
            break
        step = 1.0
        while True:
            trial = path.copy()
            trial[1:-1] = np.clip(path[1:-1] + step * d, bounds[0], bounds[1])
            ttrial = None
            if theta is not None:
                ttrial = theta.copy()
                ttrial[1:-1] = theta[1:-1] + step * dth
            Jt, gt, gtht, _ = _discrete_action(fld, trial, dt, Rfun, ttrial)
            if Jt <= J + 1e-4 * step * slope or step < 1e-12:
                break
            step *= 0.5
        if Jt > J:
            converged = True
            break
        path, theta, J, g, gth = trial, ttrial, Jt, gt, gtht
        history.append(J)
        if len(history) > 5 and history[-6] - J < tol:
            converged = True
            break
    return path, theta, J, converged, it


def action_distance(f, x, y, t: float, form: str = "dX_minus", m: int = 64,
                    spec: Optional[SurfaceSpec] = None) -> ActionResult:
    """Minimal discrete action between x and y in time t.

    form: rho = inf int 1/4|dot gamma|^2 + 1/4|grad f|^2; dX_minus uses |dot gamma - grad f|^2
    (zero exactly along the flow of +grad f); dX_plus uses |dot gamma + grad f|^2.
    Points on a revolution surface may be given as (s, theta).
    """
    if form not in FORMS:
        raise KernelError(f"unknown form {form!r}")
    if not t > 0:
        raise KernelError("t must be positive")
    if m < 16:
        raise KernelError("at least 16 path segments are required")
    fld = _Field1D(f)
    sigma = {"rho": 0.0, "dX_minus": -1.0, "dX_plus": 1.0}[form]
    two_d = isinstance(x, (tuple, list)) or isinstance(y, (tuple, list))
    if two_d:
        if spec is None or not spec.revolution:
            raise KernelError("(s, theta) points need a revolution surface")
        xs, xt = (x if isinstance(x, (tuple, list)) else (x, 0.0))
        ys, yt = (y if isinstance(y, (tuple, list)) else (y, 0.0))
    else:
        xs, ys = float(x), float(y)
        xt = yt = None
    lo, hi = -np.inf, np.inf
    lifts = [0.0]
    if spec is not None:
        if spec.periodic:
            L = spec.L
            ys = float(spec.wrap(ys) + (xs - spec.wrap(xs)))
            lifts = [-L, 0.0, L]
        else:
            lo, hi = spec.s_start, spec.s_end
    dt = t / m
    tau = np.linspace(0.0, 1.0, m + 1)
    Rfun = spec.R if two_d else None
    best = None
    for lift in lifts:
        yl = ys + lift
        inits = [xs + (yl - xs) * tau]
        fl_sign = -1.0 if form == "dX_plus" else 1.0
        fp = _flow_path(fld, xs, t, m, fl_sign)
        if np.all(np.isfinite(fp)):
            inits.append(np.clip(fp + (yl - fp[-1]) * tau, lo, hi))
        for p0 in inits:
            th0 = None
            if two_d:
                dth = (yt - xt + math.pi) % (2 * math.pi) - math.pi
                th0 = xt + dth * tau
            path, th, J, conv, its = _optimize(fld, p0, dt, (lo, hi), Rfun, th0)
            val = J + sigma * (float(fld.f(path[-1])) - float(fld.f(path[0]))) / 2.0
            if form != "rho":
                val = max(val, 0.0) if val > -1e-12 else val
            if best is None or val < best.value:
                full = path if th is None else np.column_stack([path, th])
                best = ActionResult(x, y, t, float(val), form, full, conv, its)
    return best


# ---------------------------------------------------------------- Bellman tables

def _minplus(A, B, chunk=64):
    """C_ij = min_k A_ik + B_kj (ties resolved towards the smaller k)."""
    n, p = A.shape[0], B.shape[1]
    C = np.empty((n, p))
    for i0 in range(0, n, chunk):
        blk = A[i0:i0 + chunk, :, None] + B[None, :, :]
        C[i0:i0 + chunk] = blk.min(axis=1)
    return C


def _grid_distance(nodes, periodic_L=None):
    D = np.abs(nodes[:, None] - nodes[None, :])
    if periodic_L:
        D = np.minimum(D, periodic_L - D)
    return D


def local_action(f, nodes, dt, periodic_L=None):
    fld = _Field1D(f)
    g2 = fld.d1(nodes) ** 2
    D = _grid_distance(nodes, periodic_L)
    return D * D / (4 * dt) + dt / 8.0 * (g2[:, None] + g2[None, :])


def hopf_lax_table(f, nodes, t: float, m: int = 16, periodic_L=None) -> np.ndarray:
    """rho(x_i, y_j, t) by m Bellman slices of length t/m (binary min-plus powering)."""
    if m < 8:
        raise KernelError("at least 8 time slices are required")
    dt = t / m
    if not dt > 1e-12:
        raise KernelError("time slice underflow")
    nodes = np.asarray(nodes, float)
    A = local_action(f, nodes, dt, periodic_L)
    result = None
    power = A
    k = m
    while k:
        if k & 1:
            result = power if result is None else _minplus(result, power)
        k >>= 1
        if k:
            power = _minplus(power, power)
    return result


# ---------------------------------------------------------------- reparametrization

@dataclass
class ReparamReport:
    d1: float
    d2: float
    d3: float
    max_gap: float
    passed: bool
    resolution: float = 0.0


def reparametrization_check(f, x, y, samples: int = 2001, potential=None, periodic_L=None,
                            t_grid=None, m: int = 64) -> ReparamReport:
    """Energy form, free-time length form and unit-time length form of the same distance.

    The potential defaults to |f'|^2/4 (Agmon distance at the bottom level E = 0).
    """
    fld = _Field1D(f)
    Vexpr = _as_expr(potential) if potential is not None else None

    def sqrtV(s):
        v = Vexpr(s) if Vexpr is not None else fld.d1(s) ** 2 / 4.0
        return np.sqrt(np.maximum(v, 0.0))

    def length(p):
        mid = 0.5 * (p[1:] + p[:-1])
        return float(np.sum(np.abs(np.diff(p)) * sqrtV(mid)))

    # d3: unit-time straight paths (both ways round on a circle)
    targets = [float(y)]
    if periodic_L:
        targets = [float(y) + j * periodic_L for j in (-1, 0, 1)]
    d3 = min(length(np.linspace(float(x), yt, samples)) for yt in targets)
    # d1: half the energy action, minimized over paths and a log grid of horizons
    t_grid = np.geomspace(1e-2, 1e2, 41) if t_grid is None else np.asarray(t_grid)
    best_energy = math.inf
    best_path = None
    for yt in targets:
        for t in t_grid:
            dt = t / m
            p = np.linspace(float(x), yt, m + 1)
            p = _energy_minimize(p, dt, sqrtV)
            mid = 0.5 * (p[1:] + p[:-1])
            E = float(np.sum(np.diff(p) ** 2) / dt + dt * np.sum(sqrtV(mid) ** 2))
            if E < best_energy:
                best_energy, best_path = E, p
    d1 = 0.5 * best_energy
    d2 = length(best_path)
    vals = np.array([d1, d2, d3])
    # the energy form reaches its infimum only as t -> infinity when V vanishes along
    # the way; the finite horizon grid leaves at most |x-y|^2 / (2 t_max) of bias
    resolution = min(abs(float(yt) - float(x)) for yt in targets) ** 2 / (2 * float(np.max(t_grid)))
    spread = float(vals.max() - vals.min())
    scale = float(np.max(np.abs(vals)))
    gap = spread / scale if scale > 0 else 0.0
    return ReparamReport(d1, d2, d3, gap, spread <= 0.02 * scale + resolution, resolution)


def _energy_minimize(p, dt, sqrtV, iters=400):
    """Minimize sum |dp|^2/dt + dt V(mid) over interior nodes (preconditioned descent)."""
    n = len(p) - 2
    if n <= 0:
        return p
    ab = np.zeros((3, n))
    ab[0, 1:] = -1.0
    ab[1, :] = 2.0
    ab[2, :-1] = -1.0
    ab *= 2.0 / dt

    def energy(q):
        mid = 0.5 * (q[1:] + q[:-1])
        return float(np.sum(np.diff(q) ** 2) / dt + dt * np.sum(sqrtV(mid) ** 2))

    def grad(q):
        h = 1e-7
        mid = 0.5 * (q[1:] + q[:-1])
        dV = (sqrtV(mid + h) ** 2 - sqrtV(mid - h) ** 2) / (2 * h)
        dq = np.diff(q)
        gr = np.zeros_like(q)
        gr[:-1] += -2 * dq / dt + dt * dV / 2
        gr[1:] += 2 * dq / dt + dt * dV / 2
        return gr

    E = energy(p)
    for _ in range(iters):
        g = grad(p)
        d = -solve_banded((1, 1), ab, g[1:-1])
        slope = float(g[1:-1] @ d)
        if slope >= 0:
            break
        step = 1.0
        while step > 1e-12:
            q = p.copy()
            q[1:-1] += step * d
            Eq = energy(q)
            if Eq <= E + 1e-4 * step * slope:
                break
            step *= 0.5
        if not Eq < E:
            break
        if E - Eq < 1e-13 * max(1.0, E):
            p, E = q, Eq
            break
        p, E = q, Eq
    return p


# ---------------------------------------------------------------- sup-inf obstruction

@dataclass
class SupInfResult:
    value: float
    y: float
    tolerance: float
    per_y: np.ndarray = field(repr=False)
    nodes: np.ndarray = field(repr=False)


def dx_sup_inf(f, omega: Region, T: float, spec: SurfaceSpec, n_grid: int = 256,
               slices: int = 64) -> SupInfResult:
    """sup_y inf_{x in omega-bar, t in [T/64, T]} d_grad_f(x, y, t) on a meridian or line grid.

    For rotationally invariant omega the theta direction never helps, so the
    meridian (1D) action is the relevant one.  tolerance is the one-step
    resolution of the table: one cell of potential drop plus one cell of kinetic cost.
    """
    if not T > 0:
        raise KernelError("T must be positive")
    lo, hi = spec.s_start, spec.s_end
    if spec.periodic:
        nodes = spec.s_start + (np.arange(n_grid) + 0.5) * spec.L / n_grid
    else:
        nodes = np.linspace(lo, hi, n_grid)
    per = spec.L if spec.periodic else None
    fexp = _as_expr(f)
    dt = T / slices
    # local dX_minus cost: rho plus half the drop of f along the step, with the step
    # taken as the signed shortest displacement so multivalued f (f = s on a circle) works
    step = nodes[None, :] - nodes[:, None]
    if per:
        step = (step + per / 2) % per - per / 2
    df = fexp(nodes[:, None] + step) - fexp(nodes)[:, None]
    A = local_action(f, nodes, dt, per) - df / 2.0
    mask = omega.mask(spec, nodes)
    if not mask.any():
        raise KernelError("omega contains no grid point")
    best = A[mask]
    cur = best
    for _ in range(slices - 1):
        cur = _minplus(cur, A)
        best = np.minimum(best, cur)
    per_y = best.min(axis=0)
    j = int(np.argmax(per_y))
    h = float(np.max(np.diff(nodes)))
    g = float(np.max(np.abs(differentiate(fexp, "s")(nodes))))
    tol = h * g + h * h / (4 * dt)
    return SupInfResult(float(per_y[j]), float(nodes[j]), tol, per_y, nodes)


# ---------------------------------------------------------------- viscous kernel

def _unknown_f(op: DiscreteOperator, f):
    return _as_expr(f)(op.nodes)


def _seam_jump(op: DiscreteOperator, f):
    """f(s + L) - f(s) on periodic grids (nonzero when only f' is periodic, e.g. f = s)."""
    spec = op.spec
    if not spec.periodic:
        return 0.0
    fe = _as_expr(f)
    return float(fe(spec.s_start + spec.L) - fe(spec.s_start))


def transport_generator(op: DiscreteOperator, f):
    """u-picture generator -(1/eps) E^-1 M^-1 S E with E = exp(f/2eps).

    Its off-diagonal entries are eps^-1 cond_ij / M_i * exp((f_j - f_i)/2eps) > 0, so the
    matrix is Metzler and its exponential is entrywise nonnegative.  Only the local
    differences f_j - f_i enter, so across the wrap face f is lifted by its jump.
    """
    fv = _unknown_f(op, f)
    half = fv / (2 * op.eps)
    n = op.size
    A = np.zeros((n, n))
    idx = np.arange(n)
    A[idx, idx] = -op.diag / op.mass / op.eps
    up = -op.off / op.eps
    A[idx[:-1], idx[1:]] = up / op.mass[:-1] * np.exp(half[1:] - half[:-1])
    A[idx[1:], idx[:-1]] = up / op.mass[1:] * np.exp(half[:-1] - half[1:])
    if op.corner:
        J = _seam_jump(op, f) / (2 * op.eps)
        c = -op.corner / op.eps
        # node n-1 sits at node 0 minus one cell once lifted by -L
        A[0, n - 1] = c / op.mass[0] * math.exp(half[n - 1] - J - half[0])
        A[n - 1, 0] = c / op.mass[n - 1] * math.exp(half[0] + J - half[n - 1])
    return A


def metzler_expm(B):
    """exp(B) for a Metzler matrix as (P, log_scale) with exp(B) = exp(log_scale) * P.

    Shift to a nonnegative matrix, sum its Taylor series (no cancellation) and
    square; every stage works with nonnegative entries, so tiny entries keep
    their relative accuracy.
    """
    B = np.asarray(B, float)
    n = len(B)
    sigma = float(np.max(-np.diag(B))) if n else 0.0
    C = B + sigma * np.eye(n)
    C[C < 0] = 0.0                                  # rounding on the shifted diagonal
    norm = float(np.max(np.sum(C, axis=1))) if n else 0.0
    s = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0.5 else 0
    C = C / 2.0 ** s
    P = np.eye(n)
    term = np.eye(n)
    for j in range(1, 40):
        term = term @ C / j
        P = P + term
        if term.max() <= 1e-18 * P.max():
            break
    log_scale = -sigma / 2.0 ** s
    m = P.max()
    P = P / m
    log_scale += math.log(m)
    for _ in range(s):
        P = P @ P
        log_scale *= 2.0
        m = P.max()
        if m > 0:
            P = P / m
            log_scale += math.log(m)
    return P, log_scale


def eigen_propagator(op: DiscreteOperator, f, t: float):
    """u-picture propagator through the symmetric eigen-expansion (dense)."""
    if op.corner and abs(_seam_jump(op, f)) > 1e-12:
        raise KernelError("eigen route needs a single-valued f (f jumps across the periodic seam)")
    S = op.dense_stiffness()
    sq = np.sqrt(op.mass)
    Hs = S / sq[:, None] / sq[None, :]
    lam, Q = eigh(Hs)
    Pv = (Q * np.exp(-lam * t / op.eps)) @ Q.T
    Pv = Pv / sq[:, None] * sq[None, :]
    fv = _unknown_f(op, f)
    half = fv / (2 * op.eps)
    return Pv * np.exp(half[None, :] - half[:, None])


def propagator(op: DiscreteOperator, f, t: float, method: str = "metzler"):
    """(P, log_scale) with u(t) = exp(log_scale) * P u(0)."""
    if method == "metzler":
        return metzler_expm(t * transport_generator(op, f))
    if method == "eigen":
        return eigen_propagator(op, f, t), 0.0
    raise KernelError(f"unknown method {method!r}")


def mollified_deltas(op: DiscreteOperator, width_cells: float = 2.0, columns=None):
    """Discrete Gaussian bumps of unit mass (sum M_i u_i = 1), one column per source node."""
    if width_cells < 2:
        raise KernelError("the mollifier must span at least 2 grid cells")
    s = op.nodes
    h = float(np.median(op.spec.cells))
    w = width_cells * h
    cols = np.arange(len(s)) if columns is None else np.asarray(columns)
    D = s[:, None] - s[None, cols]
    if op.spec.periodic:
        L = op.spec.L
        D = (D + L / 2) % L - L / 2
    U = np.exp(-0.5 * (D / w) ** 2)
    U = U / (op.mass @ U)[None, :]
    return U


@dataclass
class KernelField:
    y: float
    t: float
    eps: float
    values: np.ndarray = field(repr=False)       # K(x_i, y, t) on op.nodes
    log_values: np.ndarray = field(repr=False)
    picture: str = "transport_u"
    H_values: Optional[np.ndarray] = field(default=None, repr=False)
    negative_mass: float = 0.0
    violations: int = 0
    relation: str = "H(x,y) = exp(f(x)/2eps) exp(-f(y)/2eps) K(x,y)"


def kernel_simulate(op: DiscreteOperator, f, y_index: int, t: float, mollifier_width: float = 2.0,
                    method: str = "metzler") -> KernelField:
    if not t > 0:
        raise KernelError("t must be positive")
    u0 = mollified_deltas(op, mollifier_width, [y_index])[:, 0]
    P, ls = propagator(op, f, t, method)
    u = P @ u0
    neg = u < 0
    neg_mass = float(-np.sum(op.mass[neg] * u[neg])) * math.exp(ls)
    violations = int(np.sum(u < -1e-12 * max(float(np.max(np.abs(u))), 1e-300)))
    if neg_mass > 1e-8:
        raise KernelError(f"positivity violated: negative mass {neg_mass:.3g}")
    u = np.maximum(u, 0.0)
    with np.errstate(divide="ignore"):
        logu = np.log(u) + ls
    fv = _unknown_f(op, f)
    logH = logu + (fv - fv[y_index]) / (2 * op.eps)
    return KernelField(float(op.nodes[y_index]), float(t), op.eps, np.exp(logu), logu,
                       H_values=np.exp(logH), negative_mass=neg_mass, violations=violations)


def kernel_matrix(op: DiscreteOperator, f, t: float, method: str = "metzler"):
    """log K(x_i, y_j, t) for point sources (column j divided by the mass of node j)."""
    P, ls = propagator(op, f, t, method)
    with np.errstate(divide="ignore"):
        return np.log(np.maximum(P, 0.0)) + ls - np.log(op.mass)[None, :]


def flat_circle_kernel(x, y, t, eps, L=2 * math.pi, images=8):
    """log of the heat kernel of u_t = eps u'' on a circle of length L (image summation)."""
    d = np.asarray(x, float) - np.asarray(y, float)
    n = np.arange(-images, images + 1)
    z = (d[..., None] + n * L) ** 2 / (4 * eps * t)
    zmin = np.min(z, axis=-1)
    logk = -zmin + np.log(np.sum(np.exp(-(z - zmin[..., None])), axis=-1)) - 0.5 * math.log(4 * math.pi * eps * t)
    return logk


# ---------------------------------------------------------------- Li-Yau slopes

@dataclass
class LiYauPair:
    x: float
    y: float
    t: float
    eps: list
    minus_eps_log_K: list
    fit: float
    d_grad_f: float
    passed: Optional[bool]
    skipped: str = ""


def liyau_check(spec: SurfaceSpec, f, pairs, eps_list, op_builder, m: int = 64):
    """Fit -eps log K_eps(x, y, t) to a constant and compare with d_grad_f(x, y, t).

    op_builder(eps) returns the discrete operator at that eps.
    """
    eps_list = sorted(eps_list, reverse=True)
    if len(eps_list) < 4 or min(eps_list) < EPS_FLOOR - 1e-15:
        raise KernelError("need at least 4 eps values, all >= 0.02")
    for (_, _, t) in pairs:
        if not 0.2 <= t <= 5:
            raise KernelError("pair times must lie in [0.2, 5]")
    out = []
    cache = {}
    for (x, y, t) in pairs:
        vals = []
        skipped = ""
        for e in eps_list:
            key = (e, t)
            if key not in cache:
                op = op_builder(e)
                cache[key] = (op, kernel_matrix(op, f, t))
            op, logK = cache[key]
            i = int(np.argmin(np.abs(spec.wrap(op.nodes - x) if spec.periodic else op.nodes - x)))
            j = int(np.argmin(np.abs(spec.wrap(op.nodes - y) if spec.periodic else op.nodes - y)))
            v = logK[i, j]
            if not np.isfinite(v):
                skipped = f"kernel underflow at eps={e}"
                break
            vals.append(-e * float(v))
        ad = action_distance(f, float(op.nodes[i]), float(op.nodes[j]), t, "dX_minus", m, spec)
        if skipped:
            out.append(LiYauPair(x, y, t, eps_list, vals, math.nan, ad.value, None, skipped))
            continue
        fit = float(np.mean(vals[1:]))
        passed = abs(fit - ad.value) <= 0.1 * (1 + ad.value)
        out.append(LiYauPair(x, y, t, eps_list, vals, fit, ad.value, passed))
    return out


# ---------------------------------------------------------------- L1 kernel observability

@dataclass
class L1Observability:
    O_T: np.ndarray = field(repr=False)
    I_s: np.ndarray = field(repr=False)
    C: float = math.nan
    eps_log_C: float = math.nan
    gronwall: float = math.nan
    times: np.ndarray = field(default=None, repr=False)


def _snapshot_times(T, count=16, ratio=2.0):
    """0 followed by count-1 times growing geometrically up to T."""
    k = np.arange(count - 1)
    return np.concatenate([[0.0], T * ratio ** (k - (count - 2))])


def l1_kernel_observability(op: DiscreteOperator, f, omega: Region, T: float, s: float,
                            mollifier_width: float = 2.0, sources=None) -> L1Observability:
    if not 0 < s <= T:
        raise KernelError("s must lie in (0, T]")
    times = _snapshot_times(T)
    U0 = mollified_deltas(op, mollifier_width, sources)
    mask = omega.mask(op.spec, op.nodes)
    wom = op.mass * mask
    obs = []
    tot = []
    P, ls = propagator(op, f, times[1])
    cur = P
    for j, t in enumerate(times):
        if j == 0:
            U = U0
        else:
            if j > 1:
                # times double: square the previous propagator
                cur = cur @ cur
                m = cur.max()
                cur = cur / m
                ls = 2 * ls + math.log(m)
            U = (cur @ U0) * math.exp(ls)
        obs.append(wom @ U)
        tot.append(op.mass @ U)
    obs = np.array(obs)
    tot = np.array(tot)
    O_T = _trapezoid(obs, times, axis=0)
    Ps, lss = propagator(op, f, s)
    I_s = op.mass @ ((Ps @ U0) * math.exp(lss))
    ratio = I_s / O_T
    C = float(np.max(ratio))
    gron = float(np.max(tot / tot[-1][None, :]))
    return L1Observability(O_T, I_s, C, op.eps * math.log(C), gron, times)


# ---------------------------------------------------------------- positive solutions

@dataclass
class PositiveBracket:
    T_grid: list
    eps_list: list
    eps_log_C: dict
    rates: list
    T_lo: Optional[float]
    T_hi: Optional[float]
    T_GCC: Optional[float]


def positive_cost(op: DiscreteOperator, f, omega: Region, T: float, eta: float, sources,
                  steps: int = 64, mollifier_width: float = 2.0) -> float:
    """log C0+ : max over kernel-column data K(., y, eta) of ||u(T)|| / (int_0^T ||u||_omega^2)^1/2."""
    U0 = mollified_deltas(op, mollifier_width, sources)
    Pe, le = propagator(op, f, eta)
    U = Pe @ U0
    scale = np.max(U, axis=0)
    U = U / scale[None, :]                 # per-column normalization cancels in the ratio
    P, ls = propagator(op, f, T / steps)
    mask = omega.mask(op.spec, op.nodes)
    wom = op.mass * mask
    log_obs = []
    logc = np.zeros(U.shape[1])
    for j in range(steps + 1):
        if j:
            U = P @ U
            mx = np.max(U, axis=0)
            U = U / mx[None, :]
            logc = logc + ls + np.log(mx)
        with np.errstate(divide="ignore"):
            log_obs.append(np.log(wom @ (U * U)) + 2 * logc)
    log_obs = np.array(log_obs)
    # Simpson in time, in log space
    w = np.ones(steps + 1)
    w[1:-1:2] = 4
    w[2:-1:2] = 2
    w = w * (T / steps) / 3
    top = np.max(log_obs, axis=0)
    log_int = top + np.log(np.sum(w[:, None] * np.exp(log_obs - top[None, :]), axis=0))
    log_final = 0.5 * np.log(op.mass @ (U * U)) + logc
    return float(np.max(log_final - 0.5 * log_int))


def positive_time_bracket(op_builder, f, omega: Region, T_grid, eps_list, sources, eta: float = 0.05,
                          T_GCC: Optional[float] = None, delta_fit: float = DELTA_FIT) -> PositiveBracket:
    eps_list = list(eps_list)
    table = {}
    rates = []
    ops = {e: op_builder(e) for e in eps_list}
    for T in T_grid:
        logs = [positive_cost(ops[e], f, omega, T, eta, sources) for e in eps_list]
        table[T] = [e * v for e, v in zip(eps_list, logs)]
        rates.append(slope_sweep(eps_list, logs).fitted_rate)
    T_lo, T_hi = t_unif_bracket(T_grid, rates, delta_fit)
    return PositiveBracket(list(T_grid), eps_list, table, rates, T_lo, T_hi, T_GCC)
