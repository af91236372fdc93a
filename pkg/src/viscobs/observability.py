"""Observability cost: theoretical lower bounds, witness and Gramian estimates, rate fits."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cholesky, eigvalsh, LinAlgError

from .agmon import AgmonField, agmon_distance_1d, weight_W
from .exprdsl import drop_additive_constants
from .geometry import PotentialField, Region, build_surface, effective_potential, sample
from .spectral import (DiscreteOperator, EigenPair, _logsumexp, assemble_operator,
                       lowest_eigenpairs, boundary_flux)

EPS_FLOOR = 0.02
DELTA_FIT = 0.1


class ObservabilityError(ValueError):
    pass


# ---------------------------------------------------------------- theory

@dataclass
class RateBound:
    mode: str
    T: float
    rate: float
    T_bound: float
    never: bool
    W_omega: float
    W_ref: float
    E: float


def theoretical_rate(agmonW: AgmonField, pot: PotentialField, omega: Optional[Region], T: float,
                     mode: str = "revolution", observed_boundary=None) -> RateBound:
    """Exponent of the lower bound on C0(T, eps) and the induced bound on T_unif.

    general:    min_{omega-bar} W_E - max_{K_E} W_E - E T
    revolution: W_omega - W_m - V_min T
    boundary:   min over observed boundary points of W - W_m - V_min T
    """
    if agmonW.W is None:
        raise ObservabilityError("weight W missing; call weight_W first")
    E = agmonW.E
    spec = pot.spec
    if mode == "general":
        W_om = agmonW.W_omega
        W_ref = float(np.max(agmonW.W[agmonW.K_E]))
        K_pts = agmonW.K_E
        if spec.dim == 1 and agmonW.E <= pot.V_min + 1e-12:
            # the bottom level set is the refined minimum point
            f_half = float(agmonW.W[agmonW.K_E].max() - agmonW.d_A[agmonW.K_E].max())
            W_ref = f_half
        meets = False
        if omega is not None:
            if spec.dim == 2:
                X1, X2 = np.meshgrid(spec.nodes, spec.nodes, indexing="ij")
                meets = bool(np.any(omega.mask(spec, (X1, X2)) & K_pts))
            else:
                meets = bool(np.any(omega.mask(spec, agmonW.grid) & K_pts))
        rate = W_om - W_ref - E * T
        if E <= 0:
            never = not meets
            return RateBound(mode, T, rate, math.inf if never else 0.0, never, W_om, W_ref, E)
        return RateBound(mode, T, rate, (W_om - W_ref) / E, False, W_om, W_ref, E)
    if mode == "revolution":
        if not pot.unique_min:
            raise ObservabilityError("revolution bound needs a unique minimum of V_c")
        W_om = agmonW.W_omega
    elif mode == "boundary":
        if not agmonW.W_boundary:
            raise ObservabilityError("boundary bound needs a geometry with boundary")
        pts = observed_boundary or list(agmonW.W_boundary)
        W_om = min(agmonW.W_boundary[float(p)] for p in pts)
    else:
        raise ObservabilityError(f"unknown mode {mode!r}")
    W_ref = agmonW.W_m
    Vmin = pot.V_min
    rate = W_om - W_ref - Vmin * T
    if Vmin <= 0:
        return RateBound(mode, T, rate, math.inf, True, W_om, W_ref, Vmin)
    return RateBound(mode, T, rate, (W_om - W_ref) / Vmin, False, W_om, W_ref, Vmin)


# ---------------------------------------------------------------- witness

def _time_integral_log(mu, T, eps):
    """log of int_0^T exp(-2 mu t / eps) dt, stable for any sign of mu."""
    x = 2.0 * mu * T / eps
    if abs(x) < 1e-12:
        return math.log(T)
    if x > 0:
        return math.log(T) + math.log(-math.expm1(-x) / x)
    # negative mu: integral = T * (exp(|x|) - 1)/|x|
    ax = -x
    return math.log(T) + ax + math.log(-math.expm1(-ax) / ax)


@dataclass
class WitnessResult:
    log_ratio: float
    ratio: float
    eps_log_ratio: float
    numerator_log: float
    denominator_log: float
    refused: bool = False
    reason: str = ""


def witness_cost(pair: EigenPair, f, omega: Optional[Region], T: float, eps: Optional[float] = None,
                 target: str = "interior", spec=None) -> WitnessResult:
    """Certified lower bound on C0(T, eps) from the single-mode solution v = exp(-mu t/eps) psi."""
    eps = pair.eps if eps is None else eps
    if spec is None:
        raise ObservabilityError("witness_cost needs the surface spec of the eigenpair")
    fv = sample(spec, _mod_constants(f, spec))
    logw = np.log(spec.volume_weights())
    f_ref = float(np.min(fv))
    base = 2 * pair.log_abs - (fv - f_ref) / eps + logw
    num = -pair.mu * T / eps + 0.5 * float(_logsumexp(base))
    tint = _time_integral_log(pair.mu, T, eps)
    if target == "interior":
        mask = omega.mask(spec, spec.nodes) if omega is not None else np.ones(len(spec.nodes), bool)
        if not mask.any():
            return WitnessResult(math.inf, math.inf, math.inf, num, -math.inf, True, "omega has no grid nodes")
        obs = 0.5 * float(_logsumexp(base[mask]))
    elif target == "boundary":
        rep = boundary_flux(pair, spec)
        weight = math.log(math.sqrt(2 * math.pi) * (1 + pair.k ** 2) ** 0.25 * eps)
        terms = []
        for b, lf in zip(rep.points, rep.log_flux):
            if omega is None or omega.mask(spec, np.array([b]))[0]:
                terms.append(2 * (lf + weight) - (float(_fx(_mod_constants(f, spec), b)) - f_ref) / eps)
        if not terms:
            return WitnessResult(math.inf, math.inf, math.inf, num, -math.inf, True, "no observed boundary")
        obs = 0.5 * float(_logsumexp(np.array(terms)))
    else:
        raise ObservabilityError(f"unknown target {target!r}")
    if not np.isfinite(obs):
        return WitnessResult(math.inf, math.inf, math.inf, num, obs, True,
                             "eigenfunction vanishes numerically on omega")
    den = 0.5 * tint + obs
    lr = num - den
    return WitnessResult(lr, math.exp(lr) if lr < 700 else math.inf, eps * lr, num, den)


def _mod_constants(f, spec):
    from .geometry import _as_expr
    variables = ("x1", "x2") if spec.dim == 2 else ("s",)
    return drop_additive_constants(_as_expr(f, variables))


def _fx(f, s):
    from .geometry import _as_expr
    return _as_expr(f)(s)


# ---------------------------------------------------------------- gramian

@dataclass
class GramianResult:
    log_C0: float
    C0: float
    eps: float
    T: float
    k: int
    n_modes: int
    refused: bool = False
    reason: str = ""
    condition: float = float("nan")


def _phi1(x):
    """(1 - exp(-x))/x with the limit 1 at x = 0."""
    x = np.asarray(x, float)
    out = np.ones_like(x)
    nz = np.abs(x) > 1e-14
    out[nz] = -np.expm1(-x[nz]) / x[nz]
    return out


def _log_gram(logs, signs, logw, mask=None):
    """Matrix of sum_i psi_m psi_n w_i from log-scale entries, returned as (sign, log|.|)."""
    if mask is not None:
        logs, signs, logw = logs[mask], signs[mask], logw[mask]
    m = logs.shape[1]
    ref = np.max(logs, axis=0)
    ref = np.where(np.isfinite(ref), ref, 0.0)
    scaled = signs * np.exp(logs - ref[None, :])
    wref = float(np.max(logw)) if logw.size else 0.0
    w = np.exp(logw - wref)
    M = scaled.T @ (scaled * w[:, None])
    with np.errstate(divide="ignore"):
        logM = np.log(np.abs(M)) + ref[:, None] + ref[None, :] + wref
    return np.sign(M), logM


def gramian_from_pairs(pairs, spec, f, omega: Optional[Region], T: float, eps: float,
                       adaptive: bool = False) -> GramianResult:
    n = len(pairs)
    k = pairs[0].k if pairs else 0
    fv = sample(spec, _mod_constants(f, spec))
    f_ref = float(np.min(fv))
    logw = np.log(spec.volume_weights()) - (fv - f_ref) / eps
    logs = np.column_stack([p.log_abs for p in pairs])
    signs = np.column_stack([p.sign for p in pairs])
    lam = np.array([p.mu for p in pairs])
    mask = omega.mask(spec, spec.nodes) if omega is not None else np.ones(len(spec.nodes), bool)
    res = _closed_form_gramian(logs, signs, logw, mask, lam, T, eps, k)
    if res is None:
        res = _factored_gramian(logs, signs, logw, mask, lam, T, eps, k, adaptive)
    return res


def _closed_form_gramian(logs, signs, logw, mask, lam, T, eps, k):
    """Exact G entries, Jacobi scaling, Cholesky; None when G is too ill-conditioned."""
    n = len(lam)
    sA, lA = _log_gram(logs, signs, logw)
    sG, lG = _log_gram(logs, signs, logw, mask)
    x = (lam[:, None] + lam[None, :]) * T / eps
    with np.errstate(over="ignore"):
        phi = _phi1(x)
    # negative sums make phi large but finite; keep it in log form
    lG = lG + math.log(T) + np.log(phi)
    lA = lA - x
    dG = np.diag(lG).copy()
    if not np.all(np.isfinite(dG)):
        return GramianResult(math.inf, math.inf, eps, T, k, n, True, "observed norm of a mode vanishes")
    # Jacobi scaling by diag(G)^(-1/2)
    half = 0.5 * (dG[:, None] + dG[None, :])
    Gt = sG * np.exp(lG - half)
    At_log = lA - half
    top = float(np.max(At_log[np.isfinite(At_log)]))
    At = sA * np.exp(At_log - top)
    Gt = 0.5 * (Gt + Gt.T)
    At = 0.5 * (At + At.T)
    evG = np.linalg.eigvalsh(Gt)
    condG = float(evG[-1] / evG[0]) if evG[0] > 0 else math.inf
    if not condG <= GRAM_COND_MAX:
        return None
    try:
        Lc = cholesky(Gt, lower=True)
    except LinAlgError:
        return None
    Linv_A = np.linalg.solve(Lc, At)
    B = np.linalg.solve(Lc, Linv_A.T).T
    B = 0.5 * (B + B.T)
    lmax = float(eigvalsh(B)[-1])
    if lmax <= 0:
        return GramianResult(-math.inf, 0.0, eps, T, k, n)
    logC0 = 0.5 * (math.log(lmax) + top)
    return GramianResult(logC0, math.exp(logC0) if logC0 < 700 else math.inf, eps, T, k, n,
                         condition=condG)


EFOLDS = 8.0


def _time_nodes(T, rate_max, per_level=10):
    """Gauss-Legendre nodes on [0, T] graded geometrically towards t = 0."""
    levels = max(1, int(math.ceil(math.log2(max(T * rate_max * 50.0, 2.0)))))
    x, w = np.polynomial.legendre.leggauss(per_level)
    edges = [0.0] + [T * 2.0 ** (-j) for j in range(levels, -1, -1)]
    ts, ws = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        # split wide intervals so that each one sees at most EFOLDS e-folds
        pieces = max(1, int(math.ceil((b - a) * rate_max / EFOLDS)))
        for j in range(pieces):
            lo = a + (b - a) * j / pieces
            hi = a + (b - a) * (j + 1) / pieces
            ts.append(0.5 * (hi - lo) * x + 0.5 * (hi + lo))
            ws.append(0.5 * (hi - lo) * w)
    return np.concatenate(ts), np.concatenate(ws)


GRAM_COND_MAX = 1e8      # closed-form G route, relative accuracy ~ cond * 1e-16
ROOT_COND_MAX = 1e10     # square-root route, condition of the column-scaled factor


def _factored_gramian(logs, signs, logw, mask, lam, T, eps, k, adaptive=False):
    """Same generalized eigenvalue from square-root factors of A and G.

    G = B^T B with B sampled on omega x (Gauss nodes in time), A = D^T D with D the
    terminal weighted modes.  Columns are scaled to unit observed norm, B = QR, and
    C0 = sigma_max(D R^-1); only the condition of R (the square root of that of G)
    matters.  The leading m x m block of R factors the first m modes, so the
    adaptive mode cap needs no refactorization.
    """
    n = len(lam)
    rate_max = float(np.max(np.abs(2 * lam))) / eps + 1.0 / T
    tq, wq = _time_nodes(T, rate_max)
    # spatial factor first: B_t = Psi_w diag(exp(-lam t/eps)) has the same R as R0 diag(...)
    lo_om = 0.5 * logw[mask][:, None] + logs[mask]
    smax = np.max(lo_om, axis=0)
    if not np.all(np.isfinite(smax)):
        return GramianResult(math.inf, math.inf, eps, T, k, n, True, "observed norm of a mode vanishes")
    Psi = signs[mask] * np.exp(lo_om - smax)
    _, R0 = np.linalg.qr(Psi)
    logt = 0.5 * np.log(wq)[:, None] - lam[None, :] * tq[:, None] / eps      # (times, modes)
    cmax = np.max(logt, axis=0)
    Bm = (R0[None, :, :] * np.exp(logt - cmax)[:, None, :]).reshape(-1, n)
    norms = np.linalg.norm(Bm, axis=0)
    Bm = Bm / norms
    cscale = smax + cmax + np.log(norms)
    Rb = np.linalg.qr(Bm, mode="r")

    def cond_of(m):
        sv = np.linalg.svd(Rb[:m, :m], compute_uv=False)
        return float(sv[0] / sv[-1]) if sv[-1] > 0 else math.inf

    m = n
    cond = cond_of(n)
    reason = ""
    if not cond <= ROOT_COND_MAX:
        full = cond
        if not adaptive:
            return GramianResult(math.nan, math.nan, eps, T, k, n, True,
                                 f"observation Gramian is numerically singular (condition ~ {full ** 2:.3g})",
                                 full ** 2)
        lo, hi = 1, n          # the condition of leading blocks grows with m
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if cond_of(mid) <= ROOT_COND_MAX:
                lo = mid
            else:
                hi = mid
        m = lo
        cond = cond_of(m)
        reason = f"mode cap {m} of {n} (next block singular, condition ~ {full ** 2:.3g})"
    logD = 0.5 * logw[:, None] + logs[:, :m] - lam[None, :m] * T / eps - cscale[None, :m]
    top = float(np.max(logD))
    Dm = signs[:, :m] * np.exp(logD - top)
    X = np.linalg.solve(Rb[:m, :m].T, Dm.T).T          # D R^-1
    smax_ = float(np.linalg.svd(X, compute_uv=False)[0])
    logC0 = math.log(smax_) + top
    return GramianResult(logC0, math.exp(logC0) if logC0 < 700 else math.inf, eps, T, k, m,
                         reason=reason, condition=cond ** 2)


def gramian_cost(op: DiscreteOperator, f, omega: Optional[Region], T: float, n_modes: int = 32,
                 adaptive: bool = False, pairs=None) -> GramianResult:
    """C0(T, eps) of one operator restricted to its n_modes lowest modes.

    With adaptive=True a numerically singular Gramian is not refused outright: the
    largest leading block of modes that is still resolvable is used instead.  The
    sup over a subspace is below the sup over all modes, so the value stays a
    lower bound for C0.
    """
    if op.eps < EPS_FLOOR - 1e-15:
        raise ObservabilityError(f"eps={op.eps} is below the conditioning floor {EPS_FLOOR}")
    n_modes = min(n_modes, op.size)
    if pairs is None:
        pairs = lowest_eigenpairs(op, n_modes)
    return gramian_from_pairs(pairs[:n_modes], op.spec, f, omega, T, op.eps, adaptive)


def revolution_gramian(spec, f, q, omega, T, eps, ks, n_modes=32, include_qf=True, cut=None,
                       threads=1, adaptive=False) -> GramianResult:
    """Sup over Fourier modes k of the per-mode Gramian cost (rotationally invariant omega)."""
    def one(k):
        op = assemble_operator(spec, f, q, eps, k, include_qf=include_qf, cut=cut)
        return gramian_cost(op, f, omega, T, n_modes, adaptive)
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, ks))
    else:
        results = [one(k) for k in ks]
    refused = [r for r in results if r.refused]
    if refused:
        r = refused[0]
        return GramianResult(math.nan, math.nan, eps, T, r.k, n_modes, True,
                             f"mode k={r.k}: {r.reason}", r.condition)
    best = max(results, key=lambda r: r.log_C0)
    return best


# ---------------------------------------------------------------- rate fits

@dataclass
class SweepFit:
    eps: list
    eps_log_C0: list
    fitted_rate: float
    width: float
    theory_rate: Optional[float]
    passed: Optional[bool]
    partial: bool = False


def slope_sweep(eps_list, log_C0_list, theory_rate=None, delta_fit=DELTA_FIT) -> SweepFit:
    """Constant-model least squares of eps*log C0 after dropping the largest eps."""
    eps = np.asarray(eps_list, float)
    vals = np.asarray(log_C0_list, float)
    if len(eps) < 4:
        raise ObservabilityError("a sweep needs at least 4 eps values")
    if np.any(~np.isfinite(vals)):
        return SweepFit(list(eps), list(eps * vals), math.nan, math.nan, theory_rate, None, True)
    y = eps * vals
    keep = np.ones(len(eps), bool)
    keep[int(np.argmax(eps))] = False
    rate = float(np.mean(y[keep]))
    width = float(np.std(y[keep], ddof=1)) if keep.sum() > 1 else 0.0
    passed = None if theory_rate is None else bool(rate >= theory_rate - delta_fit)
    return SweepFit(list(eps), list(y), rate, width, theory_rate, passed)


def t_unif_bracket(T_grid, rates, delta_fit=DELTA_FIT):
    """[T_lo, T_hi]: last T with certified blow-up, first T without detected blow-up."""
    T_grid = list(T_grid)
    if any(b <= a for a, b in zip(T_grid, T_grid[1:])):
        raise ObservabilityError("T_grid must be increasing")
    blow = [T for T, r in zip(T_grid, rates) if r > delta_fit]
    calm = [T for T, r in zip(T_grid, rates) if r < delta_fit]
    T_lo = max(blow) if blow else None
    T_hi = min(calm) if calm else None
    return T_lo, T_hi


# ---------------------------------------------------------------- named scenarios

@dataclass
class NamedScenario:
    name: str
    params: dict
    geometry: dict
    f: str
    q: str
    c: float
    omega: Region
    mode: str
    condition: str
    predicted: dict = field(default_factory=dict)
    observed_boundary: tuple = ()
    cut: Optional[str] = None
    flow_omega: Optional[Region] = None

    def surface(self):
        return build_surface(self.geometry)


def flambda_expr(lam: float, var: str = "s") -> str:
    """Closed antiderivative of sqrt(lam^2 t^2 + 1) from 0."""
    lam = float(lam)
    r = f"sqrt({lam!r}^2*{var}^2 + 1)"
    return f"{var}*{r}/2 + log({lam!r}*{var} + {r})/(2*{lam!r})"


def _torus_chi(delta, alpha, L, p):
    a0 = 0.5 * (alpha + L / 2)
    b0 = 0.5 * (a0 + L / 2)
    w = 2 * math.pi / L
    # plateau 1/delta on |s| <= a0, strictly decreasing to 1 at |s| = L/2, flat of order 2p there
    g = f"((1 + cos({w!r}*s))/(1 + cos({w * a0!r})))^{p}"
    h = f"(1 - smoothstep({a0!r}, {b0!r}, abs(s))*(1 - {g}))"
    return f"(1 + ({1 / delta - 1!r})*{h})", a0


def build_named_scenario(name: str, params: Optional[dict] = None) -> NamedScenario:
    p = dict(params or {})
    if name == "flambda":
        lam = float(p.get("lam", 4.0))
        eta = float(p.get("eta", 0.25))
        Lh = float(p.get("L", 1.0))
        n = int(p.get("n", 1))
        grid_n = int(p.get("grid_n", 801))
        if lam <= 0 or not 0 < eta < Lh:
            raise ObservabilityError("flambda needs lam > 0 and 0 < eta < L")
        if n == 1:
            geom = dict(case="interval", L=2 * Lh, s_start=-Lh, grid_n=grid_n)
            f = flambda_expr(lam)
            omega = Region(intervals=((eta, Lh),))
        elif n == 2:
            geom = dict(case="box2d", L=2 * Lh, s_start=-Lh, grid_n=grid_n)
            f = flambda_expr(lam, "x1") + " + " + flambda_expr(lam, "x2")
            omega = Region(boxes=(((eta, Lh), (eta, Lh)),))
        else:
            raise ObservabilityError("flambda supports n = 1 or 2")
        pred = {"T_unif_lower": lam * eta ** 2 / n, "diam": 2 * Lh * math.sqrt(n)}
        return NamedScenario("flambda", dict(lam=lam, eta=eta, L=Lh, n=n), geom, f, "0", 0.0,
                             omega, "general", "FC", pred)
    if name == "sphere_caps":
        delta = float(p.get("delta", 0.05))
        c = float(p.get("c", 1.0))
        L = float(p.get("L", math.pi))
        grid_n = int(p.get("grid_n", 1024))
        if not 0 < delta < L / 4 or c < 0:
            raise ObservabilityError("sphere_caps needs 0 < delta < L/4 and c >= 0")
        f = (f"smoothstep_int({delta / 2!r}, {delta!r}, s) - "
             f"smoothstep_int({L - delta!r}, {L - delta / 2!r}, s)")
        geom = dict(case="sphere", L=L, R="sin(s)" if abs(L - math.pi) < 1e-15 else f"{L / math.pi!r}*sin({math.pi / L!r}*s)",
                    grid_n=grid_n)
        omega = Region(intervals=((0.0, delta), (L - delta, L)))
        pred = {"T_GCC": L - 2 * delta}
        return NamedScenario("sphere_caps", dict(delta=delta, c=c, L=L), geom, f, "0", c, omega,
                             "revolution", "GCC", pred)
    if name == "torus_profile":
        delta = float(p.get("delta", 0.05))
        alpha = float(p.get("alpha", 1.7))
        L = float(p.get("L", 2 * math.pi))
        amp = float(p.get("a", 0.5))
        flat = int(p.get("p", 3))
        grid_n = int(p.get("grid_n", 1024))
        if not 0 < delta < 1:
            raise ObservabilityError("torus_profile needs 0 < delta < 1")
        w = 2 * math.pi / L
        if not (math.pi / 2) / w < alpha < L / 2:
            raise ObservabilityError("alpha must contain the critical points of f and stay below L/2")
        f = f"{amp!r}*sin({w!r}*s)"
        M = (amp * w) ** 2 / 4
        chi, a0 = _torus_chi(delta, alpha, L, flat)
        R = f"({chi} + {M!r} - ({amp * w!r}*cos({w!r}*s))^2/4)^(-0.5)"
        geom = dict(case="torus", L=L, R=R, grid_n=grid_n, s_start=-L / 2)
        omega = Region(intervals=((-alpha, alpha),))
        pred = {"d_A_alpha_lower": 0.5 * (L / 2 - alpha) * (delta ** -0.5 - 1),
                "min_R_upper": math.sqrt(delta), "M": M}
        return NamedScenario("torus_profile", dict(delta=delta, alpha=alpha, L=L, a=amp, p=flat),
                             geom, f, "0", 1.0, omega, "revolution", "GCC", pred, cut="auto")
    if name == "cylinder_profile":
        delta = float(p.get("delta", 0.2))
        gamma = float(p.get("gamma", 3.0))
        L = float(p.get("L", 2.0))
        grid_n = int(p.get("grid_n", 4001))
        if not (0 < delta < 1 and gamma > 2):
            raise ObservabilityError("cylinder_profile needs 0 < delta < 1 and gamma > 2")
        kappa = 1.0 / L
        f = f"s + {kappa / 2!r}*(s - {L / 2!r})^2"
        fp = f"(1 + {kappa!r}*(s - {L / 2!r}))"
        M = (1 + kappa * L / 2) ** 2 / 4
        u = f"({L / 2!r} - abs(s - {L / 2!r}))"
        chi = f"(1 - smoothstep({L / 4!r}, {3 * L / 8!r}, {u}))"
        Vd = f"({chi}/({u} + {delta!r})^{gamma!r} + (1 - {chi})*({u} - {L / 2!r})^2 + {M!r})"
        R = f"({Vd} - {fp}^2/4)^(-0.5)"
        geom = dict(case="cylinder", L=L, R=R, grid_n=grid_n)
        g2 = gamma / 2 - 1
        pred = {"T_unif_boundary_leading": (delta ** (-g2) / g2) / M, "M": M,
                "d_A_0_lower": delta ** (-g2) / g2 - (delta + L / 4) ** (-g2) / g2}
        return NamedScenario("cylinder_profile", dict(delta=delta, gamma=gamma, L=L), geom, f, "0",
                             1.0, Region(intervals=()), "boundary", "FC", pred,
                             observed_boundary=(0.0, L))
    raise ObservabilityError(f"unknown named scenario {name!r}")


NAMED = ("flambda", "sphere_caps", "torus_profile", "cylinder_profile")


def scenario_weights(sc: NamedScenario, spec=None, E=None):
    """Potential, Agmon field and weight for a named scenario at its own c."""
    spec = spec or sc.surface()
    pot = effective_potential(spec, sc.f, sc.c)
    if spec.dim == 2:
        from .agmon import agmon_distance_grid
        ag = agmon_distance_grid(pot, E)
    else:
        ag = agmon_distance_1d(pot, E)
    return spec, pot, weight_W(ag, sc.f, sc.omega)


def torus_cut_face(spec, agmonW: AgmonField, omega: Region) -> int:
    """Periodic cut placed at the node of omega-bar farthest (in Agmon distance) from s_min."""
    mask = omega.mask(spec, spec.nodes)
    score = np.where(mask, agmonW.d_A, -np.inf)
    return int(np.argmax(score))
