"""Discretized conjugated operators, eigenpairs with accurate tails, and localization checks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import eigh, eigh_tridiagonal

from .exprdsl import differentiate
from .geometry import PotentialField, Region, SurfaceSpec, _as_expr

LOG_OVERFLOW = 700.0


class SpectralError(ValueError):
    pass


@dataclass(frozen=True)
class DiscreteOperator:
    spec: SurfaceSpec
    eps: float
    k: int
    c: float
    nodes: np.ndarray = field(repr=False)       # unknown nodes (Dirichlet removed)
    keep: np.ndarray = field(repr=False)        # mask of unknowns inside spec.nodes
    diag: np.ndarray = field(repr=False)        # stiffness diagonal
    off: np.ndarray = field(repr=False)         # stiffness super-diagonal
    mass: np.ndarray = field(repr=False)
    potential: np.ndarray = field(repr=False)   # V_c on the unknowns
    q_f: np.ndarray = field(repr=False)
    corner: float = 0.0                         # periodic wrap coupling (0 if cut or flat)
    cut: Optional[int] = None                   # face index removed on periodic grids

    @property
    def size(self):
        return len(self.diag)

    def sym_tridiagonal(self):
        sq = np.sqrt(self.mass)
        return self.diag / self.mass, self.off / (sq[:-1] * sq[1:])

    def dense_stiffness(self):
        S = np.diag(self.diag) + np.diag(self.off, 1) + np.diag(self.off, -1)
        if self.corner:
            S[0, -1] = S[-1, 0] = self.corner
        return S

    def apply(self, phi):
        out = self.diag * phi
        out[:-1] += self.off * phi[1:]
        out[1:] += self.off * phi[:-1]
        if self.corner:
            out[0] += self.corner * phi[-1]
            out[-1] += self.corner * phi[0]
        return out


@dataclass
class EigenPair:
    k: int
    eps: float
    mu: float
    phi: np.ndarray = field(repr=False)         # on spec.nodes, normalized in L2(R ds)
    log_abs: np.ndarray = field(repr=False)     # log|phi|, finite far below underflow
    sign: np.ndarray = field(repr=False)
    norm_check: float = 0.0
    index: int = 0
    residual: float = 0.0


@dataclass
class EnergyDensity:
    E_k: np.ndarray
    E_k_plus: np.ndarray


def assemble_operator(spec: SurfaceSpec, f, q="0", eps: float = 0.1, k: int = 0,
                      include_qf: bool = True, cut=None, c: Optional[float] = None) -> DiscreteOperator:
    """Flux-form finite volumes for -eps^2 (1/R)(R phi')' + (V_c + eps q_f) phi.

    On revolution surfaces the mode-k rotation term is (eps*k)^2/R^2 unless an
    explicit c is given.  cut: None, a face index, or "auto" (periodic grids only).
    """
    if not eps > 0:
        raise SpectralError("eps must be positive")
    if k < 0:
        raise SpectralError("mode index k must be nonnegative")
    if spec.dim != 1:
        raise SpectralError("operators are one-dimensional (meridian or flat line)")
    f = _as_expr(f)
    q = _as_expr(q)
    fp = differentiate(f, "s")
    fpp = differentiate(fp, "s")
    s = spec.nodes
    R = spec.R_at(s)
    cval = float(eps * k) if c is None else float(c)
    if cval > 0 and not spec.revolution:
        raise SpectralError("rotation term needs a revolution surface")
    V = fp(s) ** 2 / 4.0
    if cval > 0:
        V = V + cval ** 2 / R ** 2
    lap = fpp(s)
    if spec.R is not None:
        Rp = differentiate(spec.R, "s")
        lap = lap + Rp(s) / R * fp(s)
    qf = lap / 2.0 - q(s)
    W = V + (eps * qf if include_qf else 0.0)

    n = len(s)
    mass_all = spec.cells * R
    # faces between consecutive nodes (and the wrap face on periodic grids)
    if spec.periodic:
        gaps = np.append(np.diff(s), s[0] + spec.L - s[-1])
        mids = np.append(0.5 * (s[1:] + s[:-1]), s[-1] + 0.5 * gaps[-1])
        Rf = spec.R_at(spec.wrap(mids))
    else:
        gaps = np.diff(s)
        Rf = spec.R_at(0.5 * (s[1:] + s[:-1]))
    cond = eps ** 2 * Rf / gaps
    diag = mass_all * W
    if spec.periodic:
        diag = diag + cond + np.roll(cond, 1)
        off = -cond[:-1]
        corner = -cond[-1]
    else:
        diag = diag.copy()
        diag[:-1] += cond
        diag[1:] += cond
        off = -cond
        corner = 0.0

    keep = ~spec.dirichlet
    cut_idx = None
    if spec.periodic and cut is not None:
        if cut == "auto":
            raise SpectralError("cut='auto' must be resolved by the caller (see auto_cut)")
        cut_idx = int(cut) % n
        # remove face cut_idx (between node cut_idx and cut_idx+1) and rotate so it is the wrap face
        c_face = cond[cut_idx]
        diag = diag.copy()
        diag[cut_idx] -= c_face
        diag[(cut_idx + 1) % n] -= c_face
        order = np.roll(np.arange(n), -(cut_idx + 1))
        full_off = np.append(off, corner)  # face j couples node j and j+1
        off = np.array([full_off[order[j]] for j in range(n - 1)])
        diag = diag[order]
        mass_all = mass_all[order]
        V, qf, s = V[order], qf[order], s[order]
        keep = keep[order]
        corner = 0.0
    elif keep is not None and not keep.all():
        idx = np.nonzero(keep)[0]
        diag = diag[idx]
        off = off[idx[:-1]] if len(idx) > 1 else np.zeros(0)
        # couplings across removed Dirichlet nodes vanish (they are not adjacent to each other)
        mass_all, V, qf, s = mass_all[idx], V[idx], qf[idx], s[idx]
    return DiscreteOperator(spec, float(eps), int(k), cval, s, keep, diag, off, mass_all, V, qf,
                            corner, cut_idx)


def auto_cut(spec: SurfaceSpec, score: np.ndarray) -> int:
    """Face index to cut on a periodic grid: the face after the node maximizing score."""
    return int(np.argmax(score))


# ---------------------------------------------------------------- eigenvectors

def _sweep(d, e, mu, forward=True):
    """Scaled three-term recurrence for (T - mu) y = 0, vectorized over mu.

    Returns mantissas and log offsets so that y_i = mant_i * exp(off_i).
    """
    n = len(d)
    m = len(mu)
    mant = np.zeros((n, m))
    off = np.zeros((n, m))
    order = range(n) if forward else range(n - 1, -1, -1)
    prev = np.zeros(m)
    cur = np.ones(m)
    log_scale = np.zeros(m)
    it = list(order)
    mant[it[0]] = cur
    for step in range(1, n):
        i_prev = it[step - 1]
        if forward:
            coupling_back = e[i_prev - 1] if i_prev - 1 >= 0 else 0.0
            nxt = -((d[i_prev] - mu) * cur + coupling_back * prev) / e[i_prev]
        else:
            coupling_back = e[i_prev] if i_prev + 1 <= n - 1 else 0.0
            nxt = -((d[i_prev] - mu) * cur + coupling_back * prev) / e[i_prev - 1]
        scale = np.maximum(np.abs(nxt), np.abs(cur))
        scale = np.where(scale > 0, scale, 1.0)
        prev = cur / scale
        cur = nxt / scale
        log_scale = log_scale + np.log(scale)
        mant[it[step]] = cur
        off[it[step]] = log_scale
    return mant, off


def tridiagonal_eigvecs(d, e, mu):
    """Eigenvectors of the symmetric tridiagonal (d, e) for eigenvalues mu with accurate tails.

    Forward and backward recurrences are joined at the twist index that
    minimizes the mismatch; entries are returned as (log|y|, sign).
    """
    d = np.asarray(d, float)
    e = np.asarray(e, float)
    mu = np.atleast_1d(np.asarray(mu, float))
    n = len(d)
    if n == 1:
        return np.zeros((1, len(mu))), np.ones((1, len(mu)))
    # tiny couplings would make the recurrence divide by ~0
    e = np.where(np.abs(e) < 1e-300, -1e-300, e)
    fm, fo = _sweep(d, e, mu, True)
    bm, bo = _sweep(d, e, mu, False)
    with np.errstate(divide="ignore", invalid="ignore"):
        # gamma_r = (d_r - mu) + e_{r-1} y_{r-1}/y_r (forward) + e_r y_{r+1}/y_r (backward)
        ratio_f = np.zeros((n, len(mu)))
        ratio_f[1:] = fm[:-1] / fm[1:] * np.exp(fo[:-1] - fo[1:])
        ratio_b = np.zeros((n, len(mu)))
        ratio_b[:-1] = bm[1:] / bm[:-1] * np.exp(bo[1:] - bo[:-1])
        gamma = (d[:, None] - mu[None, :])
        gamma[1:] += e[:, None] * ratio_f[1:]
        gamma[:-1] += e[:, None] * ratio_b[:-1]
    score = np.abs(gamma)
    score[~np.isfinite(score)] = np.inf
    r = np.argmin(score, axis=0)
    cols = np.arange(len(mu))
    log_f = np.log(np.abs(fm)) + fo
    log_b = np.log(np.abs(bm)) + bo
    sgn_f = np.sign(fm)
    sgn_b = np.sign(bm)
    shift = log_f[r, cols] - log_b[r, cols]
    flip = sgn_f[r, cols] * sgn_b[r, cols]
    idx = np.arange(n)[:, None]
    use_f = idx <= r[None, :]
    log_abs = np.where(use_f, log_f, log_b + shift[None, :])
    sign = np.where(use_f, sgn_f, sgn_b * flip[None, :])
    sign[sign == 0] = 1.0
    return log_abs, sign


def _logsumexp(x, axis=0):
    mx = np.max(x, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    return np.squeeze(mx, axis=axis) + np.log(np.sum(np.exp(x - mx), axis=axis))


def _pairs_from(op: DiscreteOperator, mus, indices, log_abs_y, sign_y, dense_vecs=None):
    spec = op.spec
    logm = np.log(op.mass)
    log_phi = log_abs_y - 0.5 * logm[:, None]
    # normalize in the mass inner product
    lognorm = 0.5 * _logsumexp(2 * log_phi + logm[:, None], axis=0)
    log_phi = log_phi - lognorm[None, :]
    # sign convention: largest-magnitude entry positive
    top = np.argmax(log_phi, axis=0)
    cols = np.arange(log_phi.shape[1])
    sign = sign_y * sign_y[top, cols][None, :]
    out = []
    n_all = len(spec.nodes)
    for j, mu in enumerate(mus):
        phi_u = sign[:, j] * np.exp(log_phi[:, j])
        la = np.full(n_all, -np.inf)
        sg = np.ones(n_all)
        full = np.zeros(n_all)
        if op.cut is not None:
            order = np.roll(np.arange(n_all), -(op.cut + 1))
            full[order] = phi_u
            la[order] = log_phi[:, j]
            sg[order] = sign[:, j]
        else:
            pos = np.nonzero(op.keep)[0]
            full[pos] = phi_u
            la[pos] = log_phi[:, j]
            sg[pos] = sign[:, j]
        res = op.apply(phi_u) - mu * op.mass * phi_u
        resid = float(np.linalg.norm(res) / np.linalg.norm(op.mass * phi_u))
        norm = float(np.sum(op.mass * phi_u ** 2))
        out.append(EigenPair(op.k, op.eps, float(mu), full, la, sg, abs(math.sqrt(norm) - 1.0),
                             int(indices[j]), resid))
    return out


def _dense_pairs(op, select):
    S = op.dense_stiffness()
    sq = np.sqrt(op.mass)
    T = S / sq[:, None] / sq[None, :]
    w, Y = eigh(T)
    idx = select(w)
    Y = Y[:, idx]
    with np.errstate(divide="ignore"):
        la = np.log(np.abs(Y))
    return _pairs_from(op, w[idx], idx, la, np.sign(Y))


def lowest_eigenpairs(op: DiscreteOperator, count: int):
    if count > op.size:
        raise SpectralError(f"count {count} exceeds matrix dimension {op.size}")
    if op.corner:
        return _dense_pairs(op, lambda w: np.arange(count))
    d, e = op.sym_tridiagonal()
    w = eigh_tridiagonal(d, e, eigvals_only=True, select="i", select_range=(0, count - 1))
    la, sg = tridiagonal_eigvecs(d, e, w)
    return _pairs_from(op, w, np.arange(count), la, sg)


def all_eigenvalues(op: DiscreteOperator):
    if op.corner:
        return np.linalg.eigvalsh(_sym_dense(op))
    d, e = op.sym_tridiagonal()
    return eigh_tridiagonal(d, e, eigvals_only=True)


def _sym_dense(op):
    S = op.dense_stiffness()
    sq = np.sqrt(op.mass)
    return S / sq[:, None] / sq[None, :]


def nearest_eigenpair(op: DiscreteOperator, E_target: float, count: int = 1):
    """The count eigenpairs with eigenvalue closest to E_target, sorted by distance."""
    if count < 1:
        raise SpectralError("count must be at least 1")
    if count > op.size:
        raise SpectralError(f"count {count} exceeds matrix dimension {op.size}")
    w = all_eigenvalues(op)
    order = np.argsort(np.abs(w - E_target), kind="stable")[:count]
    if op.corner:
        return _dense_pairs(op, lambda ww: order)
    d, e = op.sym_tridiagonal()
    la, sg = tridiagonal_eigvecs(d, e, w[order])
    return _pairs_from(op, w[order], order, la, sg)


# ---------------------------------------------------------------- conjugation

@dataclass
class Scaled:
    """values * exp(log_offset); used when exp(+-f/2eps) would overflow."""
    values: np.ndarray
    log_offset: float

    def to_array(self):
        with np.errstate(divide="ignore", over="ignore"):
            return np.sign(self.values) * np.exp(np.log(np.abs(self.values)) + self.log_offset)


def conjugate(u, f_vals, eps: float, direction: str = "to_v", time_scale: str = "none"):
    """v = exp(f/2eps) u (to_v) or u = exp(-f/2eps) v (to_u).

    time_scale="by_eps" only tags the result: the v-picture evolves in t/eps.
    """
    if direction not in ("to_v", "to_u"):
        raise ValueError("direction must be to_v or to_u")
    sgn = 1.0 if direction == "to_v" else -1.0
    if isinstance(u, Scaled):
        base, off = np.asarray(u.values, float), u.log_offset
    else:
        base, off = np.asarray(u, float), 0.0
    expo = sgn * np.asarray(f_vals, float) / (2.0 * eps)
    top = float(np.max(np.abs(expo))) if np.size(expo) else 0.0
    if top > LOG_OVERFLOW or off != 0.0:
        # work with log magnitudes so offsets from either side cancel before exponentiating
        with np.errstate(divide="ignore"):
            log_mag = np.log(np.abs(base)) + expo + off
        finite = log_mag[np.isfinite(log_mag)]
        shift = float(np.max(finite)) if finite.size else 0.0
        vals = np.sign(base) * np.exp(log_mag - shift)
        if abs(shift) <= LOG_OVERFLOW:
            out = vals * math.exp(shift)
            return (out, "t/eps") if time_scale == "by_eps" else out
        res = Scaled(vals, shift)
        return (res, "t/eps") if time_scale == "by_eps" else res
    out = base * np.exp(expo)
    return (out, "t/eps") if time_scale == "by_eps" else out


# ---------------------------------------------------------------- diagnostics

def _centered_derivative(spec: SurfaceSpec, phi):
    s = spec.nodes
    if spec.periodic:
        return (np.roll(phi, -1) - np.roll(phi, 1)) / (2 * spec.h)
    return np.gradient(phi, s)


def energy_densities(pair: EigenPair, pot: PotentialField) -> EnergyDensity:
    phi = pair.phi
    dphi = _centered_derivative(pot.spec, phi)
    kin = pair.eps ** 2 * dphi ** 2
    Ek_plus = kin + (pot.values - pair.mu) * phi ** 2
    Ek = Ek_plus + phi ** 2
    return EnergyDensity(Ek, Ek_plus)


@dataclass
class DecayReport:
    bands: list
    log_mass: list
    d_band: list
    d_center: list
    lower_ok: list
    upper_ok: list
    slope: float
    intercept: float
    gap: float
    allowed_mass: Optional[float]
    passed: bool
    refused: bool = False
    reason: str = ""


def band_log_norm(pair: EigenPair, spec: SurfaceSpec, a: float, b: float) -> float:
    """log of ||phi||_{L2([a,b], R ds)} from the log-scale entries."""
    s = spec.nodes
    sel = (s >= a) & (s <= b)
    if spec.periodic:
        sel = Region(intervals=((a, b),)).mask(spec, s)
    if not sel.any():
        return -np.inf
    w = np.log(spec.volume_weights()[sel])
    return 0.5 * float(_logsumexp(2 * pair.log_abs[sel] + w))


def verify_decay_bounds(pair: EigenPair, agmon, bands, delta: float = 0.1, pole_margin=0.0,
                        allowed_radius: Optional[float] = None, max_gap: float = 0.5) -> DecayReport:
    """Two-sided Agmon check of band norms and the slope of -eps log m against d_A(center)."""
    spec = agmon.pot.spec
    eps = pair.eps
    gap = pair.mu - agmon.pot.V_min
    if abs(gap) > max_gap:
        return DecayReport([], [], [], [], [], [], float("nan"), float("nan"), gap, None, False,
                           True, f"eigenvalue gap {gap:.4g} too large for the localization hypothesis")
    log_m, d_band, d_cent, lo_ok, up_ok = [], [], [], [], []
    for a, b in bands:
        if spec.pole_set and (min(abs(a - p) for p in spec.pole_set) < pole_margin
                              or min(abs(b - p) for p in spec.pole_set) < pole_margin):
            raise SpectralError(f"band ({a}, {b}) is within the pole safety margin")
        lm = band_log_norm(pair, spec, a, b)
        sel = (agmon.grid >= a) & (agmon.grid <= b)
        dmin = float(np.min(agmon.d_A[sel])) if sel.any() else float(agmon.at(0.5 * (a + b))[0])
        dc = float(agmon.at(0.5 * (a + b))[0])
        log_m.append(lm)
        d_band.append(dmin)
        d_cent.append(dc)
        lo_ok.append(lm >= -(dmin + delta) / eps)
        up_ok.append(lm <= -((1 - delta) * dmin - delta) / eps)
    y = -eps * np.asarray(log_m)
    x = np.asarray(d_cent)
    if len(x) >= 2:
        slope, intercept = np.polyfit(x, y, 1)
    else:
        slope, intercept = float("nan"), float("nan")
    allowed = None
    if allowed_radius is not None:
        s0 = agmon.pot.s_min
        allowed = float(np.exp(2 * band_log_norm(pair, spec, s0 - allowed_radius, s0 + allowed_radius)))
    passed = all(lo_ok) and all(up_ok)
    return DecayReport(list(bands), log_m, d_band, d_cent, lo_ok, up_ok, float(slope),
                       float(intercept), float(gap), allowed, bool(passed))


@dataclass
class BoundaryReport:
    points: list
    flux: list
    log_flux: list
    h_half: list
    checks: list = field(default_factory=list)


def boundary_flux(pair: EigenPair, spec: SurfaceSpec, agmon=None, delta: float = 0.1, tol: float = 0.0):
    """|d_s phi| at each Dirichlet end by a one-sided second-order difference."""
    if not spec.boundary:
        raise SpectralError("no boundary in this geometry")
    s = spec.nodes
    pts, flux, logs, hh, checks = [], [], [], [], []
    for b in spec.boundary:
        if abs(b - s[-1]) < abs(b - s[0]):
            i0, i1, i2 = len(s) - 1, len(s) - 2, len(s) - 3
            h = s[i0] - s[i1]
        else:
            i0, i1, i2 = 0, 1, 2
            h = s[i1] - s[i0]
        la = pair.log_abs
        ref = max(la[i1], la[i2])
        m1 = pair.sign[i1] * math.exp(la[i1] - ref)
        m2 = pair.sign[i2] * math.exp(la[i2] - ref) if np.isfinite(la[i2]) else 0.0
        # phi vanishes at the end node: (3*0 - 4 phi_1 + phi_2) / (2h)
        mant = abs(-4 * m1 + m2) / (2 * h)
        log_d = math.log(mant) + ref if mant > 0 else -math.inf
        pts.append(float(b))
        logs.append(log_d)
        flux.append(math.exp(log_d) if log_d > -745 else 0.0)
        weight = math.sqrt(2 * math.pi) * (1 + pair.k ** 2) ** 0.25
        hh.append(weight * flux[-1])
        if agmon is not None:
            dA = float(agmon.at(b)[0])
            measured = -pair.eps * log_d
            checks.append({"point": float(b), "measured": measured, "bound": (1 - delta) * dA - tol,
                           "pass": bool(measured >= (1 - delta) * dA - tol)})
    return BoundaryReport(pts, flux, logs, hh, checks)
