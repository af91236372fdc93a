import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from viscobs.agmon import agmon_distance_1d
from viscobs.geometry import Region, build_surface, effective_potential
from viscobs.kernel import (KernelError, action_distance, dx_sup_inf, flat_circle_kernel, flow_map,
                            hopf_lax_table, kernel_matrix, kernel_simulate, l1_kernel_observability,
                            liyau_check, metzler_expm, mollified_deltas, propagator,
                            reparametrization_check, transport_generator)
from viscobs.spectral import assemble_operator


def line(L=6.0, start=-3.0, n=201):
    return build_surface(dict(case="interval", L=L, s_start=start, grid_n=n, boundary="none"))


def circle(n=128):
    return build_surface(dict(case="circle", L=2 * math.pi, grid_n=n))


# ---------------------------------------------------------------- actions

def test_free_straight_path_action():
    res = action_distance("0", 0.0, 1.0, 1.0, form="rho")
    assert res.value == pytest.approx(0.25, abs=1e-9)


def test_against_the_drift():
    t = 0.8
    res = action_distance("s", 0.0, -t, t, form="dX_minus")
    assert res.value == pytest.approx(t, abs=1e-6)
    rho = action_distance("s", 0.0, -t, t, form="rho")
    assert rho.value == pytest.approx(t / 2, abs=1e-6)


def test_flow_endpoint_has_zero_cost():
    y = flow_map("s^2/2", 0.3, 1.0)
    assert y == pytest.approx(0.3 * math.e, rel=1e-9)
    assert action_distance("s^2/2", 0.3, y, 1.0, "dX_minus").value <= 1e-6


def test_action_rejects_bad_input():
    with pytest.raises(KernelError):
        action_distance("s", 0.0, 1.0, 1.0, form="other")
    with pytest.raises(KernelError):
        action_distance("s", 0.0, 1.0, 0.0)
    with pytest.raises(KernelError):
        action_distance("s", 0.0, 1.0, 1.0, m=4)


F_CIRCLE = "sin(s) + 0.3*cos(2*s)"


@settings(max_examples=50, deadline=None)
@given(x=st.floats(-2.5, 2.5), y=st.floats(-2.5, 2.5), t=st.floats(0.2, 2.0))
def test_forms_differ_by_half_potential_drop(x, y, t):
    f = "s^2/2 + 0.4*sin(2*s)"
    dm = action_distance(f, x, y, t, "dX_minus", m=32).value
    rho = action_distance(f, x, y, t, "rho", m=32).value
    from viscobs.geometry import _as_expr
    fx = _as_expr(f)
    assert dm == pytest.approx(rho + (float(fx(x)) - float(fx(y))) / 2, abs=1e-6)
    assert dm >= 0


@settings(max_examples=20, deadline=None)
@given(x=st.floats(-2, 2), y=st.floats(-2, 2), t=st.floats(0.2, 2.0))
def test_path_reversal(x, y, t):
    f = "s^2/2 + 0.4*sin(2*s)"
    plus = action_distance(f, x, y, t, "dX_plus", m=32).value
    minus = action_distance(f, y, x, t, "dX_minus", m=32).value
    assert plus == pytest.approx(minus, abs=1e-6)


def test_zero_iff_flow_on_twenty_cases():
    rng = random.Random(11)
    f = "s^2/2 + 0.4*sin(2*s)"
    h = 1e-3
    for i in range(20):
        x = rng.uniform(-1.5, 1.5)
        t = rng.uniform(0.2, 1.0)
        yf = flow_map(f, x, t)
        if i % 2 == 0:
            y = yf
        else:
            y = yf + rng.choice([-1, 1]) * rng.uniform(0.1, 0.5)
        val = action_distance(f, x, y, t, "dX_minus").value
        assert (val <= 1e-6) == (abs(y - yf) <= h), (x, y, t, val)


def test_stationary_target_rho_nonincreasing():
    f = "s^2/2"           # grad f vanishes at 0
    vals = [action_distance(f, 1.0, 0.0, t, "rho").value for t in (0.25, 0.5, 1.0, 2.0, 4.0)]
    assert all(b <= a + 1e-9 for a, b in zip(vals, vals[1:]))


def test_revolution_points_with_theta():
    spec = build_surface(dict(case="cylinder", L=2.0, R="1", grid_n=64))
    res = action_distance("0", (0.5, 0.0), (0.5, 1.0), 1.0, "rho", spec=spec)
    assert res.value == pytest.approx(0.25, rel=1e-6)
    with pytest.raises(KernelError):
        action_distance("0", (0.5, 0.0), (0.5, 1.0), 1.0, "rho")


# ---------------------------------------------------------------- Bellman tables

def test_hopf_lax_flat_circle():
    N = 241
    nodes = (np.arange(N) + 0.5) * 2 * math.pi / N
    table = hopf_lax_table("0", nodes, 1.0, m=8, periodic_L=2 * math.pi)
    d = np.abs(nodes[:, None] - nodes[None, :])
    d = np.minimum(d, 2 * math.pi - d)
    # the table resolves pairs whose per-slice displacement is many cells
    far = d > 1.5
    assert np.max(np.abs(table[far] - d[far] ** 2 / 4) / (d[far] ** 2 / 4)) <= 0.02


def test_hopf_lax_symmetric():
    nodes = np.linspace(-2, 2, 121)
    table = hopf_lax_table("s^2/2 + 0.4*sin(2*s)", nodes, 0.7, m=8)
    assert np.max(np.abs(table - table.T)) <= 1e-9
    with pytest.raises(KernelError):
        hopf_lax_table("0", nodes, 1.0, m=4)


def test_inf_over_t_is_agmon_distance():
    from scipy.optimize import minimize_scalar
    f = "s^2/2"
    spec = build_surface(dict(case="interval", L=4.0, s_start=-2.0, grid_n=801))
    ag = agmon_distance_1d(effective_potential(spec, f))
    for y in (0.5, 1.0, -1.5):
        # rho(0, y, t) is nonincreasing in t because 0 is stationary; search log t
        res = minimize_scalar(lambda lt: action_distance(f, 0.0, y, math.exp(lt), "rho", m=64).value,
                              bounds=(math.log(0.5), math.log(40.0)), method="bounded",
                              options=dict(xatol=1e-3))
        dA = float(ag.at(np.array([y]))[0])
        assert res.fun == pytest.approx(dA, rel=0.01)


def test_reparametrization_closed_and_trivial():
    rep = reparametrization_check("s^2/2", 0.0, 1.0, t_grid=np.geomspace(1e-1, 1e2, 13))
    assert rep.passed
    for d in (rep.d1, rep.d2, rep.d3):
        assert d == pytest.approx(0.25, rel=0.02)
    flat = reparametrization_check("1.0", 0.0, 1.0, t_grid=np.geomspace(1e-1, 1e2, 7))
    assert flat.d3 == 0.0 and flat.passed


# ---------------------------------------------------------------- dX sup-inf

def test_sup_inf_flat_closed_form():
    spec = circle(256)
    omega = Region(intervals=((0.0, 1.0),))
    T = 1.0
    res = dx_sup_inf("0", omega, T, spec, n_grid=256, slices=32)
    # farthest point from the arc [0, 1] is at distance pi - 1/2
    exact = (math.pi - 0.5) ** 2 / (4 * T)
    assert res.value == pytest.approx(exact, rel=0.03)


def test_sup_inf_zero_under_gcc_and_positive_without():
    spec = circle(192)
    good = dx_sup_inf("s + 0.3*sin(s)", Region(intervals=((1.0, 1.5),)), 8.0, spec, n_grid=192, slices=32)
    assert good.value <= good.tolerance
    bad = dx_sup_inf("cos(s)", Region(intervals=((1.2, 1.9),)), 2.0, spec, n_grid=192, slices=32)
    assert bad.value > 10 * bad.tolerance


# ---------------------------------------------------------------- viscous kernel

def test_metzler_exponential_matches_dense():
    from scipy.linalg import expm
    rng = np.random.default_rng(3)
    B = rng.uniform(0, 1, (12, 12))
    np.fill_diagonal(B, -rng.uniform(1, 5, 12))
    P, ls = metzler_expm(B)
    assert np.allclose(P * math.exp(ls), expm(B), rtol=1e-12, atol=0)
    assert np.all(P >= 0)


def test_generator_is_metzler_with_zero_row_sums_weighted():
    spec = circle(96)
    op = assemble_operator(spec, F_CIRCLE, eps=0.2)
    B = transport_generator(op, F_CIRCLE)
    off = B - np.diag(np.diag(B))
    assert np.all(off >= 0)
    # mass is conserved when f is constant
    op0 = assemble_operator(spec, "0", eps=0.2)
    B0 = transport_generator(op0, "0")
    assert np.max(np.abs(op0.mass @ B0)) <= 1e-10 * np.max(np.abs(B0))


@pytest.mark.parametrize("t", [0.05, 0.5, 3.0])
def test_mass_conserved_without_drift(t):
    op = assemble_operator(circle(128), "0", eps=0.1)
    K = kernel_simulate(op, "0", 40, t)
    assert float(op.mass @ K.values) == pytest.approx(1.0, abs=1e-10)


def test_kernel_positive_and_h_symmetric():
    op = assemble_operator(circle(96), F_CIRCLE, eps=0.1)
    logK = kernel_matrix(op, F_CIRCLE, 0.6)
    K = np.exp(logK)
    assert np.all(K >= 0)
    from viscobs.geometry import _as_expr
    fv = _as_expr(F_CIRCLE)(op.nodes)
    # exp((f(x) - f(y))/2eps) K(x, y) is the kernel of the self-adjoint picture
    H = np.exp(logK + (fv[:, None] - fv[None, :]) / 0.2)
    assert np.max(np.abs(H - H.T)) <= 1e-9 * np.max(H)
    assert np.max(np.abs(K - K.T)) > 1e-3 * np.max(K)


def _transport_error(n, eps=0.1, t=0.7):
    op = assemble_operator(circle(n), "s", eps=eps)
    logK = kernel_matrix(op, "s", t)
    j = n // 4
    x = op.nodes
    exact = flat_circle_kernel(x + t, x[j], t, eps)
    near = exact > exact.max() - 5
    return float(np.max(np.abs(logK[near, j] - exact[near]))), float(op.mass @ np.exp(logK[:, j])), op


def test_multivalued_f_on_circle_is_pure_transport():
    # f = s on the circle: u_t = eps u'' + u' translates the flat kernel by t
    coarse, _, _ = _transport_error(256)
    fine, mass, op = _transport_error(512)
    assert fine <= 0.03
    assert coarse / fine >= 3.5            # second order in h/eps
    assert mass == pytest.approx(1.0, abs=1e-3)
    with pytest.raises(KernelError, match="single-valued"):
        propagator(op, "s", 0.7, "eigen")


def test_metzler_and_eigen_routes_agree():
    op = assemble_operator(circle(96), F_CIRCLE, eps=0.1)
    P1, l1 = propagator(op, F_CIRCLE, 0.6, "metzler")
    P2, l2 = propagator(op, F_CIRCLE, 0.6, "eigen")
    A = P1 * math.exp(l1)
    B = P2 * math.exp(l2)
    big = A > 1e-5 * A.max()
    assert np.max(np.abs(A[big] - B[big]) / A[big]) <= 1e-3
    with pytest.raises(KernelError):
        propagator(op, F_CIRCLE, 0.6, "taylor")


def test_flat_circle_kernel_is_normalized():
    x = np.linspace(0, 2 * math.pi, 4001)[:-1]
    k = np.exp(flat_circle_kernel(x, 1.0, 0.5, 0.1))
    assert float(np.sum(k) * (x[1] - x[0])) == pytest.approx(1.0, abs=1e-12)


def _flat_minus_eps_log_k(n, eps=0.02, t=1.0):
    op = assemble_operator(circle(n), "0", eps=eps)
    logK = kernel_matrix(op, "0", t)
    i = int(np.argmin(np.abs(op.nodes - (op.nodes[0] + 1.5))))
    d = op.nodes[i] - op.nodes[0]
    return -eps * logK[i, 0], d, -eps * float(flat_circle_kernel(op.nodes[i], op.nodes[0], t, eps))


def test_flat_li_yau():
    got, d, exact = _flat_minus_eps_log_k(256)
    assert got == pytest.approx(d ** 2 / 4, rel=0.1)
    fine, d, exact = _flat_minus_eps_log_k(512)
    assert fine == pytest.approx(exact, rel=0.02)
    assert abs(got - exact) / abs(fine - exact) >= 3.0


def test_liyau_check_on_linear_field():
    spec = circle(128)
    pairs = [(1.0, 2.0, 1.0), (2.0, 1.0, 1.0), (0.5, 0.5 + 0.8, 0.8)]
    out = liyau_check(spec, "s", pairs, [0.08, 0.06, 0.045, 0.035],
                      lambda e: assemble_operator(spec, "s", eps=e), m=32)
    assert all(p.passed for p in out)
    with pytest.raises(KernelError):
        liyau_check(spec, "s", pairs, [0.1, 0.05, 0.01, 0.008], lambda e: None)


def test_mollified_deltas_have_unit_mass():
    op = assemble_operator(circle(128), "0", eps=0.1)
    U = mollified_deltas(op, 2.0, [0, 10, 127])
    assert np.allclose(op.mass @ U, 1.0, rtol=1e-13)
    with pytest.raises(KernelError):
        mollified_deltas(op, 1.0)


def test_l1_observability_whole_domain():
    op = assemble_operator(circle(96), "0", eps=0.1)
    res = l1_kernel_observability(op, "0", Region(whole=True), 1.0, 1.0, sources=[0, 30, 60])
    # total mass is 1 at all times, so I_s / O_T = 1 / T
    assert res.C == pytest.approx(1.0, rel=1e-2)
    assert res.gronwall == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(KernelError):
        l1_kernel_observability(op, "0", Region(whole=True), 1.0, 2.0)
