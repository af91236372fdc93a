import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from viscobs.agmon import agmon_distance_1d
from viscobs.geometry import build_surface, effective_potential
from viscobs.observability import build_named_scenario, scenario_weights
from viscobs.spectral import (Scaled, SpectralError, all_eigenvalues, assemble_operator,
                              band_log_norm, boundary_flux, conjugate, energy_densities,
                              lowest_eigenpairs, nearest_eigenpair, verify_decay_bounds)


def sphere(n=2001):
    return build_surface(dict(case="sphere", L=math.pi, R="sin(s)", grid_n=n))


def band_at(spec, agmon, d_value, half_width=0.01):
    """Band on the northern side of s_min centred where d_A = d_value."""
    s = spec.nodes
    north = s < agmon.pot.s_min
    centre = np.interp(-d_value, -agmon.d_A[north], s[north])
    return (centre - half_width, centre + half_width)


def test_harmonic_ground_state_with_q_cancelling():
    spec = build_surface(dict(case="interval", L=40.0, s_start=-20.0, grid_n=4001))
    # q = 1/2 cancels the Laplacian term, leaving -eps^2 d^2 + s^2/4
    op = assemble_operator(spec, "s^2/2", q="0.5", eps=0.05)
    mu = lowest_eigenpairs(op, 1)[0].mu
    assert mu == pytest.approx(0.025, abs=1e-5)


def test_harmonic_levels_without_qf():
    spec = build_surface(dict(case="interval", L=4.0, s_start=-2.0, grid_n=4001))
    op = assemble_operator(spec, "s^2/2", eps=0.05, include_qf=False)
    mus = [p.mu for p in lowest_eigenpairs(op, 5)]
    assert np.max(np.abs(np.array(mus) - 0.05 * (np.arange(5) + 0.5))) <= 1e-4
    # the dense solver agrees with the tridiagonal one
    from scipy.linalg import eigh
    d, e = op.sym_tridiagonal()
    dense = eigh(np.diag(d) + np.diag(e, 1) + np.diag(e, -1), eigvals_only=True)[:5]
    assert np.allclose(dense, mus, rtol=0, atol=1e-10)


def test_flat_circle_has_constant_ground_state():
    spec = build_surface(dict(case="circle", L=2 * math.pi, grid_n=256))
    pair = lowest_eigenpairs(assemble_operator(spec, "0", eps=0.1), 1)[0]
    assert abs(pair.mu) <= 1e-12
    assert np.ptp(pair.phi) <= 1e-10 * np.max(pair.phi)
    assert np.all(pair.phi > 0)


def test_sphere_mode_gap_below_two_thirds_power():
    spec = sphere()
    pot = effective_potential(spec, "0", 1.0)
    k = 40
    pair = nearest_eigenpair(assemble_operator(spec, "0", eps=1 / k, k=k), pot.V_min)[0]
    assert pot.V_min == pytest.approx(1.0, abs=1e-12)
    assert abs(pair.mu - 1.0) <= k ** (-2 / 3)
    assert pair.residual <= 1e-9


def test_eigenfunctions_orthonormal_in_mass_product():
    spec = sphere(801)
    op = assemble_operator(spec, "0.5*cos(s)", eps=0.1, k=3)
    pairs = lowest_eigenpairs(op, 8)
    Phi = np.array([p.phi[op.keep] for p in pairs])
    G = (Phi * op.mass) @ Phi.T
    assert np.max(np.abs(G - np.eye(8))) <= 1e-10
    for p in pairs:
        assert np.max(p.phi) >= -np.min(p.phi)      # largest entry is positive


def test_eigenvalues_converge_at_second_order():
    diffs = []
    vals = []
    for n in (201, 401, 801):
        spec = build_surface(dict(case="interval", L=4.0, s_start=-2.0, grid_n=n))
        op = assemble_operator(spec, "s^2/2 + 0.2*sin(s)", eps=0.2)
        vals.append(np.array([p.mu for p in lowest_eigenpairs(op, 10)]))
    diffs = [np.max(np.abs(vals[0] - vals[1])), np.max(np.abs(vals[1] - vals[2]))]
    assert diffs[0] / diffs[1] == pytest.approx(4.0, rel=0.15)


def test_nearest_far_above_spectrum_returns_top():
    spec = build_surface(dict(case="interval", L=1.0, grid_n=64, boundary="dirichlet"))
    op = assemble_operator(spec, "s", eps=0.1)
    top = all_eigenvalues(op).max()
    pair = nearest_eigenpair(op, 1e6)[0]
    assert pair.mu == top
    with pytest.raises(SpectralError):
        nearest_eigenpair(op, 0.0, count=op.size + 1)


def test_double_well_parity():
    spec = build_surface(dict(case="interval", L=4.0, s_start=-2.0, grid_n=801))
    # V = (s^2 - 1)^2 / 4 is even; q_f = s is odd so it is dropped
    op = assemble_operator(spec, "s^3/3 - s", eps=0.2, include_qf=False)
    pairs = nearest_eigenpair(op, 0.0, count=2)
    for p in pairs:
        assert np.max(np.abs(np.abs(p.phi) - np.abs(p.phi[::-1]))) <= 1e-9
    parities = sorted(float(np.sign(p.phi[100] * p.phi[-101])) for p in pairs)
    assert parities == [-1.0, 1.0]


def test_solves_do_not_depend_on_order():
    spec = sphere(501)
    first = [nearest_eigenpair(assemble_operator(spec, "0", eps=1 / k, k=k), 1.0)[0].mu for k in (5, 10, 20)]
    second = [nearest_eigenpair(assemble_operator(spec, "0", eps=1 / k, k=k), 1.0)[0].mu for k in (20, 10, 5)]
    assert first == second[::-1]


def test_invalid_operator_inputs():
    spec = sphere(256)
    with pytest.raises(SpectralError):
        assemble_operator(spec, "0", eps=0.0)
    with pytest.raises(SpectralError):
        assemble_operator(spec, "0", eps=0.1, k=-1)
    flat = build_surface(dict(case="interval", L=1.0, grid_n=64))
    with pytest.raises(SpectralError):
        assemble_operator(flat, "s", eps=0.1, c=1.0)


# ---------------------------------------------------------------- conjugation

def test_conjugate_closed_forms():
    s = np.linspace(-1, 1, 11)
    u = np.cos(s)
    assert np.array_equal(conjugate(u, np.zeros_like(s), 0.1), u)
    v = conjugate(np.ones_like(s), s, 0.5)
    assert np.allclose(v, np.exp(s), rtol=1e-15)
    out, tag = conjugate(u, s, 0.5, time_scale="by_eps")
    assert tag == "t/eps"


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), eps=st.floats(0.02, 1.0))
def test_conjugate_round_trip(seed, eps):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=50)
    f = rng.uniform(-5, 5, size=50)
    back = conjugate(conjugate(u, f, eps, "to_v"), f, eps, "to_u")
    assert np.max(np.abs(back - u) / np.abs(u)) <= 1e-14 * max(1.0, 5 / eps)


def test_conjugate_overflow_is_scaled():
    # exponents 500..1000: each one overflows, the spread between them does not
    f = np.array([20.0, 30.0, 40.0])
    v = conjugate(np.ones(3), f, 0.02)
    assert isinstance(v, Scaled)
    assert np.all(np.isfinite(v.values))
    assert v.log_offset + math.log(v.values[2]) == pytest.approx(1000.0, rel=1e-14)
    back = conjugate(v, f, 0.02, "to_u")
    back = back.to_array() if isinstance(back, Scaled) else back
    assert np.allclose(back, 1.0, rtol=1e-13)
    with pytest.raises(ValueError):
        conjugate(np.ones(3), f, 0.1, "sideways")


# ---------------------------------------------------------------- energy and decay

def test_energy_density_difference_is_mass():
    spec = sphere(801)
    pot = effective_potential(spec, "0", 1.0)
    pair = nearest_eigenpair(assemble_operator(spec, "0", eps=1 / 20, k=20), 1.0)[0]
    E = energy_densities(pair, pot)
    # exact up to the rounding of E_k itself
    assert np.all(np.abs(E.E_k - E.E_k_plus - pair.phi ** 2) <= 1e-15 * np.abs(E.E_k) + 1e-300)
    zero = pair.__class__(pair.k, pair.eps, pair.mu, np.zeros_like(pair.phi), pair.log_abs, pair.sign)
    Ez = energy_densities(zero, pot)
    assert np.all(Ez.E_k == 0) and np.all(Ez.E_k_plus == 0)


def test_energy_gronwall_estimate():
    spec = sphere()
    pot = effective_potential(spec, "0", 1.0)
    ag = agmon_distance_1d(pot)
    k, delta = 40, 0.1
    pair = nearest_eigenpair(assemble_operator(spec, "0", eps=1 / k, k=k), 1.0)[0]
    Ep = energy_densities(pair, pot).E_k_plus
    s = spec.nodes
    # away from the poles and from the allowed region, where E_k^+ > 0
    sel = np.nonzero((s > 0.3) & (s < 1.2))[0]
    assert np.all(Ep[sel] > 0)
    logE = np.log(Ep[sel])
    d = ag.d_A[sel]
    lhs = logE[:, None] - logE[None, :]
    rhs = (2 * k) * (np.abs(d[:, None] - d[None, :]) + delta)
    assert np.all(lhs <= rhs)


@pytest.mark.parametrize("k", [40, 80])
def test_sphere_decay_slope(k):
    spec = sphere(4001)
    pot = effective_potential(spec, "0", 1.0)
    ag = agmon_distance_1d(pot)
    pair = nearest_eigenpair(assemble_operator(spec, "0", eps=1 / k, k=k), pot.V_min)[0]
    bands = [band_at(spec, ag, d) for d in (0.5, 1.0, 1.5)]
    rep = verify_decay_bounds(pair, ag, bands, delta=0.1, allowed_radius=0.3)
    assert rep.passed
    assert 0.9 <= rep.slope <= 1.1
    assert rep.allowed_mass >= 0.5
    assert rep.gap == pytest.approx(pair.mu - 1.0)


def test_band_inside_allowed_region_passes():
    spec = sphere()
    pot = effective_potential(spec, "0", 1.0)
    ag = agmon_distance_1d(pot, E=1.2)
    pair = nearest_eigenpair(assemble_operator(spec, "0", eps=1 / 20, k=20), 1.0)[0]
    rep = verify_decay_bounds(pair, ag, [(1.5, 1.6)], delta=0.1)
    assert rep.d_band == [0.0]
    assert rep.upper_ok == [True]


def test_decay_refused_far_from_bottom():
    spec = sphere(801)
    pot = effective_potential(spec, "0", 1.0)
    ag = agmon_distance_1d(pot)
    pair = nearest_eigenpair(assemble_operator(spec, "0", eps=1 / 10, k=10), 3.0)[0]
    rep = verify_decay_bounds(pair, ag, [(0.5, 0.6)])
    assert rep.refused and "gap" in rep.reason
    with pytest.raises(SpectralError, match="pole"):
        ok = nearest_eigenpair(assemble_operator(spec, "0", eps=1 / 10, k=10), 1.0)[0]
        verify_decay_bounds(ok, ag, [(0.01, 0.2)], pole_margin=0.05)


def test_band_norm_of_whole_domain_is_one():
    spec = sphere(801)
    pair = nearest_eigenpair(assemble_operator(spec, "0", eps=1 / 10, k=10), 1.0)[0]
    assert band_log_norm(pair, spec, 0.0, math.pi) == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------- boundary flux

def test_boundary_flux_needs_boundary():
    spec = sphere(256)
    pair = nearest_eigenpair(assemble_operator(spec, "0", eps=0.1, k=10), 1.0)[0]
    with pytest.raises(SpectralError, match="no boundary"):
        boundary_flux(pair, spec)


def test_symmetric_cylinder_fluxes_agree():
    spec = build_surface(dict(case="cylinder", L=1.0, R="1 + 0.2*cos(2*pi*s)", grid_n=801))
    op = assemble_operator(spec, "(s - 0.5)^2", eps=0.05, k=4)
    pair = lowest_eigenpairs(op, 1)[0]
    rep = boundary_flux(pair, spec)
    assert rep.log_flux[0] == pytest.approx(rep.log_flux[1], abs=1e-9)
    assert rep.h_half[0] == pytest.approx(math.sqrt(2 * math.pi) * 17 ** 0.25 * rep.flux[0])


def test_cylinder_boundary_flux_decay():
    sc = build_named_scenario("cylinder_profile", dict(delta=0.2))
    spec, pot, W = scenario_weights(sc)
    k = 40
    op = assemble_operator(spec, sc.f, eps=sc.c / k, k=k)
    pair = nearest_eigenpair(op, pot.V_min)[0]
    rep = boundary_flux(pair, spec, agmon=agmon_distance_1d(pot), delta=0.1, tol=0.05)
    assert len(rep.checks) == 2
    assert all(c["pass"] for c in rep.checks)
