"""Positive-solution rates on the sphere caps scenario, below and above T_GCC."""
import argparse
import math

import numpy as np

from viscobs.kernel import (dx_sup_inf, l1_kernel_observability, mollified_deltas, positive_cost,
                            propagator)
from viscobs.observability import build_named_scenario, slope_sweep
from viscobs.spectral import assemble_operator


def fine_l1_constant(op, sc, T, s, steps=400):
    """L1 constant with a uniform time trapezoid of `steps` panels."""
    U0 = mollified_deltas(op, 2.0, None)
    P, ls = propagator(op, sc.f, T / steps)
    wom = op.mass * sc.omega.mask(op.spec, op.nodes)
    U = U0.copy()
    logc = 0.0
    obs = [wom @ U]
    for _ in range(steps):
        U = P @ U
        m = U.max()
        U /= m
        logc += ls + math.log(m)
        obs.append((wom @ U) * math.exp(logc))
    O_T = np.trapezoid(np.array(obs), np.linspace(0, T, steps + 1), axis=0)
    I_s = l1_kernel_observability(op, sc.f, sc.omega, T, s).I_s
    return float(np.max(I_s / O_T))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--eps", type=float, nargs="+", default=[0.05, 0.04, 0.032, 0.025, 0.02])
    ap.add_argument("--factors", type=float, nargs="+", default=[0.5, 1.2], help="T as a multiple of T_GCC")
    ap.add_argument("--eta", type=float, default=0.05)
    ap.add_argument("--l1", action="store_true", help="also print the L1 kernel constant")
    args = ap.parse_args()

    sc = build_named_scenario("sphere_caps", {})
    spec = sc.surface()
    T_gcc = sc.predicted["T_GCC"]
    ops = {e: assemble_operator(spec, sc.f, "0", e, 0) for e in args.eps}
    print(f"T_GCC = {T_gcc:.4f}")
    for fac in args.factors:
        T = fac * T_gcc
        d = dx_sup_inf(sc.f, sc.omega, T, spec, n_grid=256)
        logs = [positive_cost(ops[e], sc.f, sc.omega, T, args.eta, None) for e in args.eps]
        fit = slope_sweep(args.eps, logs)
        print(f"T = {fac:g} T_GCC: sup-inf action {d.value:.4f}, fitted rate {fit.fitted_rate:.4f}")
        print("   eps log C0+: " + " ".join(f"{v:.4f}" for v in fit.eps_log_C0))
    if args.l1:
        T, s = 1.2 * T_gcc, 0.5 * T_gcc
        for e in args.eps:
            coarse = l1_kernel_observability(ops[e], sc.f, sc.omega, T, s)
            C = fine_l1_constant(ops[e], sc, T, s)
            print(f"eps={e}: eps log C {coarse.eps_log_C:.4f} (16 samples), "
                  f"log C {math.log(C):.3f} and eps log C {e * math.log(C):.4f} (400 steps)")


if __name__ == "__main__":
    main()
