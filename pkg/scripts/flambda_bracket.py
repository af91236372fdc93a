"""Bracket of the uniform-observability time for the 1D f_lambda family."""
import argparse
import math

from viscobs.observability import (build_named_scenario, gramian_cost, slope_sweep,
                                   t_unif_bracket)
from viscobs.spectral import assemble_operator, lowest_eigenpairs


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--lams", type=float, nargs="+", default=[2.0, 4.0, 8.0])
    ap.add_argument("--eta", type=float, default=0.25)
    ap.add_argument("--eps", type=float, nargs="+", default=[0.1, 0.07, 0.05, 0.035, 0.025])
    ap.add_argument("--Ts", type=float, nargs="+", default=[0.25, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0])
    ap.add_argument("--modes", type=int, default=24)
    args = ap.parse_args()

    for lam in args.lams:
        sc = build_named_scenario("flambda", dict(lam=lam, eta=args.eta))
        spec = sc.surface()
        ops = [assemble_operator(spec, sc.f, eps=e) for e in args.eps]
        pairs = [lowest_eigenpairs(op, args.modes) for op in ops]
        rates = []
        print(f"lambda={lam:g}  lower bound lambda*eta^2 = {sc.predicted['T_unif_lower']:.4f}")
        for T in args.Ts:
            logs = [gramian_cost(op, sc.f, sc.omega, T, args.modes, adaptive=True, pairs=p).log_C0
                    for op, p in zip(ops, pairs)]
            fit = slope_sweep(args.eps, logs)
            rate = fit.fitted_rate if not fit.partial else -math.inf
            rates.append(rate)
            print(f"  T={T:5.2f}  rate {rate:8.4f}  eps log C0 " + " ".join(f"{v:7.3f}" for v in fit.eps_log_C0))
        lo, hi = t_unif_bracket(args.Ts, rates)
        print(f"  T_lo={lo}  T_hi={hi}")


if __name__ == "__main__":
    main()
