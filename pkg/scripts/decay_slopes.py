"""Decay slope of sphere modes against Agmon distance, for several band widths."""
import argparse
import math

import numpy as np

from viscobs.agmon import agmon_distance_1d
from viscobs.geometry import build_surface, effective_potential
from viscobs.spectral import assemble_operator, nearest_eigenpair, verify_decay_bounds


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ks", type=int, nargs="+", default=[20, 40, 80])
    ap.add_argument("--widths", type=float, nargs="+", default=[0.05, 0.02, 0.01])
    ap.add_argument("--grid", type=int, default=4001)
    args = ap.parse_args()

    spec = build_surface(dict(case="sphere", L=math.pi, R="sin(s)", grid_n=args.grid))
    pot = effective_potential(spec, "0", 1.0)
    ag = agmon_distance_1d(pot)
    north = spec.nodes < pot.s_min
    print(f"{'k':>4} {'half-width':>10} {'slope':>7} {'allowed mass':>12} {'gap':>9}")
    for k in args.ks:
        pair = nearest_eigenpair(assemble_operator(spec, "0", eps=1 / k, k=k), pot.V_min)[0]
        for w in args.widths:
            centres = [np.interp(-d, -ag.d_A[north], spec.nodes[north]) for d in (0.5, 1.0, 1.5)]
            rep = verify_decay_bounds(pair, ag, [(c - w, c + w) for c in centres], delta=0.1,
                                      allowed_radius=0.3)
            print(f"{k:4d} {w:10.3f} {rep.slope:7.3f} {rep.allowed_mass:12.3f} {rep.gap:9.2e}")


if __name__ == "__main__":
    main()
