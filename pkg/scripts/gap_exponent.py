"""Mode gap |mu - V_min| on the round sphere against k, with the fitted power law."""
import argparse
import math

import numpy as np

from viscobs.geometry import build_surface, effective_potential
from viscobs.spectral import assemble_operator, nearest_eigenpair


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ks", type=int, nargs="+", default=[10, 14, 20, 28, 40, 56, 80])
    ap.add_argument("--grid", type=int, default=2001)
    args = ap.parse_args()

    spec = build_surface(dict(case="sphere", L=math.pi, R="sin(s)", grid_n=args.grid))
    pot = effective_potential(spec, "0", 1.0)
    gaps = []
    for k in args.ks:
        mu = nearest_eigenpair(assemble_operator(spec, "0", eps=1 / k, k=k), pot.V_min)[0].mu
        gaps.append(abs(mu - pot.V_min))
        print(f"k={k:3d}  gap {gaps[-1]:.6e}  k*gap {k * gaps[-1]:.6f}  k^(-2/3) {k ** (-2 / 3):.4e}")
    expo = -np.polyfit(np.log(args.ks), np.log(gaps), 1)[0]
    print(f"fitted exponent {expo:.4f}")


if __name__ == "__main__":
    main()
