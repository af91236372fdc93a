"""Batched adaptive Simpson quadrature."""
from __future__ import annotations

import numpy as np


def adaptive_simpson(fn, a, b, tol=1e-10, max_depth=48):
    """Integrate a vectorized fn over many intervals [a_i, b_i] at once.

    Each interval is bisected until the two-panel Simpson estimate agrees with
    the one-panel estimate to 15*tol (tolerance halves per level).  Returns the
    array of integrals.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    out = np.zeros(a.shape)
    if a.size == 0:
        return out
    m = 0.5 * (a + b)
    fa, fm, fb = fn(a), fn(m), fn(b)
    whole = (b - a) / 6 * (fa + 4 * fm + fb)
    owner = np.arange(a.size)
    tols = np.full(a.size, float(tol))
    for depth in range(max_depth):
        lm = 0.5 * (a + m)
        rm = 0.5 * (m + b)
        flm, frm = fn(lm), fn(rm)
        left = (m - a) / 6 * (fa + 4 * flm + fm)
        right = (b - m) / 6 * (fm + 4 * frm + fb)
        err = left + right - whole
        done = np.abs(err) <= 15 * tols
        if depth == max_depth - 1:
            done[:] = True
        np.add.at(out, owner[done], (left + right + err / 15)[done])
        keep = ~done
        if not keep.any():
            break
        # children: [a, m] and [m, b]
        a2 = np.concatenate([a[keep], m[keep]])
        b2 = np.concatenate([m[keep], b[keep]])
        fa2 = np.concatenate([fa[keep], fm[keep]])
        fm2 = np.concatenate([flm[keep], frm[keep]])
        fb2 = np.concatenate([fm[keep], fb[keep]])
        whole = np.concatenate([left[keep], right[keep]])
        owner = np.concatenate([owner[keep], owner[keep]])
        tols = np.concatenate([tols[keep], tols[keep]]) / 2
        a, b, fa, fm, fb = a2, b2, fa2, fm2, fb2
        m = 0.5 * (a + b)
    return out
