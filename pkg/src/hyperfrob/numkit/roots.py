"""Simultaneous (Aberth-Ehrlich) polynomial root finding at working precision.

Seeds come from a double-precision companion solve; refinement runs fully in
gmpy2 arithmetic.  Degrees in this package are tiny (denominator lcms of the
restricted connection matrices), so robustness beats asymptotics throughout.
"""

from __future__ import annotations

import numpy as np
import gmpy2

from ..errors import RootFindingError
from .hp import Prec, to_complex

__all__ = ["poly_roots", "distinct_roots"]

_MAX_ITER = 400


def _seed_roots(coeffs):
    """Double-precision seed roots for the ascending coefficient list."""
    arr = np.array([complex(c) for c in coeffs], dtype=complex)
    scale = np.max(np.abs(arr))
    if not np.isfinite(scale) or scale == 0:
        raise RootFindingError("degenerate coefficients")
    arr = arr / scale
    try:
        seeds = np.roots(arr[::-1])
        if np.all(np.isfinite(seeds)):
            return [complex(s) for s in seeds]
    except Exception:
        pass
    # Bini-style fallback: spread on a circle sized by coefficient magnitudes
    deg = len(coeffs) - 1
    radius = 1.0 + max(abs(c) for c in arr[:-1]) / abs(arr[-1])
    return [
        radius * np.exp(2j * np.pi * (k + 0.25) / deg) for k in range(deg)
    ]


def poly_roots(coeffs, prec: Prec):
    """All deg(p) roots of p (ascending HPComplex coefficients) with radii.

    Returns a list of (root, error_radius) pairs, multiplicity-aware: members
    of a root cluster are snapped to the cluster centroid and share a radius
    covering the cluster spread.
    """
    with gmpy2.local_context(prec.gctx()):
        cs = [to_complex(c, prec) for c in coeffs]
        while len(cs) > 1 and cs[-1] == 0:
            cs.pop()
        deg = len(cs) - 1
        if deg < 1:
            raise ValueError("poly_roots needs degree >= 1")
        pnorm = max(abs(c) for c in cs)
        if abs(cs[-1]) <= pnorm * gmpy2.exp10(-prec.digits + 2):
            raise RootFindingError("leading coefficient vanishes at working precision")

        # exact zero roots split off first
        val = 0
        while val < deg and cs[val] == 0:
            val += 1
        zero_roots = [(gmpy2.mpc(0), gmpy2.mpfr(0))] * val
        cs = cs[val:]
        deg = len(cs) - 1
        if deg == 0:
            return zero_roots

        dcs = [cs[i] * i for i in range(1, len(cs))]

        def ev(poly, z):
            acc = gmpy2.mpc(0)
            for c in reversed(poly):
                acc = acc * z + c
            return acc

        if deg == 1:
            roots = [-cs[0] / cs[1]]
        else:
            roots = [to_complex(s, prec) for s in _seed_roots(cs)]
            target = gmpy2.exp10(-prec.digits + 2) * pnorm
            for _it in range(_MAX_ITER):
                worst = gmpy2.mpfr(0)
                new_roots = list(roots)
                for i, z in enumerate(roots):
                    pz = ev(cs, z)
                    dpz = ev(dcs, z)
                    if dpz == 0:
                        dpz = gmpy2.exp10(-prec.digits) * pnorm
                    newton = pz / dpz
                    s = gmpy2.mpc(0)
                    for j, zj in enumerate(roots):
                        if j != i:
                            dz = z - zj
                            if dz != 0:
                                s += 1 / dz
                    denom = 1 - newton * s
                    w = newton if denom == 0 else newton / denom
                    new_roots[i] = z - w
                    worst = max(worst, abs(w) / (1 + abs(z)))
                roots = new_roots
                if worst < gmpy2.exp10(-prec.digits - 2):
                    break
            else:
                raise RootFindingError(
                    "Aberth iteration did not converge",
                    coefficients=[str(c) for c in coeffs],
                )
            bad = [z for z in roots if abs(ev(cs, z)) > gmpy2.exp10(-prec.digits + 2) * pnorm * (1 + abs(z)) ** deg]
            if bad:
                raise RootFindingError(
                    "root refinement stalled above residual target",
                    worst_residual=float(max(abs(ev(cs, z)) for z in bad)),
                )

        out = []
        for z in roots:
            dpz = ev(dcs, z)
            pz = ev(cs, z)
            if abs(dpz) > 0:
                rad = deg * abs(pz) / abs(dpz)
            else:
                rad = gmpy2.exp10(-prec.digits // 2)
            out.append((z, rad))

        out = _cluster(out, prec)
        return zero_roots + out


def _cluster(pairs, prec: Prec):
    """Snap near-coincident roots (within joined radii) to shared centroids."""
    n = len(pairs)
    used = [False] * n
    result = [None] * n
    merge_tol = gmpy2.exp10(-prec.digits // 2)
    for i in range(n):
        if used[i]:
            continue
        group = [i]
        used[i] = True
        for j in range(i + 1, n):
            if used[j]:
                continue
            dist = abs(pairs[i][0] - pairs[j][0])
            if dist <= max(pairs[i][1] + pairs[j][1], merge_tol):
                group.append(j)
                used[j] = True
        centroid = sum((pairs[g][0] for g in group), gmpy2.mpc(0)) / len(group)
        spread = max(
            (abs(pairs[g][0] - centroid) + pairs[g][1] for g in group),
        )
        for g in group:
            result[g] = (centroid, spread)
    return result


def distinct_roots(coeffs, prec: Prec):
    """Root list with exact duplicates (post-clustering) collapsed."""
    seen = []
    for z, rad in poly_roots(coeffs, prec):
        if not any(z == w for w, _ in seen):
            seen.append((z, rad))
    return seen
