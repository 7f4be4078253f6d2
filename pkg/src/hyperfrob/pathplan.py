"""Continuation-path planning: legs in argument space, restriction to a path
parameter, branch-cut layout, and the disk-cover graph in the complex plane.

Path slopes stay exact non-negative rationals (the complex endpoint absorbs
any common phase), disk centers stay exact Gaussian rationals, so the only
floating data in a plan are singularity locations and radii.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import gmpy2

from .errors import (
    ContinuationPathError,
    DegenerateParametersError,
    IrregularSingularityError,
    SingularEndpointError,
)
from .model import FunctionSpec, Options
from .numkit.exact import QGauss, qg, QG_ZERO, QG_ONE
from .numkit.hp import Prec, to_complex
from .numkit.poly import UPoly, URat
from .numkit.roots import poly_roots
from .pfaffian import PfaffianSystem

__all__ = [
    "Leg",
    "PathPlan",
    "LocalSystem",
    "CutLayout",
    "RegionGraph",
    "plan_path",
    "restrict_system",
    "layout_cuts",
    "build_region_graph",
]


@dataclass(frozen=True)
class Leg:
    anchor: tuple  # QGauss per coordinate
    kappa: tuple  # Fraction per coordinate (non-negative unless simple mode)
    t_end: QGauss
    active: tuple  # indices of coordinates that vary
    strategy_tag: str

    def position(self, t: QGauss) -> tuple:
        return tuple(a + QGauss(k) * t for a, k in zip(self.anchor, self.kappa))


@dataclass(frozen=True)
class PathPlan:
    legs: tuple
    strategy: str


def _aligned_single_leg(spec: FunctionSpec, allow_negative: bool):
    """Try the one-leg strategy; None when arguments do not share a phase."""
    args = spec.args
    nz = [i for i, a in enumerate(args) if a]
    if not nz:
        return Leg(
            anchor=tuple(QG_ZERO for _ in args),
            kappa=tuple(Fraction(0) for _ in args),
            t_end=QG_ONE,
            active=(),
            strategy_tag="single_aligned",
        )
    all_real = all(args[i].im == 0 for i in nz)
    if all_real:
        signs = {1 if args[i].re > 0 else -1 for i in nz}
        if len(signs) == 1:
            sign = signs.pop()
            kappa = tuple(abs(a.re) for a in args)
            return Leg(
                anchor=tuple(QG_ZERO for _ in args),
                kappa=kappa,
                t_end=qg(sign),
                active=tuple(nz),
                strategy_tag="single_aligned",
            )
        if allow_negative:
            return Leg(
                anchor=tuple(QG_ZERO for _ in args),
                kappa=tuple(a.re for a in args),
                t_end=QG_ONE,
                active=tuple(nz),
                strategy_tag="direct_experimental",
            )
        return None
    # complex case: ratios to the largest argument must be non-negative rationals
    i0 = max(nz, key=lambda i: (args[i].norm2(), -i))
    u = args[i0]
    kappa = [Fraction(0)] * len(args)
    for i in nz:
        r = args[i] / u
        if r.im != 0 or r.re < 0:
            return None
        kappa[i] = r.re
    return Leg(
        anchor=tuple(QG_ZERO for _ in args),
        kappa=tuple(kappa),
        t_end=u,
        active=tuple(nz),
        strategy_tag="single_aligned",
    )


def _coordinate_legs(spec: FunctionSpec):
    args = spec.args
    n = len(args)
    order = sorted((i for i in range(n) if args[i]), key=lambda i: (args[i].norm2(), i))
    legs = []
    current = [QG_ZERO] * n
    for j in order:
        kappa = [Fraction(0)] * n
        kappa[j] = Fraction(1)
        legs.append(
            Leg(
                anchor=tuple(current),
                kappa=tuple(kappa),
                t_end=args[j],
                active=(j,),
                strategy_tag="coordinate_wise",
            )
        )
        current[j] = args[j]
    if not legs:
        legs.append(
            Leg(
                anchor=tuple(QG_ZERO for _ in args),
                kappa=tuple(Fraction(0) for _ in args),
                t_end=QG_ONE,
                active=(),
                strategy_tag="coordinate_wise",
            )
        )
    return legs


def plan_path(spec: FunctionSpec, options: Options) -> PathPlan:
    """Choose continuation legs; at most n (<= 3) of them, plus one retry."""
    leg = _aligned_single_leg(spec, allow_negative=options.simple_continuation)
    if leg is not None:
        return PathPlan(legs=(leg,), strategy=leg.strategy_tag)
    legs = _coordinate_legs(spec)
    return PathPlan(legs=tuple(legs), strategy="coordinate_wise")


def coordinate_fallback(spec: FunctionSpec) -> PathPlan:
    """Forced coordinate-wise plan (one strategy retry for degenerate legs)."""
    return PathPlan(legs=tuple(_coordinate_legs(spec)), strategy="coordinate_wise")


# ---------------------------------------------------------------------------
# restriction to a leg


@dataclass
class LocalSystem:
    """Single-variable system q(t) J' = A(t) J with exact polynomial data."""

    dim: int
    qpoly: UPoly  # monic common denominator
    apoly: list  # polynomial matrix A = q * M_t
    v0: int  # t-valuation of qpoly (0 ordinary origin, 1 regular singular)
    singularities: list  # (mpc location, mpfr radius, exact QGauss or None)
    origin_kind: str

    @property
    def qhat(self) -> UPoly:
        return self.qpoly.shift_down(self.v0)

    def residue_matrix(self):
        """Exact A0 = residue of M_t at t=0 (zero matrix at an ordinary origin)."""
        if self.v0 == 0:
            return [[QG_ZERO] * self.dim for _ in range(self.dim)]
        q0 = self.qhat.coeffs[0]
        return [[(self.apoly[r][c].coeffs[0] if self.apoly[r][c].coeffs else QG_ZERO) / q0
                 for c in range(self.dim)] for r in range(self.dim)]

    def entry(self, r: int, c: int) -> URat:
        return URat(self.apoly[r][c], self.qpoly)

    def is_singular_point(self, t: QGauss) -> bool:
        return self.qpoly.eval_qg(t) == QG_ZERO


def restrict_system(system: PfaffianSystem, leg: Leg, prec: Prec) -> LocalSystem:
    """Exact restriction M_t = sum_i kappa_i M_i(anchor + kappa t)."""
    if system.param_names:
        raise ValueError("restrict_system expects a numeric (substituted) system")
    m = system.dim
    anchors = {v: leg.anchor[i] for i, v in enumerate(system.var_names)}
    slopes = {v: QGauss(leg.kappa[i]) for i, v in enumerate(system.var_names)}
    entries = [[URat(UPoly([0])) for _ in range(m)] for _ in range(m)]
    try:
        for i in leg.active:
            k = leg.kappa[i]
            if k == 0:
                continue
            Mk = system.matrices[i]
            for r in range(m):
                for c in range(m):
                    e = Mk[r][c]
                    if e.num.is_zero():
                        continue
                    entries[r][c] = entries[r][c] + e.restrict_line(anchors, slopes) * QGauss(k)
    except ZeroDivisionError as exc:
        raise DegenerateParametersError(
            "a connection denominator vanishes identically on this leg",
        ) from exc

    q = UPoly([1])
    for r in range(m):
        for c in range(m):
            q = q.lcm(entries[r][c].den) if not entries[r][c].is_zero() else q
    apoly = [[UPoly([0])] * m for _ in range(m)]
    for r in range(m):
        for c in range(m):
            e = entries[r][c]
            if e.is_zero():
                apoly[r][c] = UPoly([0])
            else:
                cof, rem = q.divmod(e.den)
                if not rem.is_zero():
                    raise DegenerateParametersError("denominator lcm bookkeeping failed")
                apoly[r][c] = e.num * cof
    v0 = q.valuation()
    if v0 > 1:
        # a double pole of q can still give simple entry poles; verify per entry
        worst = max(
            (e.den.valuation() - e.num.valuation())
            for row in entries for e in row if not e.is_zero()
        ) if any(not e.is_zero() for row in entries for e in row) else 0
        if worst > 1:
            raise IrregularSingularityError(
                "restricted system has a higher-order pole at t=0", order=worst
            )
        # reduce q by the excess t power (divides every apoly entry)
        excess = v0 - 1
        q = q.shift_down(excess)
        apoly = [[a.shift_down(min(excess, a.valuation())) if not a.is_zero() else a
                  for a in row] for row in apoly]
        # exact: every entry must have been divisible
        v0 = 1
    sings = []
    if q.degree >= 1:
        roots = poly_roots(q.embed(prec), prec)
        seen = []
        for z, rad in roots:
            if any(z == w for w, _ in seen):
                continue
            seen.append((z, rad))
            exact = None
            from .numkit.hp import rationalize

            cand = rationalize(z, 10**12, prec)
            if cand is not None:
                cq = QGauss(cand[0], cand[1])
                if q.eval_qg(cq) == QG_ZERO:
                    exact = cq
            sings.append((z, rad, exact))
    origin_kind = "regular_singular" if v0 == 1 else "ordinary"
    return LocalSystem(
        dim=m, qpoly=q, apoly=apoly, v0=v0, singularities=sings, origin_kind=origin_kind
    )


# ---------------------------------------------------------------------------
# cuts and region graph


@dataclass(frozen=True)
class CutLayout:
    """Horizontal rays toward +infinity from each finite singular point != 0."""

    sources: tuple  # mpc locations
    delta_side: int

    def classify_endpoint(self, t, prec: Prec):
        """Name of the cut the endpoint sits on, if any (diagnostics)."""
        with gmpy2.local_context(prec.gctx()):
            tol = gmpy2.exp10(-(prec.digits // 2))
            t = to_complex(t, prec)
            for s in self.sources:
                scale = max(gmpy2.mpfr(1), abs(s))
                if abs(t.imag - s.imag) <= tol * scale and t.real >= s.real - tol * scale:
                    return s
        return None


def layout_cuts(singularities, delta_side: int, prec: Prec) -> CutLayout:
    sources = []
    for s in singularities:
        z = s[0] if isinstance(s, tuple) else s
        exact = s[2] if isinstance(s, tuple) and len(s) > 2 else None
        if exact is not None and not exact:
            continue  # never assign a ray to t = 0
        if not isinstance(exact, QGauss) and abs(z) == 0:
            continue
        sources.append(z)
    return CutLayout(sources=tuple(sources), delta_side=delta_side)


def _segment_crosses_cut(a, b, source, delta_side, tol):
    """Does segment a->b cross the ray {source + u, u >= 0}?

    Endpoints lying exactly at the cut height take the delta side.
    """
    da = a.imag - source.imag
    db = b.imag - source.imag
    if abs(da) <= tol:
        da = gmpy2.mpfr(delta_side) * tol
    if abs(db) <= tol:
        db = gmpy2.mpfr(delta_side) * tol
    if (da > 0) == (db > 0):
        return False
    frac = da / (da - db)
    x = a.real + (b.real - a.real) * frac
    return x >= source.real - tol


@dataclass
class RegionGraph:
    nodes: list  # (kind, center QGauss or None, center_hp mpc, radius mpfr)
    path: list  # indices into nodes, origin first, endpoint last
    cuts: CutLayout
    spacing: float
    attempts: int

    def dump_geometry(self, singularities):
        return {
            "singularities": [
                {"re": float(s[0].real), "im": float(s[0].imag)} for s in singularities
            ],
            "cuts": [
                {"re": float(s.real), "im": float(s.imag)} for s in self.cuts.sources
            ],
            "disks": [
                {
                    "kind": kind,
                    "re": float(chp.real),
                    "im": float(chp.imag),
                    "radius": float(r),
                }
                for kind, _c, chp, r in self.nodes
            ],
            "path": list(self.path),
            "grid_spacing": self.spacing,
            "attempts": self.attempts,
        }


def build_region_graph(singularities, cuts: CutLayout, t_end: QGauss,
                       origin_radius, prec: Prec, max_retries: int = 6) -> RegionGraph:
    """Disk cover of a rectangle around {0, t_end} plus a shortest disk path."""
    with gmpy2.local_context(prec.gctx()):
        tol = gmpy2.exp10(-(prec.digits // 2))
        t_hp = t_end.to_hp(prec)
        slocs = [s[0] for s in singularities]

        def dist_to_sing(z):
            return min((abs(z - s) for s in slocs), default=gmpy2.mpfr("inf"))

        # initial spacing from singularity separation
        if len(slocs) >= 2:
            dmin = min(
                abs(slocs[i] - slocs[j])
                for i in range(len(slocs))
                for j in range(i + 1, len(slocs))
            )
            spacing = dmin / 4
        elif slocs:
            spacing = max(abs(t_hp), gmpy2.mpfr(1)) / 8
        else:
            spacing = max(abs(t_hp), gmpy2.mpfr(1)) / 8
        spacing = min(spacing, max(abs(t_hp), gmpy2.mpfr(1)) / 4)

        re_lo = min(gmpy2.mpfr(0), t_hp.real)
        re_hi = max(gmpy2.mpfr(0), t_hp.real)
        im_lo = min(gmpy2.mpfr(0), t_hp.imag)
        im_hi = max(gmpy2.mpfr(0), t_hp.imag)
        diam = max(re_hi - re_lo, im_hi - im_lo, abs(t_hp), gmpy2.mpfr(1))
        margin = gmpy2.mpfr(0)
        for s in slocs:
            dx = max(re_lo - s.real, s.real - re_hi, gmpy2.mpfr(0))
            dy = max(im_lo - s.imag, s.imag - im_hi, gmpy2.mpfr(0))
            margin = max(margin, gmpy2.hypot(dx, dy))
        margin = min(max(margin, diam / 2), 3 * diam)

        for attempt in range(max_retries + 1):
            graph = _try_grid(
                slocs, cuts, t_end, t_hp, origin_radius, prec,
                float(re_lo - margin), float(re_hi + margin),
                float(im_lo - margin), float(im_hi + margin),
                spacing, tol, dist_to_sing,
            )
            if graph is not None:
                graph.attempts = attempt + 1
                return graph
            spacing = spacing / 2
            margin = margin * gmpy2.mpfr("1.5")
        raise ContinuationPathError(
            "no continuation path found after grid refinement",
            t_end=str(t_end),
            singularities=[str(s) for s in slocs],
        )


def _try_grid(slocs, cuts, t_end, t_hp, origin_radius, prec,
              re_lo, re_hi, im_lo, im_hi, spacing, tol, dist_to_sing):
    with gmpy2.local_context(prec.gctx()):
        h = Fraction(float(spacing)).limit_denominator(10**9)
        if h <= 0:
            return None
        centers = []
        discard_tol = gmpy2.exp10(-(prec.digits // 4))
        i_lo = int(gmpy2.floor(gmpy2.mpfr(re_lo) / gmpy2.mpfr(h.numerator) * h.denominator))
        i_hi = int(gmpy2.ceil(gmpy2.mpfr(re_hi) / gmpy2.mpfr(h.numerator) * h.denominator))
        j_lo = int(gmpy2.floor(gmpy2.mpfr(im_lo) / gmpy2.mpfr(h.numerator) * h.denominator))
        j_hi = int(gmpy2.ceil(gmpy2.mpfr(im_hi) / gmpy2.mpfr(h.numerator) * h.denominator))
        if (i_hi - i_lo + 1) * (j_hi - j_lo + 1) > 40000:
            return None  # grid too dense; let the retry loop rescale
        for i in range(i_lo, i_hi + 1):
            for j in range(j_lo, j_hi + 1):
                c = QGauss(i * h, j * h)
                chp = c.to_hp(prec)
                d = dist_to_sing(chp)
                if d <= discard_tol:
                    continue
                on_cut = False
                for s in cuts.sources:
                    scale = max(gmpy2.mpfr(1), abs(s))
                    if abs(chp.imag - s.imag) <= tol * scale and chp.real >= s.real - tol * scale:
                        on_cut = True
                        break
                if on_cut:
                    continue
                radius = gmpy2.mpfr("0.75") * d if gmpy2.is_finite(d) else 4 * max(abs(t_hp), gmpy2.mpfr(1))
                centers.append((c, chp, radius))
        # deterministic ordering
        centers.sort(key=lambda t: (t[0].re, t[0].im))

        nodes = [("origin", QGauss(Fraction(0)), gmpy2.mpc(0), origin_radius)]
        for c, chp, r in centers:
            nodes.append(("disk", c, chp, r))
        nodes.append(("endpoint", t_end, t_hp, gmpy2.mpfr(0)))
        n_nodes = len(nodes)
        endpoint_idx = n_nodes - 1

        def blocked(a, b):
            for s in cuts.sources:
                scale = max(gmpy2.mpfr(1), abs(s))
                if _segment_crosses_cut(a, b, s, cuts.delta_side, tol * scale):
                    return True
            return False

        three_quarters = gmpy2.mpfr(3) / 4
        adj = [[] for _ in range(n_nodes)]
        for idx in range(1, n_nodes):
            kind, c, chp, r = nodes[idx]
            _, _, ohp, orad = nodes[0]
            lim = three_quarters * (orad if kind != "endpoint" else orad)
            if abs(chp - ohp) <= lim and not blocked(ohp, chp):
                adj[0].append(idx)
                adj[idx].append(0)
        for ia in range(1, n_nodes - 1):
            _, _, ca, ra = nodes[ia]
            for ib in range(ia + 1, n_nodes):
                kindb, _, cb, rb = nodes[ib]
                lim = three_quarters * (ra if kindb == "endpoint" else min(ra, rb))
                if abs(ca - cb) <= lim and not blocked(ca, cb):
                    adj[ia].append(ib)
                    adj[ib].append(ia)

        # BFS shortest hop path, deterministic order
        from collections import deque

        parent = {0: None}
        dq = deque([0])
        while dq:
            u = dq.popleft()
            if u == endpoint_idx:
                break
            for v in sorted(adj[u]):
                if v not in parent:
                    parent[v] = u
                    dq.append(v)
        if endpoint_idx not in parent:
            return None
        path = []
        u = endpoint_idx
        while u is not None:
            path.append(u)
            u = parent[u]
        path.reverse()
        return RegionGraph(nodes=nodes, path=path, cuts=cuts, spacing=float(h), attempts=0)
