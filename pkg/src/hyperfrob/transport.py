"""Transport of the basis vector J along the planned legs.

One leg = match integration constants near the expansion origin (boundary
data from the series oracle), then walk the disk chain of the region graph
re-seeding plain Taylor data at every hop.  Between coordinate legs a Taylor
jet in the still-inactive variables rides along as an inhomogeneous
block-triangular enlargement of the same recurrences, so the next leg can
match its constants at a small offset from its own singular origin.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import gmpy2

from .errors import (
    ContinuationPathError,
    IllConditionedError,
    PrecisionShortfallError,
    SingularEndpointError,
)
from .frobenius import (
    FrobeniusColumn,
    FrobeniusSolution,
    LocalData,
    SolvedClass,
    choose_truncation,
    exponents,
    frobenius_series,
    local_data,
    lu_factor,
    lu_solve,
    taylor_series_vector,
)
from .model import FunctionSpec, sum_series, sum_series_jets
from .numkit.exact import QGauss, qg, QG_ZERO
from .numkit.hp import Prec, to_complex, cpow
from .numkit.poly import UPoly, URat, MPoly
from .pathplan import Leg, LocalSystem, build_region_graph, layout_cuts, restrict_system

__all__ = [
    "StateVector",
    "initial_constants",
    "propagate_chain",
    "leg_transition",
    "transport_leg",
]

_ORACLE_TARGET_RATIO = Fraction(2, 5)
_DEFAULT_M_JET = 6


@dataclass
class StateVector:
    J: list
    at_point: object
    accumulated_error: object  # mpfr

    def bump(self, extra):
        self.accumulated_error = self.accumulated_error + extra
        return self


@dataclass
class Diagnostics:
    legs: int = 0
    hops: int = 0
    frobenius_terms: int = 0
    matchings: list = field(default_factory=list)

    def as_dict(self):
        return {
            "legs": self.legs,
            "hops": self.hops,
            "frobenius_terms": self.frobenius_terms,
        }


def _t0_for_leg(leg: Leg, family: str, origin_radius, prec: Prec) -> QGauss:
    """Exact small matching point on the ray toward the leg target."""
    with gmpy2.local_context(prec.gctx()):
        te = leg.t_end.to_hp(prec)
        scale = abs(te)
        if family == "FA":
            load = sum((Fraction(k) for k in leg.kappa), Fraction(0))
        else:
            load = max((Fraction(k) for k in leg.kappa), default=Fraction(0))
        rho = Fraction(1)
        bound1 = gmpy2.mpfr("0.25") * origin_radius / scale if gmpy2.is_finite(origin_radius) else None
        if load:
            bound2 = _ORACLE_TARGET_RATIO / (load * Fraction(float(scale)).limit_denominator(10**12))
        else:
            bound2 = Fraction(1)
        while bound1 is not None and rho > Fraction(float(bound1)).limit_denominator(10**12):
            rho /= 2
        while rho > bound2:
            rho /= 2
        return leg.t_end * QGauss(rho)


def _column_scale(sol: FrobeniusSolution, t0, prec: Prec, side: int):
    """Per-column magnitudes t0^lambda used to precondition the matching."""
    scales = []
    with gmpy2.local_context(prec.gctx()):
        for lam in sol.column_exponents():
            if lam == 0:
                scales.append(gmpy2.mpc(1))
            else:
                scales.append(cpow(t0, lam, prec, side))
    return scales


def initial_constants(spec: FunctionSpec, params: dict, leg: Leg, sol: FrobeniusSolution,
                      origin_radius, digits: int, prec: Prec, side: int):
    """Match U(t0) C = J_oracle(t0); returns (C, t0, matching error)."""
    t0 = _t0_for_leg(leg, spec.family, origin_radius, prec)
    last_exc = None
    for _attempt in range(3):
        try:
            args_scaled = [QGauss(k) * t0 for k in leg.kappa]
            J0, oracle_tail = sum_series(
                spec.family, spec.n, params, args_scaled, digits, prec
            )
            cols, tail = sol.evaluate_columns(t0, prec, side)
            scales = _column_scale(sol, t0, prec, side)
            with gmpy2.local_context(prec.gctx()):
                m = sol.dim
                A = [[cols[j][r] / scales[j] for j in range(m)] for r in range(m)]
                chat = _linsolve_mpc(A, J0, prec)
                C = [chat[j] / scales[j] for j in range(m)]
                # residual check in the scaled frame
                resid = gmpy2.mpfr(0)
                for r in range(m):
                    s = gmpy2.mpc(0)
                    for j in range(m):
                        s += A[r][j] * chat[j]
                    resid = max(resid, abs(s - J0[r]))
                err = oracle_tail + tail * max(
                    (abs(c) for c in C), default=gmpy2.mpfr(0)
                ) + resid
            return C, t0, err
        except IllConditionedError as exc:
            last_exc = exc
            t0 = t0 * QGauss(Fraction(1, 4))
    raise IllConditionedError(
        "constant matching stayed ill-conditioned after shrinking t0",
        t0=str(t0),
    ) from last_exc


def _linsolve_mpc(A, b, prec: Prec):
    m = len(A)
    with gmpy2.local_context(prec.gctx()):
        anorm = max((abs(A[i][j]) for i in range(m) for j in range(m)), default=gmpy2.mpfr(0))
        tiny = gmpy2.exp10(-(prec.digits // 2)) * (anorm if anorm > 0 else gmpy2.mpfr(1))
        M = [row[:] for row in A]
        x = list(b)
        for col in range(m):
            piv = max(range(col, m), key=lambda r: abs(M[r][col]))
            if abs(M[piv][col]) <= tiny:
                raise IllConditionedError("matching matrix pivot underflow")
            if piv != col:
                M[col], M[piv] = M[piv], M[col]
                x[col], x[piv] = x[piv], x[col]
            inv = 1 / M[col][col]
            for r in range(col + 1, m):
                f = M[r][col] * inv
                if f != 0:
                    for c in range(col + 1, m):
                        M[r][c] -= f * M[col][c]
                    x[r] -= f * x[col]
        for col in range(m - 1, -1, -1):
            s = x[col]
            for c in range(col + 1, m):
                s -= M[col][c] * x[c]
            x[col] = s / M[col][col]
        return x


def combine_columns(cols, C, prec: Prec):
    with gmpy2.local_context(prec.gctx()):
        m = len(cols[0])
        out = [gmpy2.mpc(0)] * m
        for j, col in enumerate(cols):
            cj = C[j]
            if cj != 0:
                for r in range(m):
                    out[r] += cj * col[r]
        return out


def origin_disk_radius(lsys: LocalSystem, prec: Prec):
    with gmpy2.local_context(prec.gctx()):
        dists = [abs(z) for z, _r, exact in lsys.singularities
                 if not (exact is not None and not exact)]
        dists = [d for d in dists if d > 0]
        if not dists:
            return gmpy2.mpfr("inf")
        return gmpy2.mpfr("0.75") * min(dists)


def propagate_chain(lsys: LocalSystem, sol: FrobeniusSolution, C, graph, t_end: QGauss,
                    digits: int, prec: Prec, side: int, diag: Diagnostics,
                    n_override=None):
    """Carry J from the origin expansion along the disk path to t_end."""
    with gmpy2.local_context(prec.gctx()):
        err = gmpy2.mpfr(0)
        path = graph.path
        nodes = graph.nodes
        if len(path) == 2:
            cols, tail = sol.evaluate_columns(t_end, prec, side)
            J = combine_columns(cols, C, prec)
            err += tail * _cnorm(C)
            return StateVector(J=J, at_point=t_end, accumulated_error=err)
        # first hop: origin expansion evaluated at the first disk center
        first = nodes[path[1]]
        J = None
        cur_center = None
        for step in range(1, len(path)):
            kind, center, chp, radius = nodes[path[step]]
            if step == 1:
                cols, tail = sol.evaluate_columns(center, prec, side)
                J = combine_columns(cols, C, prec)
                err += tail * _cnorm(C)
                cur_center = center
                continue
            # Taylor hop from cur_center to this node's center (or endpoint)
            target = center
            data = local_data(lsys, cur_center)
            offset = (target - cur_center).to_hp(prec)
            cur_radius = _radius_at(lsys, cur_center, prec)
            q_ratio = float(abs(offset) / cur_radius) if gmpy2.is_finite(cur_radius) else 0.1
            N = n_override or choose_truncation(q_ratio, prec.digits)
            diag.frobenius_terms = max(diag.frobenius_terms, N)
            series = taylor_series_vector(data, J, N, prec)
            J, tail = _eval_series(series, offset, prec)
            err += tail
            diag.hops += 1
            cur_center = target
        return StateVector(J=J, at_point=t_end, accumulated_error=err)


def _cnorm(C):
    return max((abs(c) for c in C), default=gmpy2.mpfr(0))


def _radius_at(lsys: LocalSystem, center: QGauss, prec: Prec):
    with gmpy2.local_context(prec.gctx()):
        chp = center.to_hp(prec)
        dists = [abs(chp - z) for z, _r, _e in lsys.singularities]
        dists = [d for d in dists if d > 0]
        if not dists:
            return gmpy2.mpfr("inf")
        return gmpy2.mpfr("0.75") * min(dists)


def _eval_series(series, offset, prec: Prec):
    from .frobenius import _horner_vec

    with gmpy2.local_context(prec.gctx()):
        return _horner_vec(series, to_complex(offset, prec), len(series[0]))




# ---------------------------------------------------------------------------
# jet machinery for coordinate-leg transitions


def jet_blocks(n_jet_vars: int, m_jet: int):
    """Multi-indices with total order <= m_jet, sorted by (order, lex)."""
    out = []

    def rec(prefix, remaining, budget):
        if remaining == 0:
            out.append(tuple(prefix))
            return
        for v in range(budget + 1):
            rec(prefix + [v], remaining - 1, budget - v)

    rec([], n_jet_vars, m_jet)
    out.sort(key=lambda b: (sum(b), b))
    return out


@dataclass
class JetSystem:
    """Jet-expanded restriction of the connection along one leg.

    W(t) clears every jet coefficient matrix, giving the block-triangular
    system W J_b' = G_0 J_b + sum_{0<r<=b} G_r J_{b-r}.
    """

    dim: int
    m_jet: int
    jet_vars: tuple  # coordinate indices of the jet variables, leg order
    W: UPoly
    G: dict  # jet multi-index r -> polynomial matrix (lists of UPoly)
    v0: int

    @property
    def what(self) -> UPoly:
        return self.W.shift_down(self.v0)

    def zero_block(self):
        return tuple([0] * len(self.jet_vars))


def build_jet_system(system, leg: Leg, jet_vars, m_jet: int) -> JetSystem:
    """Restrict sum_i kappa_i M_i to the leg, keeping jet variables symbolic."""
    m = system.dim
    names = system.var_names
    jet_names = [names[i] for i in jet_vars]
    target = ("t",) + tuple(jet_names)
    zero_entry = URat(UPoly([0]))
    blocks = jet_blocks(len(jet_vars), m_jet)
    jets = {b: [[zero_entry] * m for _ in range(m)] for b in blocks}

    for i in leg.active:
        kap = leg.kappa[i]
        if kap == 0:
            continue
        Mk = system.matrices[i]
        for r in range(m):
            for c in range(m):
                e = Mk[r][c]
                if e.num.is_zero():
                    continue
                coeffs = _entry_jet_coeffs(e, names, leg, jet_vars, target, m_jet)
                for bidx, ur in coeffs.items():
                    if not ur.is_zero():
                        row = jets[bidx][r]
                        row[c] = row[c] + ur * QGauss(kap)

    W = UPoly([1])
    for b in blocks:
        for r in range(m):
            for c in range(m):
                ur = jets[b][r][c]
                if not ur.is_zero():
                    W = W.lcm(ur.den)
    v0 = min(W.valuation(), 1)
    G = {}
    for b in blocks:
        mat = [[UPoly([0])] * m for _ in range(m)]
        for r in range(m):
            for c in range(m):
                ur = jets[b][r][c]
                if ur.is_zero():
                    continue
                cof, rem = W.divmod(ur.den)
                if not rem.is_zero():
                    raise ContinuationPathError("jet clearing polynomial bookkeeping failed")
                mat[r][c] = ur.num * cof
        G[b] = mat
    return JetSystem(dim=m, m_jet=m_jet, jet_vars=tuple(jet_vars), W=W, G=G, v0=v0)


def _entry_jet_coeffs(entry, names, leg: Leg, jet_vars, target, m_jet):
    """Jet expansion of one MRat entry along the leg; URat-in-t coefficients."""
    mapping = {}
    tvar = MPoly.var(target, "t")
    for idx, v in enumerate(names):
        if idx in jet_vars:
            mapping[v] = MPoly.var(target, v)
        else:
            a = leg.anchor[idx]
            k = leg.kappa[idx]
            poly = MPoly.const(target, a)
            if k:
                poly = poly + tvar * QGauss(k)
            mapping[v] = poly
    num = entry.num.map_vars(target, mapping)
    den = MPoly.const(target, 1)
    for f, e in entry.den:
        ff = f.map_vars(target, mapping)
        if ff.is_zero():
            raise ZeroDivisionError("denominator factor vanished on the jet leg")
        den = den * (ff ** e)
    jet_len = len(target) - 1
    num_by = _collect_jets(num, jet_len)
    den_by = _collect_jets(den, jet_len)
    zero = tuple([0] * jet_len)
    d0 = den_by.get(zero)
    if d0 is None or d0.is_zero():
        raise ZeroDivisionError("jet denominator vanishes at the expansion locus")
    out = {}
    for b in jet_blocks(jet_len, m_jet):
        acc = URat(num_by.get(b, UPoly([0])))
        for s, ds in den_by.items():
            if s == zero or any(s[i] > b[i] for i in range(jet_len)):
                continue
            prev = out.get(tuple(b[i] - s[i] for i in range(jet_len)))
            if prev is not None and not prev.is_zero():
                acc = acc - URat(ds) * prev
        out[b] = acc / URat(d0)
    return out


def _collect_jets(poly: MPoly, jet_len: int):
    """Split an MPoly over ('t', y...) into {y multi-index: UPoly in t}."""
    buckets = {}
    for e, cval in poly.terms.items():
        b = tuple(e[1:])
        buckets.setdefault(b, {})[e[0]] = cval
    out = {}
    for b, mono in buckets.items():
        coeffs = [QG_ZERO] * (1 + max(mono))
        for p, cval in mono.items():
            coeffs[p] = cval
        out[b] = UPoly(coeffs)
    return out


def jet_local_data(jsys: JetSystem, center) -> LocalData:
    """LocalData of the jet-cleared base system at a center (or the origin)."""
    m = jsys.dim
    z = jsys.zero_block()
    c = qg(center) if center is not None else QGauss(Fraction(0))
    if not c:
        if jsys.v0 == 1:
            what = jsys.what
            q0 = what.coeffs[0]
            A0 = [[(jsys.G[z][r][cc].coeffs[0] if jsys.G[z][r][cc].coeffs else QG_ZERO) / q0
                   for cc in range(m)] for r in range(m)]
            return LocalData(dim=m, center=c, qpoly=what, apoly=jsys.G[z],
                             kind="regular_singular", A0=A0)
        return LocalData(dim=m, center=c, qpoly=jsys.W, apoly=jsys.G[z],
                         kind="ordinary", A0=[[QG_ZERO] * m for _ in range(m)])
    qc = jsys.W.shifted(c)
    ac = [[(a.shifted(c) if not a.is_zero() else a) for a in row] for row in jsys.G[z]]
    return LocalData(dim=m, center=c, qpoly=qc, apoly=ac, kind="ordinary",
                     A0=[[QG_ZERO] * m for _ in range(m)])


def _embed_layers(mat, prec: Prec):
    """Polynomial matrix -> per-power sparse (row, col, mpc) layers."""
    layers = []
    j = 0
    while True:
        layer = []
        any_left = False
        for r, row in enumerate(mat):
            for cc, e in enumerate(row):
                if j < len(e.coeffs):
                    any_left = True
                    v = e.coeffs[j]
                    if v:
                        layer.append((r, cc, v.to_hp(prec)))
        if not any_left:
            break
        layers.append(layer)
        j += 1
    return layers


def _shifted_sources(jsys: JetSystem, center, prec: Prec):
    """Embedded coefficient layers of every nonzero-order G_r at a center."""
    c = qg(center) if center is not None else QGauss(Fraction(0))
    out = {}
    for b, mat in jsys.G.items():
        if sum(b) == 0:
            continue
        if c:
            mat = [[(a.shifted(c) if not a.is_zero() else a) for a in row] for row in mat]
        layers = _embed_layers(mat, prec)
        if any(layer for layer in layers):
            out[b] = layers
    return out


def _conv_source(layers, series, n, m):
    """sum_j G_j series[n-j] for one (G_r, lower-block) pair."""
    out = None
    top = min(n, len(layers) - 1)
    for j in range(0, top + 1):
        if n - j >= len(series):
            continue
        vec = series[n - j]
        if vec is None:
            continue
        for (r, c, v) in layers[j]:
            x = vec[c]
            if x != 0:
                if out is None:
                    out = [gmpy2.mpc(0)] * m
                out[r] += v * x
    return out


# ---------------------------------------------------------------------------
# committed local representations (origin data per jet block)


def _commit_homogeneous(sol: FrobeniusSolution, C):
    """Per-class coefficient arrays of sum_j C_j u_j (the matched base block)."""
    out = []
    j = 0
    for cls in sol.classes:
        arrays = {}
        for col in cls.columns:
            cj = C[j]
            j += 1
            if cj == 0:
                continue
            for k in range(col.kmax + 1):
                dst = arrays.get(k)
                if dst is None:
                    dst = [None] * (sol.N + 1)
                    arrays[k] = dst
                series = col.coeffs[k]
                for n in range(col.birth, sol.N + 1):
                    vec = series[n]
                    if vec is None:
                        continue
                    if dst[n] is None:
                        dst[n] = [cj * v for v in vec]
                    else:
                        for r in range(sol.dim):
                            dst[n][r] += cj * vec[r]
        out.append(arrays)
    return out


def _commit_add_particular(committed, part: FrobeniusSolution):
    for ci, cls in enumerate(part.classes):
        arrays = committed[ci]
        col = cls.columns[0]
        for k in range(col.kmax + 1):
            series = col.coeffs[k]
            dst = arrays.get(k)
            if dst is None:
                dst = [None] * (part.N + 1)
                arrays[k] = dst
            for n in range(part.N + 1):
                vec = series[n]
                if vec is None:
                    continue
                if dst[n] is None:
                    dst[n] = vec[:]
                else:
                    for r in range(part.dim):
                        dst[n][r] += vec[r]
    return committed


def _committed_as_solution(committed, template: FrobeniusSolution):
    """Wrap committed arrays as a one-column-per-class FrobeniusSolution."""
    classes = []
    for ci, cls in enumerate(template.classes):
        arrays = committed[ci]
        if arrays:
            kmax = max(arrays)
            coeffs = []
            for k in range(kmax + 1):
                series = arrays.get(k)
                if series is None:
                    series = [None] * (template.N + 1)
                coeffs.append(series)
            col = FrobeniusColumn(birth=0, coeffs=coeffs, kmax=kmax)
            columns = [col]
        else:
            columns = []
        classes.append(SolvedClass(base=cls.base, K=cls.K, columns=columns))
    return FrobeniusSolution(
        dim=template.dim, center=template.center, kind=template.kind,
        N=template.N, classes=classes,
    )


def _sources_from_committed(committed_by_block, glayers_origin, target_block, m):
    """sources(ci, k, n) callable for the particular solve of target_block."""

    def sources(ci, k, n):
        out = None
        for rblk, layers in glayers_origin.items():
            w = tuple(target_block[i] - rblk[i] for i in range(len(target_block)))
            if any(x < 0 for x in w):
                continue
            committed = committed_by_block.get(w)
            if committed is None:
                continue
            arrays = committed[ci].get(k)
            if arrays is None:
                continue
            top = min(n, len(layers) - 1)
            for j in range(0, top + 1):
                vec = arrays[n - j] if n - j < len(arrays) else None
                if vec is None:
                    continue
                for (r, c, v) in layers[j]:
                    x = vec[c]
                    if x != 0:
                        if out is None:
                            out = [gmpy2.mpc(0)] * m
                        out[r] += v * x
        return out

    return sources


# ---------------------------------------------------------------------------
# the per-leg driver


@dataclass
class LegResult:
    state: StateVector
    jets_out: dict | None  # {'jets': {b: J vector at t_end}, 'm_jet': int}
    lsys: LocalSystem
    graph: object


def transport_leg(spec: FunctionSpec, params: dict, system_num, leg: Leg,
                  pending_vars, carry, digits: int, prec: Prec, side: int,
                  diag: Diagnostics, n_override=None, m_jet: int = _DEFAULT_M_JET):
    """Transport J (plus jets for pending legs) along one leg to its endpoint.

    pending_vars: coordinate indices of later legs, in leg order (so the
    leading jet index always belongs to the next leg).  carry: None on the
    first leg, else the previous leg's jets_out.
    """
    lsys = restrict_system(system_num, leg, prec)
    if lsys.is_singular_point(leg.t_end):
        raise SingularEndpointError(
            "continuation endpoint is a singular point of the restricted system",
            t_end=str(leg.t_end),
        )
    cuts = layout_cuts(lsys.singularities, side, prec)
    orad = origin_disk_radius(lsys, prec)
    graph = build_region_graph(lsys.singularities, cuts, leg.t_end, orad, prec)
    diag.legs += 1

    if not pending_vars:
        state = _leg_base_only(spec, params, leg, lsys, orad, graph, carry,
                               digits, prec, side, diag, n_override)
        return LegResult(state=state, jets_out=None, lsys=lsys, graph=graph)
    return _leg_with_jets(spec, params, system_num, leg, tuple(pending_vars), carry,
                          lsys, orad, graph, digits, prec, side, diag,
                          n_override, m_jet)


def _origin_solution(lsys: LocalSystem, q_ratio: float, digits: int, prec: Prec,
                     n_override=None, data=None):
    if data is None:
        data = local_data(lsys, None)
    if data.kind == "ordinary":
        raise ContinuationPathError("leg origin unexpectedly ordinary")
    struct = exponents(data.A0)
    N = n_override or choose_truncation(q_ratio, prec.digits)
    sol = frobenius_series(data, struct, N, prec)
    return data, struct, sol, N


def _first_eval_ratio(graph, orad, prec: Prec):
    with gmpy2.local_context(prec.gctx()):
        first = graph.nodes[graph.path[1]]
        dist = abs(first[2])
        if not gmpy2.is_finite(orad):
            return 0.1
        return min(float(dist / orad), 0.75)


def _leg_base_only(spec, params, leg, lsys, orad, graph, carry, digits, prec,
                   side, diag, n_override):
    q_ratio = _first_eval_ratio(graph, orad, prec)
    data, struct, sol, N = _origin_solution(lsys, q_ratio, digits, prec, n_override)
    diag.frobenius_terms = max(diag.frobenius_terms, N)
    if carry is None:
        C, t0, err0 = initial_constants(spec, params, leg, sol, orad, digits, prec, side)
    else:
        t0, cols_t0, scales, base_rhs, jet_err = _carry_match_data(
            carry, sol, orad, prec, side
        )
        C, resid, tail = _match_columns(cols_t0, scales, base_rhs, prec)
        err0 = jet_err + resid + tail
    state = propagate_chain(lsys, sol, C, graph, leg.t_end, digits, prec, side,
                            diag, n_override)
    state.accumulated_error += err0
    return state


def _choose_t0_prime(carry, orad, prec: Prec) -> QGauss:
    m_jet = carry["m_jet"]
    e_digits = max(1, (prec.digits + 5 + m_jet) // (m_jet + 1))
    t0 = QGauss(Fraction(1, 10 ** e_digits))
    with gmpy2.local_context(prec.gctx()):
        if gmpy2.is_finite(orad):
            while t0.to_hp(prec).real > gmpy2.mpfr("0.25") * orad:
                t0 = t0 * QGauss(Fraction(1, 10))
    return t0


def _carry_match_data(carry, sol: FrobeniusSolution, orad, prec: Prec, side: int):
    """t0', evaluated/scaled origin columns, base rhs at t0', and jet error."""
    jets = carry["jets"]
    m_jet = carry["m_jet"]
    t0 = _choose_t0_prime(carry, orad, prec)
    with gmpy2.local_context(prec.gctx()):
        t0h = t0.to_hp(prec)
        m = sol.dim
        base_rhs = [gmpy2.mpc(0)] * m
        mags = []
        for b, vec in jets.items():
            mags.append(_cnorm(vec))
            if len(b) > 1 and any(x for x in b[1:]):
                continue
            w = t0h ** b[0]
            for r in range(m):
                base_rhs[r] += vec[r] * w
        top = max(mags) if mags else gmpy2.mpfr(1)
        jet_err = top * (4 * abs(t0h)) ** (m_jet + 1)
        cols, tail = sol.evaluate_columns(t0, prec, side)
        scales = _column_scale(sol, t0, prec, side)
        return t0, cols, scales, base_rhs, jet_err + tail


def _match_columns(cols, scales, rhs, prec: Prec):
    """Solve U C = rhs with column preconditioning; returns (C, residual, 0)."""
    m = len(rhs)
    with gmpy2.local_context(prec.gctx()):
        A = [[cols[j][r] / scales[j] for j in range(m)] for r in range(m)]
        chat = _linsolve_mpc(A, rhs, prec)
        C = [chat[j] / scales[j] for j in range(m)]
        resid = gmpy2.mpfr(0)
        for r in range(m):
            s = gmpy2.mpc(0)
            for j in range(m):
                s += A[r][j] * chat[j]
            resid = max(resid, abs(s - rhs[r]))
        return C, resid, gmpy2.mpfr(0)


def _leg_with_jets(spec, params, system_num, leg, pending_vars, carry, lsys,
                   orad, graph, digits, prec, side, diag, n_override, m_jet):
    """Base transport plus jets in the pending variables."""
    jsys = build_jet_system(system_num, leg, pending_vars, m_jet)
    blocks = jet_blocks(len(pending_vars), m_jet)
    zero_b = blocks[0]
    nodes = graph.nodes
    path = graph.path
    with gmpy2.local_context(prec.gctx()):
        err = gmpy2.mpfr(0)
        q_ratio = _first_eval_ratio(graph, orad, prec)
        origin_dat = jet_local_data(jsys, None)
        _, struct, sol, N = _origin_solution(lsys, q_ratio, digits, prec,
                                             n_override, data=origin_dat)
        diag.frobenius_terms = max(diag.frobenius_terms, N)

        if carry is None:
            # first leg: oracle provides both boundary data and jet starts
            C, t0, err0 = initial_constants(spec, params, leg, sol, orad,
                                            digits, prec, side)
            err += err0
            start_idx, start_center = _jet_start_node(spec, leg, graph, prec)
            if start_idx is not None:
                x_active = [QGauss(leg.kappa[i]) * start_center for i in leg.active]
                waypoints = [nodes[i][1] for i in path[path.index(start_idx):]]
            else:
                start_center = t0
                x_active = [QGauss(leg.kappa[i]) * t0 for i in leg.active]
                waypoints = _geometric_waypoints(t0, graph, lsys, prec)
            jets_oracle = sum_series_jets(
                spec.family, spec.n, params, list(leg.active), x_active,
                m_jet, digits, prec,
            )
            block_vals = {}
            for b in blocks:
                vec, tl = jets_oracle[b]
                block_vals[b] = vec
                err += tl
            cols, tail = sol.evaluate_columns(start_center, prec, side)
            Jbase = combine_columns(cols, C, prec)
            err += tail * _cnorm(C)
            dev = max(abs(Jbase[r] - block_vals[zero_b][r]) for r in range(sol.dim))
            err += dev
            block_vals[zero_b] = Jbase
        else:
            # middle leg: base + jets matched at t0' from the carried jets,
            # higher blocks as inhomogeneous particular solutions
            t0, cols_t0, scales, base_rhs, jet_err = _carry_match_data(
                carry, sol, orad, prec, side
            )
            err += jet_err
            C0, resid, _ = _match_columns(cols_t0, scales, base_rhs, prec)
            err += resid
            committed = {zero_b: _commit_homogeneous(sol, C0)}
            glayers_origin = {
                b: _embed_layers(mat, prec)
                for b, mat in jsys.G.items()
                if sum(b) > 0
            }
            t0h = t0.to_hp(prec)
            carried = carry["jets"]
            cm = carry["m_jet"]
            for b in blocks:
                if b == zero_b:
                    continue
                srcs = _sources_from_committed(committed, glayers_origin, b, jsys.dim)
                part = frobenius_series(origin_dat, struct, N, prec,
                                        sources=srcs, extra_logs=sum(b))
                # jet value of this block at t0' from the carried mixed jets
                rhs = [gmpy2.mpc(0)] * jsys.dim
                found = False
                for bc, vec in carried.items():
                    if tuple(bc[1:]) != b:
                        continue
                    found = True
                    w = t0h ** bc[0]
                    for r in range(jsys.dim):
                        rhs[r] += vec[r] * w
                if not found:
                    raise ContinuationPathError(
                        "carried jets missing a required block", block=b
                    )
                pval_cols, ptail = part.evaluate_columns(t0, prec, side)
                pval = [gmpy2.mpc(0)] * jsys.dim
                for col in pval_cols:
                    for r in range(jsys.dim):
                        pval[r] += col[r]
                err += ptail
                rhs2 = [rhs[r] - pval[r] for r in range(jsys.dim)]
                Cb, residb, _ = _match_columns(cols_t0, scales, rhs2, prec)
                err += residb
                cb_committed = _commit_homogeneous(sol, Cb)
                _commit_add_particular(cb_committed, part)
                committed[b] = cb_committed
            # evaluate every committed block at the first chain point
            first_center = nodes[path[1]][1] if len(path) > 2 else leg.t_end
            block_vals = {}
            for b in blocks:
                csol = _committed_as_solution(committed[b], sol)
                cols_c, tail_c = csol.evaluate_columns(first_center, prec, side)
                val = [gmpy2.mpc(0)] * jsys.dim
                for col in cols_c:
                    for r in range(jsys.dim):
                        val[r] += col[r]
                block_vals[b] = val
                err += tail_c
            diag.hops += 1
            if len(path) > 2:
                waypoints = [first_center] + [nodes[i][1] for i in path[2:]]
            else:
                waypoints = [first_center]

        # chain the blocks along the waypoints
        block_vals, hops, chain_err = _chain_blocks(
            jsys, lsys, blocks, block_vals, waypoints, prec, diag, n_override
        )
        err += chain_err
        state = StateVector(J=block_vals[zero_b], at_point=leg.t_end,
                            accumulated_error=err)
        return LegResult(
            state=state,
            jets_out={"jets": dict(block_vals), "m_jet": m_jet},
            lsys=lsys,
            graph=graph,
        )


def _chain_blocks(jsys, lsys, blocks, block_vals, waypoints, prec, diag, n_override):
    """Inhomogeneous Taylor hops for all jet blocks along the waypoints."""
    with gmpy2.local_context(prec.gctx()):
        err = gmpy2.mpfr(0)
        hops = 0
        cur = waypoints[0]
        for step in range(1, len(waypoints)):
            target = waypoints[step]
            offset = (target - cur).to_hp(prec)
            if offset == 0:
                cur = target
                continue
            radius = _radius_at(lsys, cur, prec)
            q_hop = float(abs(offset) / radius) if gmpy2.is_finite(radius) else 0.1
            Nh = n_override or choose_truncation(q_hop, prec.digits)
            diag.frobenius_terms = max(diag.frobenius_terms, Nh)
            dat = jet_local_data(jsys, cur)
            glayers = _shifted_sources(jsys, cur, prec)
            series_by_block = {}
            new_vals = {}
            for b in blocks:
                src = None
                for rblk, layers in glayers.items():
                    w = tuple(b[i] - rblk[i] for i in range(len(b)))
                    if any(x < 0 for x in w):
                        continue
                    lower = series_by_block.get(w)
                    if lower is None:
                        continue
                    if src is None:
                        src = [None] * (Nh + 1)
                    for nn in range(Nh + 1):
                        add = _conv_source(layers, lower, nn, jsys.dim)
                        if add is not None:
                            src[nn] = add if src[nn] is None else [
                                a + x for a, x in zip(src[nn], add)
                            ]
                series = taylor_series_vector(dat, block_vals[b], Nh, prec,
                                              source_series=src)
                series_by_block[b] = series
                val, tail = _eval_series(series, offset, prec)
                new_vals[b] = val
                err += tail
            block_vals = new_vals
            cur = target
            hops += 1
            diag.hops += 1
        return block_vals, hops, err


def _jet_start_node(spec, leg, graph, prec: Prec):
    """Furthest path node whose scaled arguments stay well inside the domain."""
    with gmpy2.local_context(prec.gctx()):
        target = gmpy2.mpfr("0.55")
        best = None
        for idx in graph.path[1:-1]:
            kind, center, chp, _r = graph.nodes[idx]
            if kind != "disk":
                continue
            loads = [abs(QGauss(leg.kappa[i]).to_hp(prec)) * abs(chp) for i in leg.active]
            if spec.family == "FA":
                load = sum(loads, gmpy2.mpfr(0))
            else:
                load = max(loads) if loads else gmpy2.mpfr(0)
            if load <= target:
                best = (idx, center)
        if best is None:
            return None, None
        return best


def _geometric_waypoints(t0: QGauss, graph, lsys, prec: Prec):
    """Waypoints from t0 out to the first graph center, then along the path."""
    with gmpy2.local_context(prec.gctx()):
        nodes = graph.nodes
        path = graph.path
        if len(path) > 2:
            targets = [nodes[i][1] for i in path[1:]]
        else:
            targets = [nodes[path[-1]][1]]
        pts = [t0]
        cur = t0
        first = targets[0]
        guard = 0
        while guard < 300:
            guard += 1
            with gmpy2.local_context(prec.gctx()):
                curh = cur.to_hp(prec)
                firsth = first.to_hp(prec)
                gap = abs(firsth - curh)
                rad = _radius_at(lsys, cur, prec)
                if not gmpy2.is_finite(rad) or gap <= gmpy2.mpfr("0.6") * rad:
                    break
                frac = Fraction(float(gmpy2.mpfr("0.6") * rad / gap)).limit_denominator(10**9)
                nxt = cur + (first - cur) * QGauss(frac)
            pts.append(nxt)
            cur = nxt
        pts.extend(targets)
        return pts


def leg_transition(result: LegResult, next_leg: Leg):
    """Initial carry for the next leg from this leg's transported jets."""
    if result.jets_out is None:
        raise ValueError("previous leg carried no jets")
    return result.jets_out
