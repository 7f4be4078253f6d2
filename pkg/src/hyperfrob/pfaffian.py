"""Derivation of the closed first-order systems satisfied by each family.

For every supported family the ratio of adjacent multi-series coefficients is
a ratio of polynomials in the summation indices; the induced operator
identities let any product of Euler operators acting on the function be
rewritten over a finite basis.  We perform that rewriting degree by degree,
solving the small linear clusters that the same-degree monomials form, and
read off the connection matrices.  Everything symbolic happens once per
(family, n) and is cached exactly on disk.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from fractions import Fraction
from itertools import product

import sympy as sp

from .errors import ClosureFailureError, DegenerateParametersError, DerivationBugError
from .numkit.exact import QGauss, qg, QG_ONE
from .numkit.poly import MPoly, MRat

CACHE_VERSION = 1

FAMILIES = ("FA", "FB", "FD")


def param_names(family: str, n: int) -> tuple:
    if family == "FA":
        return ("al",) + tuple(f"be{i}" for i in range(1, n + 1)) + tuple(
            f"ga{i}" for i in range(1, n + 1)
        )
    if family == "FB":
        return tuple(f"al{i}" for i in range(1, n + 1)) + tuple(
            f"be{i}" for i in range(1, n + 1)
        ) + ("ga",)
    if family == "FD":
        return ("al",) + tuple(f"be{i}" for i in range(1, n + 1)) + ("ga",)
    raise ValueError(f"unsupported family {family!r}")


def theta_basis(family: str, n: int) -> tuple:
    """Ordered exponent tuples labelling the function basis."""
    if family in ("FA", "FB"):
        out = []
        for mask in range(2 ** n):
            out.append(tuple((mask >> i) & 1 for i in range(n)))
        return tuple(out)
    if family == "FD":
        base = [tuple([0] * n)]
        for i in range(n):
            e = [0] * n
            e[i] = 1
            base.append(tuple(e))
        return tuple(base)
    raise ValueError(f"unsupported family {family!r}")


# ---------------------------------------------------------------------------
# annihilator factor tables
#
# A linear factor is (param name or None, index tuple, const): its value at a
# summation multi-index m is param + const + sum(m_i for i in indices).

def _p_factors(family, n, k):
    alln = tuple(range(n))
    if family == "FA":
        return [("al", alln, 0), (f"be{k+1}", (k,), 0)]
    if family == "FB":
        return [(f"al{k+1}", (k,), 0), (f"be{k+1}", (k,), 0)]
    if family == "FD":
        return [("al", alln, 0), (f"be{k+1}", (k,), 0)]
    raise ValueError(family)


def _pp_factors(family, n, k):
    alln = tuple(range(n))
    if family == "FA":
        return [(f"ga{k+1}", (k,), 0), (None, (k,), 1)]
    if family in ("FB", "FD"):
        return [("ga", alln, 0), (None, (k,), 1)]
    raise ValueError(family)


def _cross_factors(family, n, k, l):
    """Reduced numerator/denominator factor lists of A_{m+e_k}/A_{m+e_l}."""
    if family == "FA":
        num = [(f"be{k+1}", (k,), 0), (f"ga{l+1}", (l,), 0), (None, (l,), 1)]
        den = [(f"be{l+1}", (l,), 0), (f"ga{k+1}", (k,), 0), (None, (k,), 1)]
    elif family == "FB":
        num = [(f"al{k+1}", (k,), 0), (f"be{k+1}", (k,), 0), (None, (l,), 1)]
        den = [(f"al{l+1}", (l,), 0), (f"be{l+1}", (l,), 0), (None, (k,), 1)]
    elif family == "FD":
        num = [(f"be{k+1}", (k,), 0), (None, (l,), 1)]
        den = [(f"be{l+1}", (l,), 0), (None, (k,), 1)]
    else:
        raise ValueError(family)
    return num, den


@dataclass(frozen=True)
class AnnihilatorRatios:
    """Exact evaluators for the adjacent-coefficient ratio polynomials."""

    family: str
    n: int

    def p_value(self, params: dict, k: int, m) -> Fraction:
        return _eval_factors(_p_factors(self.family, self.n, k), params, m)

    def pp_value(self, params: dict, k: int, m) -> Fraction:
        return _eval_factors(_pp_factors(self.family, self.n, k), params, m)

    def ratio(self, params: dict, k: int, m) -> Fraction:
        """A_{m+e_k} / A_m for exact rational parameter values."""
        den = self.pp_value(params, k, m)
        if den == 0:
            raise DegenerateParametersError(
                "coefficient ratio denominator vanished",
                family=self.family,
                direction=k,
                index=tuple(m),
            )
        return self.p_value(params, k, m) / den


def _eval_factors(factors, params, m) -> Fraction:
    out = Fraction(1)
    for name, idxs, const in factors:
        v = Fraction(const) + sum(Fraction(m[i]) for i in idxs)
        if name is not None:
            v += Fraction(params[name])
        out *= v
    return out


def annihilators(family: str, n: int) -> AnnihilatorRatios:
    if family not in FAMILIES or not 1 <= n <= 3:
        raise ValueError(f"unsupported family/order {family} n={n}")
    return AnnihilatorRatios(family, n)


# ---------------------------------------------------------------------------
# theta-polynomial helpers (dict: exponent tuple -> sympy expr)

def _tp_factor(fac, syms, n):
    name, idxs, const = fac
    out = {tuple([0] * n): sp.Integer(const) + (syms[name] if name else 0)}
    for i in idxs:
        e = [0] * n
        e[i] = 1
        out[tuple(e)] = out.get(tuple(e), 0) + 1
    return {k: v for k, v in out.items() if v != 0}


def _tp_mul(a, b, n):
    out = {}
    for e1, c1 in a.items():
        for e2, c2 in b.items():
            e = tuple(x + y for x, y in zip(e1, e2))
            out[e] = out.get(e, 0) + c1 * c2
    return {k: sp.expand(v) for k, v in out.items() if sp.expand(v) != 0}


def _tp_from_factors(factors, syms, n):
    out = {tuple([0] * n): sp.Integer(1)}
    for f in factors:
        out = _tp_mul(out, _tp_factor(f, syms, n), n)
    return out


def _tp_shift(tp, shift, n):
    """Substitute theta_i -> theta_i + shift_i (integer shifts)."""
    out = {}
    for e, c in tp.items():
        # expand prod (theta_i + s_i)^{e_i}
        acc = {tuple([0] * n): c}
        for i in range(n):
            if e[i] == 0:
                continue
            s = shift[i]
            term = {}
            for j in range(e[i] + 1):
                coef = sp.binomial(e[i], j) * sp.Integer(s) ** (e[i] - j)
                if coef == 0:
                    continue
                ee = [0] * n
                ee[i] = j
                term[tuple(ee)] = coef
            acc = _tp_mul(acc, term, n)
        for ee, cc in acc.items():
            out[ee] = out.get(ee, 0) + cc
    return {k: sp.expand(v) for k, v in out.items() if sp.expand(v) != 0}


# ---------------------------------------------------------------------------
# relations


def _relation_terms(family, n, syms, kind, k, l=None):
    """Relation as [(x-exponent tuple, theta-poly)] summing to the zero operator."""
    if kind == "pde":
        ppk = _tp_from_factors(_pp_factors(family, n, k), syms, n)
        pk = _tp_from_factors(_p_factors(family, n, k), syms, n)
        shift = [0] * n
        shift[k] = -1
        lhs = _tp_shift(ppk, shift, n)
        ek = [0] * n
        ek[k] = 1
        return [(tuple([0] * n), lhs), (tuple(ek), {e: -c for e, c in pk.items()})]
    if kind == "cross":
        numf, denf = _cross_factors(family, n, k, l)
        num = _tp_from_factors(numf, syms, n)
        den = _tp_from_factors(denf, syms, n)
        sk = [0] * n
        sk[k] = -1
        sl = [0] * n
        sl[l] = -1
        el = [0] * n
        el[l] = 1
        ek = [0] * n
        ek[k] = 1
        return [
            (tuple(el), _tp_shift(den, sk, n)),
            (tuple(ek), {e: -c for e, c in _tp_shift(num, sl, n).items()}),
        ]
    raise ValueError(kind)


def _prefix_relation(terms, b, n):
    """Apply theta^b from the left; x-monomials shift theta accordingly."""
    out = {}
    for xexp, tp in terms.items() if isinstance(terms, dict) else terms:
        pref = {tuple([0] * n): sp.Integer(1)}
        for i in range(n):
            if b[i] == 0:
                continue
            s = xexp[i]
            term = {}
            for j in range(b[i] + 1):
                coef = sp.binomial(b[i], j) * sp.Integer(s) ** (b[i] - j)
                if coef == 0:
                    continue
                ee = [0] * n
                ee[i] = j
                term[tuple(ee)] = coef
            pref = _tp_mul(pref, term, n)
        shifted = _tp_mul(pref, tp, n)
        for e, c in shifted.items():
            out.setdefault(e, {})
            out[e][xexp] = out[e].get(xexp, 0) + c
    return out  # theta-mono -> {x-exponent -> coeff expr}


def _equation_exprs(rel, xs):
    """Collapse {theta: {xexp: coeff}} to {theta: sympy expr}."""
    out = {}
    for e, byx in rel.items():
        expr = sp.Integer(0)
        for xexp, c in byx.items():
            mono = sp.Integer(1)
            for i, p in enumerate(xexp):
                if p:
                    mono *= xs[i] ** p
            expr += mono * c
        expr = sp.expand(expr)
        if expr != 0:
            out[e] = expr
    return out


# ---------------------------------------------------------------------------
# derivation proper


def _derive_symbolic(family: str, n: int):
    """Return (basis, xs, params, matrices of sympy exprs)."""
    xs = [sp.Symbol(f"x{i+1}") for i in range(n)]
    pnames = param_names(family, n)
    syms = {p: sp.Symbol(p) for p in pnames}
    basis = theta_basis(family, n)
    basis_set = set(basis)

    def tdeg(a):
        return sum(a)

    # fixpoint collection of unknown monomials and their candidate equations
    unknowns = set()
    equations = {}  # (kind, k, l, b) -> {theta: expr}
    work = []
    for J in basis:
        for k in range(n):
            a = list(J)
            a[k] += 1
            a = tuple(a)
            if a not in basis_set:
                work.append(a)
    rounds = 0
    max_rounds = 10 * (2 ** n) * (n + 2) * 8
    while work:
        rounds += 1
        if rounds > max_rounds:
            raise ClosureFailureError(
                "theta rewriting closure did not stabilize",
                family=family,
                n=n,
            )
        a = work.pop()
        if a in unknowns or a in basis_set:
            continue
        if sum(a) > n + 2:
            raise ClosureFailureError(
                "rewriting escalated past the degree bound", family=family, n=n
            )
        unknowns.add(a)
        supp = [i for i in range(n) if a[i] > 0]
        cand = []
        for k in supp:
            for j in supp:
                b = list(a)
                b[k] -= 1
                b[j] -= 1
                if min(b) < 0:
                    continue
                cand.append(("pde", k, None, tuple(b)))
                # the quadratic cross-shift identities close the smaller FD
                # basis; the FA/FB ones are cubic and would escalate degrees
                if family == "FD" and j != k:
                    cand.append(("cross", min(k, j), max(k, j), tuple(b)))
        for key in cand:
            if key in equations:
                continue
            kind, k, l, b = key
            rel = _relation_terms(family, n, syms, kind, k, l)
            eq = _equation_exprs(_prefix_relation(rel, b, n), xs)
            equations[key] = eq
            for mono in eq:
                if mono not in basis_set and mono not in unknowns:
                    work.append(mono)

    # solve degree by degree in the rational function field (fast exact
    # cancellation; generic Expr arithmetic swells badly here)
    K = sp.QQ.frac_field(*(xs + [syms[p] for p in pnames]))
    to_f = K.from_sympy
    rewrites = {}
    degrees = sorted({tdeg(a) for a in unknowns})
    for D in degrees:
        tier = sorted(a for a in unknowns if tdeg(a) == D)
        rows = []
        for _key, eq in equations.items():
            monos = [m for m in eq if m not in basis_set]
            if not monos or max(tdeg(m) for m in monos) != D:
                continue
            vec = {}
            rhs = {}
            ok = True
            for mono, c in eq.items():
                cf = to_f(c)
                if mono in basis_set:
                    rhs[mono] = rhs.get(mono, K.zero) + cf
                elif tdeg(mono) == D:
                    vec[mono] = vec.get(mono, K.zero) + cf
                else:
                    rw = rewrites.get(mono)
                    if rw is None:
                        ok = False
                        break
                    for bm, rc in rw.items():
                        rhs[bm] = rhs.get(bm, K.zero) + cf * rc
            if ok and vec:
                rows.append((vec, rhs))
        solved = _solve_cluster(K, tier, rows)
        if solved is None:
            raise ClosureFailureError(
                "rewrite cluster is rank deficient", family=family, n=n, degree=D
            )
        rewrites.update(solved)

    # assemble the action matrices: row = differentiated basis element
    m = len(basis)
    matrices = []
    for k in range(n):
        xk = to_f(xs[k])
        Mk = [[sp.Integer(0)] * m for _ in range(m)]
        for row, J in enumerate(basis):
            a = list(J)
            a[k] += 1
            a = tuple(a)
            if a in basis_set:
                action = {a: K.one}
            else:
                action = rewrites[a]
            for bm, c in action.items():
                col = basis.index(bm)
                Mk[row][col] = K.to_sympy(c / xk)
        matrices.append(Mk)
    return basis, xs, [syms[p] for p in pnames], matrices


def _solve_cluster(K, tier, rows):
    """Gauss-Jordan over the fraction field K for one degree tier."""
    rows = [dict(vec={v: c for v, c in vec.items() if c}, rhs=dict(rhs))
            for vec, rhs in rows]
    solved_rows = {}
    order = []
    for u in tier:
        pick = None
        for i, row in enumerate(rows):
            c = row["vec"].get(u)
            if not c:
                continue
            if pick is None or len(row["vec"]) < len(rows[pick]["vec"]):
                pick = i
        if pick is None:
            return None
        row = rows.pop(pick)
        piv = row["vec"].pop(u)
        vec = {v: c / piv for v, c in row["vec"].items() if c}
        rhs = {bm: c / piv for bm, c in row["rhs"].items() if c}
        solved_rows[u] = (vec, rhs)
        order.append(u)
        for other in rows:
            f = other["vec"].pop(u, None)
            if not f:
                continue
            for v, c in vec.items():
                other["vec"][v] = other["vec"].get(v, K.zero) - f * c
            for bm, c in rhs.items():
                other["rhs"][bm] = other["rhs"].get(bm, K.zero) - f * c
    # back substitution among the tier unknowns
    final = {}
    for u in reversed(order):
        vec, rhs = solved_rows[u]
        acc = {bm: -c for bm, c in rhs.items()}
        for v, c in vec.items():
            sub = final.get(v)
            if sub is None:
                return None
            for bm, rc in sub.items():
                acc[bm] = acc.get(bm, K.zero) - c * rc
        final[u] = {bm: c for bm, c in acc.items() if c}
    return final


# ---------------------------------------------------------------------------
# exact representation, cache, substitution


@dataclass
class PfaffianSystem:
    """Closed system dJ = (sum_k M_k dx_k) J on the theta basis.

    ``matrices[k][r][c]`` is an MRat over variables var_names + param_names
    (param_names empty once numeric parameter values are substituted).
    """

    family: str
    n: int
    basis: tuple
    var_names: tuple
    param_names: tuple
    matrices: list

    @property
    def dim(self) -> int:
        return len(self.basis)

    def to_json(self):
        return {
            "version": CACHE_VERSION,
            "family": self.family,
            "n": self.n,
            "basis": [list(b) for b in self.basis],
            "vars": list(self.var_names),
            "params": list(self.param_names),
            "matrices": [
                [[entry.to_json() for entry in row] for row in Mk]
                for Mk in self.matrices
            ],
        }

    @classmethod
    def from_json(cls, data):
        return cls(
            family=data["family"],
            n=int(data["n"]),
            basis=tuple(tuple(b) for b in data["basis"]),
            var_names=tuple(data["vars"]),
            param_names=tuple(data["params"]),
            matrices=[
                [[MRat.from_json(e) for e in row] for row in Mk]
                for Mk in data["matrices"]
            ],
        )


def _sympy_to_mrat(expr, gens, var_names):
    num, den = sp.fraction(sp.cancel(sp.together(expr)))
    dfactors = []
    if den != 1:
        const, flist = sp.factor_list(den)
        num = num / const
        for f, e in flist:
            dfactors.append((_sympy_poly_to_mpoly(f, gens, var_names), int(e)))
    npoly = _sympy_poly_to_mpoly(sp.expand(num), gens, var_names)
    return MRat(npoly, dfactors)


def _sympy_poly_to_mpoly(expr, gens, var_names):
    p = sp.Poly(expr, *gens)
    terms = {}
    for exps, coeff in p.terms():
        q = Fraction(int(sp.Integer(coeff.p)), int(sp.Integer(coeff.q)))
        terms[tuple(int(x) for x in exps)] = QGauss(q)
    return MPoly(var_names, terms)


def derive_pfaffian(family: str, n: int, cache_dir: str | None = None) -> PfaffianSystem:
    """Derive (or load from cache) the closed Pfaffian system for a family."""
    if family not in FAMILIES or not 1 <= n <= 3:
        raise ValueError(f"unsupported family/order {family} n={n}")
    path = None
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
        path = os.path.join(cache_dir, f"pfaffian_{family}_{n}_v{CACHE_VERSION}.json")
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
            if data.get("version") == CACHE_VERSION:
                return PfaffianSystem.from_json(data)
    basis, xs, params, mats = _derive_symbolic(family, n)
    gens = tuple(xs) + tuple(params)
    names = tuple(str(g) for g in gens)
    matrices = [
        [[_sympy_to_mrat(mats[k][r][c], gens, names) for c in range(len(basis))]
         for r in range(len(basis))]
        for k in range(n)
    ]
    system = PfaffianSystem(
        family=family,
        n=n,
        basis=basis,
        var_names=tuple(str(x) for x in xs),
        param_names=tuple(str(p) for p in params),
        matrices=matrices,
    )
    verify_flatness(system)
    if path:
        _atomic_write_json(path, system.to_json())
    return system


def _atomic_write_json(path, data):
    d = os.path.dirname(path)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(data, fh, sort_keys=True)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def verify_flatness(system: PfaffianSystem):
    """Exact integrability check: the flatness defect must vanish identically."""
    n = system.n
    m = system.dim
    for i in range(n):
        for j in range(i + 1, n):
            Mi, Mj = system.matrices[i], system.matrices[j]
            xi, xj = system.var_names[i], system.var_names[j]
            for r in range(m):
                for c in range(m):
                    acc = Mi[r][c].derivative(xj) - Mj[r][c].derivative(xi)
                    for t in range(m):
                        acc = acc + Mi[r][t] * Mj[t][c] - Mj[r][t] * Mi[t][c]
                    if not acc.num.is_zero():
                        raise DerivationBugError(
                            "flatness identity violated",
                            family=system.family,
                            n=n,
                            pair=(i, j),
                            entry=(r, c),
                        )
    return True


def substitute(system: PfaffianSystem, param_values: dict, frozen: dict | None = None) -> PfaffianSystem:
    """Evaluate parameters (and optionally freeze coordinates) exactly."""
    assign = {}
    for name in system.param_names:
        if name not in param_values:
            raise ValueError(f"missing parameter value for {name}")
        assign[name] = qg(param_values[name])
    if frozen:
        for name, val in frozen.items():
            if name not in system.var_names:
                raise ValueError(f"unknown coordinate {name}")
            assign[name] = qg(val)
    keep_vars = tuple(v for v in system.var_names if not (frozen and v in frozen))
    try:
        mats = [
            [[e.subs_partial(assign) for e in row] for row in Mk]
            for Mk in system.matrices
        ]
    except ZeroDivisionError as exc:
        raise DegenerateParametersError(
            "connection matrix denominator vanished identically at this node",
            family=system.family,
        ) from exc
    return PfaffianSystem(
        family=system.family,
        n=system.n,
        basis=system.basis,
        var_names=keep_vars,
        param_names=(),
        matrices=mats,
    )
