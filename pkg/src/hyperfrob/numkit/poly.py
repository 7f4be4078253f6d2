"""Sparse multivariate and dense univariate polynomials over Gaussian rationals.

MPoly carries the derived connection matrices (variables = arguments plus
family parameters); UPoly/URat carry everything univariate that the
restriction-to-a-path pipeline produces.  All arithmetic is exact; embedding
to floating complex happens only at the edges.
"""

from __future__ import annotations

from fractions import Fraction

import gmpy2

from .exact import QGauss, QG_ONE, QG_ZERO, qg
from .hp import Prec

__all__ = ["MPoly", "UPoly", "URat", "MRat"]


class MPoly:
    """Sparse polynomial in named variables with QGauss coefficients."""

    __slots__ = ("vars", "terms")

    def __init__(self, variables, terms=None):
        self.vars = tuple(variables)
        self.terms = {}
        if terms:
            for e, c in terms.items():
                c = qg(c)
                if c:
                    self.terms[tuple(e)] = c

    # -- constructors ------------------------------------------------------
    @classmethod
    def const(cls, variables, c):
        return cls(variables, {tuple([0] * len(variables)): qg(c)})

    @classmethod
    def var(cls, variables, name, power: int = 1):
        variables = tuple(variables)
        e = [0] * len(variables)
        e[variables.index(name)] = power
        return cls(variables, {tuple(e): QG_ONE})

    # -- predicates --------------------------------------------------------
    def is_zero(self) -> bool:
        return not self.terms

    def is_const(self) -> bool:
        return all(all(x == 0 for x in e) for e in self.terms)

    def const_value(self) -> QGauss:
        return self.terms.get(tuple([0] * len(self.vars)), QG_ZERO)

    def degree(self, name: str) -> int:
        i = self.vars.index(name)
        return max((e[i] for e in self.terms), default=0)

    def total_degree(self) -> int:
        return max((sum(e) for e in self.terms), default=0)

    def key(self):
        """Canonical hashable form (used to identify shared denominator factors)."""
        return (self.vars, tuple(sorted((e, (c.re, c.im)) for e, c in self.terms.items())))

    # -- ring ops ----------------------------------------------------------
    def _check(self, other):
        if self.vars != other.vars:
            raise ValueError("variable mismatch")

    def __add__(self, other):
        if isinstance(other, (int, Fraction, QGauss)):
            other = MPoly.const(self.vars, other)
        self._check(other)
        out = dict(self.terms)
        for e, c in other.terms.items():
            s = out.get(e, QG_ZERO) + c
            if s:
                out[e] = s
            else:
                out.pop(e, None)
        return MPoly(self.vars, out)

    __radd__ = __add__

    def __neg__(self):
        return MPoly(self.vars, {e: -c for e, c in self.terms.items()})

    def __sub__(self, other):
        if isinstance(other, (int, Fraction, QGauss)):
            other = MPoly.const(self.vars, other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, Fraction, QGauss)):
            c = qg(other)
            if not c:
                return MPoly(self.vars)
            return MPoly(self.vars, {e: v * c for e, v in self.terms.items()})
        self._check(other)
        out = {}
        for e1, c1 in self.terms.items():
            for e2, c2 in other.terms.items():
                e = tuple(a + b for a, b in zip(e1, e2))
                p = c1 * c2
                s = out.get(e)
                s = p if s is None else s + p
                if s:
                    out[e] = s
                else:
                    out.pop(e, None)
        return MPoly(self.vars, out)

    __rmul__ = __mul__

    def __pow__(self, n: int):
        out = MPoly.const(self.vars, 1)
        base = self
        while n:
            if n & 1:
                out = out * base
            base = base * base
            n >>= 1
        return out

    def __eq__(self, other):
        if not isinstance(other, MPoly):
            return NotImplemented
        return self.vars == other.vars and self.terms == other.terms

    def __hash__(self):
        return hash(self.key())

    def derivative(self, name: str) -> "MPoly":
        i = self.vars.index(name)
        out = {}
        for e, c in self.terms.items():
            if e[i] == 0:
                continue
            e2 = list(e)
            e2[i] -= 1
            out[tuple(e2)] = c * e[i]
        return MPoly(self.vars, out)

    # -- substitution ------------------------------------------------------
    def subs_partial(self, assign: dict) -> "MPoly":
        """Substitute exact values for a subset of variables."""
        keep = [v for v in self.vars if v not in assign]
        idx = {v: i for i, v in enumerate(self.vars)}
        out = {}
        for e, c in self.terms.items():
            val = c
            for v, x in assign.items():
                p = e[idx[v]]
                if p:
                    val = val * (qg(x) ** p)
            if not val:
                continue
            e2 = tuple(e[idx[v]] for v in keep)
            s = out.get(e2, QG_ZERO) + val
            if s:
                out[e2] = s
            else:
                out.pop(e2, None)
        return MPoly(tuple(keep), out)

    def map_vars(self, target_vars, mapping: dict) -> "MPoly":
        """Substitute every variable with an MPoly over target_vars."""
        target_vars = tuple(target_vars)
        cache = {}

        def var_pow(v, p):
            got = cache.get((v, p))
            if got is None:
                got = mapping[v] ** p
                cache[(v, p)] = got
            return got

        out = MPoly(target_vars)
        for e, c in self.terms.items():
            term = MPoly.const(target_vars, c)
            for v, p in zip(self.vars, e):
                if p:
                    term = term * var_pow(v, p)
            out = out + term
        return out

    def restrict_line(self, anchors: dict, slopes: dict) -> "UPoly":
        """Substitute var -> anchors[var] + slopes[var]*t for every variable."""
        out = {}
        for e, c in self.terms.items():
            factors = []
            for v, p in zip(self.vars, e):
                if p:
                    a, k = qg(anchors.get(v, 0)), qg(slopes.get(v, 0))
                    factors.append((a, k, p))
            poly = [c]
            for a, k, p in factors:
                lin = [a, k] if k else [a]
                for _ in range(p):
                    poly = _up_mul(poly, lin)
            for i, v in enumerate(poly):
                if v:
                    out[i] = out.get(i, QG_ZERO) + v
        coeffs = [QG_ZERO] * (1 + max(out, default=0))
        for i, v in out.items():
            coeffs[i] = v
        return UPoly(coeffs)

    def collect_univar(self, name: str) -> dict:
        """View the polynomial as sum_d (coeff UPoly in the *other* variable)*name^d.

        Only supported for two-variable polynomials; returns {degree: UPoly}.
        """
        if len(self.vars) != 2:
            raise ValueError("collect_univar expects a bivariate polynomial")
        i = self.vars.index(name)
        j = 1 - i
        buckets = {}
        for e, c in self.terms.items():
            d = e[i]
            buckets.setdefault(d, {})[e[j]] = c
        out = {}
        for d, mono in buckets.items():
            coeffs = [QG_ZERO] * (1 + max(mono))
            for p, c in mono.items():
                coeffs[p] = c
            out[d] = UPoly(coeffs)
        return out

    # -- serialization -----------------------------------------------------
    def to_json(self):
        return {
            "vars": list(self.vars),
            "terms": {
                ",".join(map(str, e)): [str(c.re), str(c.im)]
                for e, c in sorted(self.terms.items())
            },
        }

    @classmethod
    def from_json(cls, data):
        terms = {}
        for key, (re, im) in data["terms"].items():
            e = tuple(int(x) for x in key.split(",")) if key else ()
            terms[e] = QGauss(Fraction(re), Fraction(im))
        return cls(tuple(data["vars"]), terms)

    def __repr__(self):
        if not self.terms:
            return "0"
        bits = []
        for e, c in sorted(self.terms.items()):
            mono = "*".join(
                f"{v}^{p}" if p > 1 else v for v, p in zip(self.vars, e) if p
            )
            bits.append(f"({c})" + (f"*{mono}" if mono else ""))
        return " + ".join(bits)


def _up_mul(a, b):
    out = [QG_ZERO] * (len(a) + len(b) - 1)
    for i, x in enumerate(a):
        if not x:
            continue
        for j, y in enumerate(b):
            if y:
                out[i + j] = out[i + j] + x * y
    return out


def _trim(coeffs):
    n = len(coeffs)
    while n > 1 and not coeffs[n - 1]:
        n -= 1
    return coeffs[:n]


class UPoly:
    """Dense univariate polynomial over QGauss, ascending coefficients."""

    __slots__ = ("coeffs",)

    def __init__(self, coeffs):
        cs = [qg(c) for c in coeffs] or [QG_ZERO]
        self.coeffs = _trim(cs)

    @classmethod
    def const(cls, c):
        return cls([qg(c)])

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def is_zero(self) -> bool:
        return len(self.coeffs) == 1 and not self.coeffs[0]

    def __add__(self, other):
        if isinstance(other, (int, Fraction, QGauss)):
            other = UPoly.const(other)
        n = max(len(self.coeffs), len(other.coeffs))
        out = [QG_ZERO] * n
        for i, c in enumerate(self.coeffs):
            out[i] = out[i] + c
        for i, c in enumerate(other.coeffs):
            out[i] = out[i] + c
        return UPoly(out)

    __radd__ = __add__

    def __neg__(self):
        return UPoly([-c for c in self.coeffs])

    def __sub__(self, other):
        if isinstance(other, (int, Fraction, QGauss)):
            other = UPoly.const(other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, Fraction, QGauss)):
            c = qg(other)
            return UPoly([v * c for v in self.coeffs])
        return UPoly(_up_mul(self.coeffs, other.coeffs))

    __rmul__ = __mul__

    def __eq__(self, other):
        if not isinstance(other, UPoly):
            return NotImplemented
        return self.coeffs == other.coeffs

    def __hash__(self):
        return hash(tuple((c.re, c.im) for c in self.coeffs))

    def divmod(self, other: "UPoly"):
        if other.is_zero():
            raise ZeroDivisionError("polynomial division by zero")
        rem = list(self.coeffs)
        dq = len(rem) - len(other.coeffs)
        if dq < 0:
            return UPoly([0]), UPoly(rem)
        quo = [QG_ZERO] * (dq + 1)
        lead = other.coeffs[-1]
        for k in range(dq, -1, -1):
            f = rem[k + other.degree] / lead
            quo[k] = f
            if f:
                for j, c in enumerate(other.coeffs):
                    rem[k + j] = rem[k + j] - f * c
        return UPoly(quo), UPoly(rem)

    def __floordiv__(self, other):
        q, _ = self.divmod(other)
        return q

    def gcd(self, other: "UPoly") -> "UPoly":
        a, b = self, other
        while not b.is_zero():
            _, r = a.divmod(b)
            a, b = b, r
        if a.is_zero():
            return a
        return a.monic()

    def lcm(self, other: "UPoly") -> "UPoly":
        if self.is_zero() or other.is_zero():
            return UPoly([0])
        g = self.gcd(other)
        return ((self * other).divmod(g)[0]).monic()

    def monic(self) -> "UPoly":
        lead = self.coeffs[-1]
        if lead == QG_ONE or self.is_zero():
            return self
        inv = QG_ONE / lead
        return UPoly([c * inv for c in self.coeffs])

    def derivative(self) -> "UPoly":
        if self.degree == 0:
            return UPoly([0])
        return UPoly([self.coeffs[i] * i for i in range(1, len(self.coeffs))])

    def shifted(self, c) -> "UPoly":
        """Taylor shift: returns p(u + c) as a polynomial in u (c exact)."""
        c = qg(c)
        out = [QG_ZERO]
        for coeff in reversed(self.coeffs):
            out = _up_mul(out, [c, QG_ONE])
            out[0] = out[0] + coeff
        return UPoly(out)

    def eval_qg(self, x) -> QGauss:
        x = qg(x)
        acc = QG_ZERO
        for c in reversed(self.coeffs):
            acc = acc * x + c
        return acc

    def embed(self, prec: Prec):
        return [c.to_hp(prec) for c in self.coeffs]

    def eval_hp(self, x, prec: Prec):
        with gmpy2.local_context(prec.gctx()):
            acc = gmpy2.mpc(0)
            for c in reversed(self.embed(prec)):
                acc = acc * x + c
            return acc

    def valuation(self) -> int:
        for i, c in enumerate(self.coeffs):
            if c:
                return i
        return len(self.coeffs)

    def shift_down(self, k: int) -> "UPoly":
        """Exact division by t^k (the first k coefficients must vanish)."""
        if any(self.coeffs[i] for i in range(min(k, len(self.coeffs)))):
            raise ValueError("not divisible by t^k")
        return UPoly(self.coeffs[k:] or [QG_ZERO])

    def __repr__(self):
        return " + ".join(f"({c})*t^{i}" for i, c in enumerate(self.coeffs) if c) or "0"


class MRat:
    """Multivariate rational function with the denominator kept factored.

    Keeping factors separate sidesteps multivariate gcd computation entirely:
    sums take factor-wise common denominators, restrictions to a path cancel
    in the univariate ring, and identically-vanishing factors are detected
    per factor.
    """

    __slots__ = ("num", "den")

    def __init__(self, num: MPoly, den=None):
        # den: iterable of (MPoly factor, positive int exponent)
        self.num = num
        merged = {}
        keys = {}
        for f, e in den or ():
            if f.is_const():
                c = f.const_value()
                if not c:
                    raise ZeroDivisionError("zero denominator factor")
                self.num = self.num * (QG_ONE / (c ** e))
                continue
            k = f.key()
            if k in merged:
                merged[k] = (merged[k][0], merged[k][1] + e)
            else:
                merged[k] = (f, e)
            keys[k] = f
        if num.is_zero():
            merged = {}
        self.den = tuple(sorted(merged.values(), key=lambda fe: fe[0].key()))

    @classmethod
    def from_poly(cls, p: MPoly):
        return cls(p, ())

    @property
    def vars(self):
        return self.num.vars

    def is_zero(self):
        return self.num.is_zero()

    def den_poly(self) -> MPoly:
        out = MPoly.const(self.vars, 1)
        for f, e in self.den:
            out = out * (f ** e)
        return out

    def __neg__(self):
        return MRat(-self.num, self.den)

    def __add__(self, other):
        if isinstance(other, (int, Fraction, QGauss)):
            other = MRat.from_poly(MPoly.const(self.vars, other))
        mine = {f.key(): (f, e) for f, e in self.den}
        theirs = {f.key(): (f, e) for f, e in other.den}
        union = {}
        for k, (f, e) in list(mine.items()) + list(theirs.items()):
            if k not in union or union[k][1] < e:
                union[k] = (f, e)
        a, b = self.num, other.num
        for k, (f, e) in union.items():
            da = e - (mine.get(k, (None, 0))[1])
            db = e - (theirs.get(k, (None, 0))[1])
            if da:
                a = a * (f ** da)
            if db:
                b = b * (f ** db)
        return MRat(a + b, tuple(union.values()))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, Fraction, QGauss)):
            other = MRat.from_poly(MPoly.const(self.vars, other))
        return self + (-other)

    def __mul__(self, other):
        if isinstance(other, (int, Fraction, QGauss)):
            return MRat(self.num * other, self.den)
        return MRat(self.num * other.num, tuple(self.den) + tuple(other.den))

    __rmul__ = __mul__

    def derivative(self, name: str) -> "MRat":
        dnum = self.num.derivative(name)
        if not self.den:
            return MRat(dnum, ())
        # d(num/D) = (num' D - num D')/D^2 with D'/D = sum e_i f_i'/f_i
        first = dnum
        for f, _e in self.den:
            first = first * f
        second = MPoly(self.vars)
        for i, (fi, ei) in enumerate(self.den):
            term = self.num * ei * fi.derivative(name)
            for j, (fj, _ej) in enumerate(self.den):
                if j != i:
                    term = term * fj
            second = second + term
        new_den = tuple((f, e + 1) for f, e in self.den)
        return MRat(first - second, new_den)

    def subs_partial(self, assign: dict) -> "MRat":
        num = self.num.subs_partial(assign)
        den = []
        for f, e in self.den:
            f2 = f.subs_partial(assign)
            if f2.is_zero():
                raise ZeroDivisionError("denominator factor vanished identically")
            den.append((f2, e))
        return MRat(num, den)

    def restrict_line(self, anchors: dict, slopes: dict) -> "URat":
        """Substitute var -> anchor + slope*t everywhere; cancel in t."""
        num = self.num.restrict_line(anchors, slopes)
        den = UPoly([1])
        for f, e in self.den:
            fu = f.restrict_line(anchors, slopes)
            if fu.is_zero():
                raise ZeroDivisionError("denominator factor vanished on the path")
            for _ in range(e):
                den = den * fu
        return URat(num, den)

    def eval_qg(self, assign: dict) -> QGauss:
        num = self.num.subs_partial(assign)
        if num.vars:
            raise ValueError("evaluation left free variables")
        val = num.const_value()
        for f, e in self.den:
            d = f.subs_partial(assign).const_value()
            if not d:
                raise ZeroDivisionError("evaluation at a pole")
            val = val / d ** e
        return val

    def to_json(self):
        return {
            "num": self.num.to_json(),
            "den": self.den_poly().to_json(),
            "den_factors": [[f.to_json(), e] for f, e in self.den],
        }

    @classmethod
    def from_json(cls, data):
        num = MPoly.from_json(data["num"])
        den = [(MPoly.from_json(f), int(e)) for f, e in data["den_factors"]]
        return cls(num, den)

    def __repr__(self):
        if not self.den:
            return repr(self.num)
        dens = " * ".join(f"({f!r})^{e}" if e > 1 else f"({f!r})" for f, e in self.den)
        return f"[{self.num!r}] / [{dens}]"


class URat:
    """Univariate rational function, gcd-canceled, monic denominator."""

    __slots__ = ("num", "den")

    def __init__(self, num: UPoly, den: UPoly = None, cancel: bool = True):
        if den is None:
            den = UPoly([1])
        if den.is_zero():
            raise ZeroDivisionError("zero denominator")
        if cancel and not num.is_zero():
            g = num.gcd(den)
            if g.degree > 0:
                num = num.divmod(g)[0]
                den = den.divmod(g)[0]
        if num.is_zero():
            den = UPoly([1])
        lead = den.coeffs[-1]
        if lead != QG_ONE:
            inv = QG_ONE / lead
            num = num * inv
            den = den * inv
        self.num = num
        self.den = den

    @classmethod
    def const(cls, c):
        return cls(UPoly.const(c))

    def is_zero(self):
        return self.num.is_zero()

    def __add__(self, other):
        if isinstance(other, (int, Fraction, QGauss)):
            other = URat.const(other)
        return URat(self.num * other.den + other.num * self.den, self.den * other.den)

    __radd__ = __add__

    def __neg__(self):
        return URat(-self.num, self.den, cancel=False)

    def __sub__(self, other):
        if isinstance(other, (int, Fraction, QGauss)):
            other = URat.const(other)
        return self + (-other)

    def __mul__(self, other):
        if isinstance(other, (int, Fraction, QGauss)):
            return URat(self.num * other, self.den, cancel=False)
        return URat(self.num * other.num, self.den * other.den)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, Fraction, QGauss)):
            return URat(self.num, self.den * other)
        return URat(self.num * other.den, self.den * other.num)

    def __eq__(self, other):
        if not isinstance(other, URat):
            return NotImplemented
        return (self.num * other.den - other.num * self.den).is_zero()

    def pole_order_at0(self) -> int:
        return max(0, self.den.valuation() - self.num.valuation())

    def laurent_at0(self, nterms: int):
        """(pole_order p, coefficients c_{-p}..c_{nterms-1-p}) exactly."""
        if self.num.is_zero():
            return 0, [QG_ZERO] * nterms
        vd, vn = self.den.valuation(), self.num.valuation()
        den = self.den.shift_down(vd)
        p = vd - vn
        shift = vn if p >= 0 else vd
        num = self.num.shift_down(shift)
        p = max(p, 0)
        d0inv = QG_ONE / den.coeffs[0]
        out = []
        for m in range(nterms):
            acc = num.coeffs[m] if m < len(num.coeffs) else QG_ZERO
            for s in range(1, min(m, den.degree) + 1):
                acc = acc - den.coeffs[s] * out[m - s]
            out.append(acc * d0inv)
        return p, out

    def eval_qg(self, x) -> QGauss:
        d = self.den.eval_qg(x)
        if not d:
            raise ZeroDivisionError("evaluation at a pole")
        return self.num.eval_qg(x) / d

    def __repr__(self):
        return f"({self.num!r})/({self.den!r})"
