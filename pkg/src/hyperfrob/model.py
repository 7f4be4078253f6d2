"""Function-family model: parameters, specs, convergence domains, and the
direct multi-series summation oracle.

The oracle sums the defining series by total-degree shells with exact
Pochhammer-ratio updates, returning the full theta-basis vector plus a
certified geometric tail bound.  It is the source of boundary data for the
transport pipeline and the independent reference the tests compare against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import gmpy2

from .errors import DegenerateParametersError, MathDomainError, OracleDomainError
from .numkit.exact import QGauss, qg
from .numkit.hp import Prec, to_complex, to_real
from .pfaffian import annihilators, param_names, theta_basis

__all__ = [
    "LinearForm",
    "FunctionSpec",
    "Options",
    "EvalRequest",
    "convergence_check",
    "sum_series",
    "sum_series_jets",
]


@dataclass(frozen=True)
class LinearForm:
    """Exact linear form const + slope*ep in the expansion parameter."""

    const: Fraction
    slope: Fraction = Fraction(0)

    def __post_init__(self):
        object.__setattr__(self, "const", Fraction(self.const))
        object.__setattr__(self, "slope", Fraction(self.slope))

    def at(self, eps: Fraction) -> Fraction:
        return self.const + self.slope * Fraction(eps)

    @property
    def is_const(self) -> bool:
        return self.slope == 0

    def __repr__(self):
        if self.slope == 0:
            return str(self.const)
        s = f"{self.slope}*ep" if self.slope != 1 else "ep"
        if self.const == 0:
            return s
        return f"{self.const}{'+' if self.slope > 0 else ''}{s}"


def _family_param_shape(family: str, n: int):
    """(group name, count) structure in declaration order."""
    if family == "FA":
        return [("alpha", 1), ("beta", n), ("gamma", n)]
    if family == "FB":
        return [("alpha", n), ("beta", n), ("gamma", 1)]
    if family == "FD":
        return [("alpha", 1), ("beta", n), ("gamma", 1)]
    raise ValueError(f"unsupported family {family!r}")


@dataclass(frozen=True)
class FunctionSpec:
    """Which function, with exact linear-form parameters and exact arguments."""

    family: str
    n: int
    alpha: tuple  # LinearForm tuple (length 1 or n)
    beta: tuple
    gamma: tuple
    args: tuple  # QGauss tuple, length n

    def __post_init__(self):
        if self.family not in ("FA", "FB", "FD"):
            raise MathDomainError(f"unsupported family {self.family!r}")
        if not 1 <= self.n <= 3:
            raise MathDomainError(f"order n={self.n} outside supported range 1..3")
        shape = dict(_family_param_shape(self.family, self.n))
        object.__setattr__(self, "alpha", tuple(self.alpha))
        object.__setattr__(self, "beta", tuple(self.beta))
        object.__setattr__(self, "gamma", tuple(self.gamma))
        object.__setattr__(self, "args", tuple(qg(a) for a in self.args))
        for name, group in (("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)):
            if len(group) != shape[name]:
                raise MathDomainError(
                    f"{self.family} needs {shape[name]} {name} parameter(s), got {len(group)}"
                )
            if not all(isinstance(p, LinearForm) for p in group):
                raise MathDomainError(f"{name} parameters must be LinearForm")
        if len(self.args) != self.n:
            raise MathDomainError(f"expected {self.n} arguments, got {len(self.args)}")

    # parameter dictionary keyed like the derived systems
    def param_forms(self) -> dict:
        names = param_names(self.family, self.n)
        if self.family == "FA":
            vals = self.alpha + self.beta + self.gamma
        elif self.family == "FB":
            vals = self.alpha + self.beta + self.gamma
        else:
            vals = self.alpha + self.beta + self.gamma
        return dict(zip(names, vals))

    def gamma_forms(self) -> tuple:
        return self.gamma

    def params_at(self, eps: Fraction) -> dict:
        """Exact parameter values at an epsilon node; gamma degeneracies are errors."""
        vals = {k: f.at(eps) for k, f in self.param_forms().items()}
        for g in self.gamma:
            v = g.at(eps)
            if v.denominator == 1 and v <= 0:
                raise DegenerateParametersError(
                    "lower parameter hit a non-positive integer",
                    gamma=str(g),
                    eps=str(eps),
                )
        return vals

    def basis(self):
        return theta_basis(self.family, self.n)

    def reduced(self) -> "FunctionSpec":
        """Drop zero arguments (any family) and merge equal FD arguments.

        Either reduction leaves the function value (first basis component)
        unchanged; merging uses the Vandermonde identity on the beta weights.
        """
        spec = self
        # drop zero coordinates
        keep = [i for i, a in enumerate(spec.args) if a]
        if len(keep) != spec.n:
            if not keep:
                keep = [0]  # keep one coordinate; series is constant 1 anyway
            spec = _subset_spec(spec, keep)
        if spec.family == "FD":
            # merge duplicated arguments: beta weights add
            groups = {}
            for i, a in enumerate(spec.args):
                groups.setdefault(a, []).append(i)
            if len(groups) != spec.n:
                betas = []
                args = []
                for a, idxs in groups.items():
                    c = sum((spec.beta[i].const for i in idxs), Fraction(0))
                    s = sum((spec.beta[i].slope for i in idxs), Fraction(0))
                    betas.append(LinearForm(c, s))
                    args.append(a)
                spec = FunctionSpec(
                    family="FD",
                    n=len(args),
                    alpha=spec.alpha,
                    beta=tuple(betas),
                    gamma=spec.gamma,
                    args=tuple(args),
                )
        return spec

    def scaled_args(self, factor: QGauss) -> tuple:
        return tuple(a * factor for a in self.args)


def _subset_spec(spec: FunctionSpec, keep) -> FunctionSpec:
    n2 = len(keep)
    take = lambda group: tuple(group[i] for i in keep)
    if spec.family == "FA":
        return FunctionSpec("FA", n2, spec.alpha, take(spec.beta), take(spec.gamma),
                            tuple(spec.args[i] for i in keep))
    if spec.family == "FB":
        return FunctionSpec("FB", n2, take(spec.alpha), take(spec.beta), spec.gamma,
                            tuple(spec.args[i] for i in keep))
    return FunctionSpec("FD", n2, spec.alpha, take(spec.beta), spec.gamma,
                        tuple(spec.args[i] for i in keep))


@dataclass(frozen=True)
class Options:
    simple_continuation: bool = False
    threads: int = 0  # 0 = all available workers
    frobenius_terms: int | None = None  # None = auto
    internal_precision: int | None = None  # None = auto
    delta_side: int = -1  # -1 for -i, +1 for +i


@dataclass(frozen=True)
class EvalRequest:
    spec: FunctionSpec
    order: int  # number of requested expansion terms
    digits: int
    pole_order: int = 0
    options: Options = field(default_factory=Options)

    def __post_init__(self):
        if self.order < 1:
            raise MathDomainError("order must be >= 1")
        if self.digits < 1:
            raise MathDomainError("digits must be >= 1")
        if self.pole_order < 0:
            raise MathDomainError("pole_order must be >= 0")
        if self.options.delta_side not in (-1, 1):
            raise MathDomainError("delta prescription must be +i or -i")


# ---------------------------------------------------------------------------
# convergence domain


def _abs_upper(z: QGauss, scale: int = 10**30) -> Fraction:
    """Certified rational upper bound on |z| (exact when z is real rational)."""
    if z.im == 0:
        return abs(z.re)
    n2 = z.norm2()
    v = math.isqrt((n2.numerator * scale * scale) // n2.denominator) + 1
    return Fraction(v, scale)


def convergence_check(family: str, args) -> tuple:
    """(inside, margin): strict-inequality domain test with rational margin."""
    args = [qg(a) for a in args]
    if family == "FA":
        s = sum((_abs_upper(a) for a in args), Fraction(0))
        return s < 1, 1 - s
    bound = max((_abs_upper(a) for a in args), default=Fraction(0))
    return bound < 1, 1 - bound


# ---------------------------------------------------------------------------
# direct summation oracle


def _domain_ratio(family: str, args_hp, prec: Prec):
    with gmpy2.local_context(prec.gctx()):
        if family == "FA":
            return sum((abs(a) for a in args_hp), gmpy2.mpfr(0))
        return max((abs(a) for a in args_hp), default=gmpy2.mpfr(0))


def _shell_indices(n: int, s: int):
    if n == 1:
        yield (s,)
    elif n == 2:
        for m1 in range(s + 1):
            yield (m1, s - m1)
    else:
        for m1 in range(s + 1):
            for m2 in range(s - m1 + 1):
                yield (m1, m2, s - m1 - m2)


def sum_series(family: str, n: int, params: dict, args, digits: int, prec: Prec,
               max_shells: int = 10000):
    """Theta-basis vector of the defining series at exact arguments.

    ``params`` are exact Fractions (epsilon already substituted), ``args``
    exact QGauss strictly inside the convergence domain with margin >= 1/4.
    Returns (list of mpc values ordered by the family basis, tail bound mpfr).
    """
    rat = annihilators(family, n)
    basis = theta_basis(family, n)
    with gmpy2.local_context(prec.gctx()):
        args_hp = [qg(a).to_hp(prec) for a in args]
        r = _domain_ratio(family, args_hp, prec)
        if r > gmpy2.mpfr(3) / 4:
            raise OracleDomainError(
                "arguments too close to the convergence boundary for the oracle",
                ratio=float(r),
            )
        zero_arg = [not qg(a) for a in args]
        comps = {J: gmpy2.mpc(0) for J in basis}
        comps[basis[0]] = gmpy2.mpc(1)
        target = gmpy2.exp10(-(digits + 5))
        prev = {tuple([0] * n): gmpy2.mpc(1)}
        shell_abs_prev = gmpy2.mpfr(1)
        small_streak = 0
        tail = gmpy2.mpfr(0)
        last_ratio = r
        for s in range(1, max_shells + 1):
            cur = {}
            shell_abs = gmpy2.mpfr(0)
            for m in _shell_indices(n, s):
                k = next(i for i in range(n) if m[i] > 0)
                if zero_arg[k]:
                    continue
                parent = list(m)
                parent[k] -= 1
                parent = tuple(parent)
                pt = prev.get(parent)
                if pt is None:
                    continue
                ratio = rat.ratio(params, k, parent)
                term = pt * (gmpy2.mpfr(ratio.numerator) / gmpy2.mpfr(ratio.denominator)) * args_hp[k]
                if term == 0:
                    continue
                cur[m] = term
                shell_abs += abs(term)
                for J in basis:
                    w = 1
                    for i in range(n):
                        if J[i]:
                            w *= m[i]
                    if w:
                        comps[J] += term if w == 1 else w * term
            if shell_abs_prev > 0 and shell_abs > 0:
                last_ratio = max(r, min(gmpy2.mpfr("0.97"), shell_abs / shell_abs_prev))
            if shell_abs <= target:
                small_streak += 1
                growth = gmpy2.mpfr(2) * (s + 4) ** n
                tail = shell_abs * last_ratio / (1 - last_ratio) * growth + shell_abs
                if small_streak >= 2 and tail <= target * growth:
                    break
            else:
                small_streak = 0
            if not cur:
                tail = gmpy2.mpfr(0)
                break
            prev = cur
            shell_abs_prev = shell_abs if shell_abs > 0 else shell_abs_prev
        else:
            raise OracleDomainError("series truncation limit exceeded", shells=max_shells)
        return [comps[J] for J in basis], tail


def sum_series_jets(family: str, n: int, params: dict, active, x_active, jet_order: int,
                    digits: int, prec: Prec):
    """Taylor jets of the basis vector in the inactive variables at 0.

    ``active`` lists the coordinate indices carrying nonzero (scaled)
    arguments ``x_active``; the remaining coordinates are expansion variables.
    Returns {jet multi-index b (over inactive coords, total order <= jet_order):
    (J vector, tail bound)} where entry b holds the t^b Taylor coefficient of
    J as a function of the inactive coordinates.
    """
    rat = annihilators(family, n)
    basis = theta_basis(family, n)
    inactive = [i for i in range(n) if i not in active]
    na = len(active)
    out = {}

    def blocks(order, length):
        if length == 0:
            yield ()
            return
        for lead in range(order + 1):
            for rest in blocks(order - lead, length - 1):
                yield (lead,) + rest

    with gmpy2.local_context(prec.gctx()):
        x_hp = [qg(a).to_hp(prec) for a in x_active]
        for b in blocks(jet_order, len(inactive)):
            if sum(b) > jet_order:
                continue
            # exact base coefficient A at (0 on active, b on inactive)
            base = Fraction(1)
            walk = [0] * n
            ok = True
            for pos, i in enumerate(inactive):
                for _ in range(b[pos]):
                    base *= rat.ratio(params, i, tuple(walk))
                    walk[i] += 1
            if not ok:
                continue
            fixed = tuple(walk)
            comps, tail = _jet_block_sum(
                rat, basis, params, n, active, x_hp, fixed, b, inactive, base, digits, prec
            )
            out[b] = (comps, tail)
    return out


def _jet_block_sum(rat, basis, params, n, active, x_hp, fixed, b, inactive, base,
                   digits, prec, max_shells: int = 10000):
    na = len(active)
    with gmpy2.local_context(prec.gctx()):
        base_hp = gmpy2.mpfr(base.numerator) / gmpy2.mpfr(base.denominator)
        if na:
            r = max(abs(x) for x in x_hp)
        else:
            r = gmpy2.mpfr(0)
        if r > gmpy2.mpfr(3) / 4:
            raise OracleDomainError("jet oracle outside its margin", ratio=float(r))
        zero_arg = [x == 0 for x in x_hp]
        comps = {J: gmpy2.mpc(0) for J in basis}
        target = gmpy2.exp10(-(digits + 5))

        def weight(J, m_act):
            w = 1
            for pos, i in enumerate(active):
                if J[i]:
                    w *= m_act[pos]
            for pos, i in enumerate(inactive):
                if J[i]:
                    w *= b[pos]
            return w

        def full_index(m_act):
            m = list(fixed)
            for pos, i in enumerate(active):
                m[i] += m_act[pos]
            return m

        prev = {tuple([0] * na): gmpy2.mpc(base_hp)}
        for J in basis:
            w = weight(J, tuple([0] * na))
            if w:
                comps[J] += w * prev[tuple([0] * na)]
        if na == 0:
            return [comps[J] for J in basis], gmpy2.mpfr(0)
        shell_abs_prev = abs(base_hp)
        small_streak = 0
        tail = gmpy2.mpfr(0)
        last_ratio = max(r, gmpy2.mpfr("0.1"))
        for s in range(1, max_shells + 1):
            cur = {}
            shell_abs = gmpy2.mpfr(0)
            for m_act in _shell_indices(na, s):
                kpos = next(i for i in range(na) if m_act[i] > 0)
                if zero_arg[kpos]:
                    continue
                parent = list(m_act)
                parent[kpos] -= 1
                parent = tuple(parent)
                pt = prev.get(parent)
                if pt is None:
                    continue
                ratio = rat.ratio(params, active[kpos], tuple(full_index(parent)))
                term = pt * (gmpy2.mpfr(ratio.numerator) / gmpy2.mpfr(ratio.denominator)) * x_hp[kpos]
                if term == 0:
                    continue
                cur[m_act] = term
                shell_abs += abs(term)
                full = full_index(m_act)
                for J in basis:
                    w = 1
                    for pos, i in enumerate(active):
                        if J[i]:
                            w *= full[i]
                    for pos, i in enumerate(inactive):
                        if J[i]:
                            w *= b[pos]
                    if w:
                        comps[J] += term if w == 1 else w * term
            if shell_abs_prev > 0 and shell_abs > 0:
                last_ratio = max(r, min(gmpy2.mpfr("0.97"), shell_abs / shell_abs_prev))
            if shell_abs <= target * max(abs(base_hp), gmpy2.mpfr(1)):
                small_streak += 1
                growth = gmpy2.mpfr(2) * (s + 4) ** n
                tail = shell_abs * last_ratio / (1 - last_ratio) * growth + shell_abs
                if small_streak >= 2:
                    break
            else:
                small_streak = 0
            if not cur:
                tail = gmpy2.mpfr(0)
                break
            prev = cur
            shell_abs_prev = shell_abs if shell_abs > 0 else shell_abs_prev
        else:
            raise OracleDomainError("jet series truncation limit exceeded")
        return [comps[J] for J in basis], tail
