"""Exact Gaussian-rational scalars and dense linear algebra over them.

This is the layer every resonance/exponent decision runs through: all of it
is exact Fraction arithmetic, no floating point.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import gmpy2

from ..errors import UnsupportedSpectrumError
from .hp import Prec, to_complex

__all__ = ["QGauss", "QG_ZERO", "QG_ONE", "qg", "charpoly", "rref", "nullspace", "SingularSolver", "rational_eigenvalues"]


@dataclass(frozen=True)
class QGauss:
    """Gaussian rational re + im*i with canonical Fraction parts."""

    re: Fraction
    im: Fraction = Fraction(0)

    def __post_init__(self):
        if not isinstance(self.re, Fraction):
            object.__setattr__(self, "re", Fraction(self.re))
        if not isinstance(self.im, Fraction):
            object.__setattr__(self, "im", Fraction(self.im))

    def __add__(self, other):
        other = qg(other)
        return QGauss(self.re + other.re, self.im + other.im)

    __radd__ = __add__

    def __neg__(self):
        return QGauss(-self.re, -self.im)

    def __sub__(self, other):
        return self + (-qg(other))

    def __rsub__(self, other):
        return qg(other) + (-self)

    def __mul__(self, other):
        other = qg(other)
        return QGauss(
            self.re * other.re - self.im * other.im,
            self.re * other.im + self.im * other.re,
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = qg(other)
        n2 = other.re * other.re + other.im * other.im
        if n2 == 0:
            raise ZeroDivisionError("division by zero QGauss")
        return QGauss(
            (self.re * other.re + self.im * other.im) / n2,
            (self.im * other.re - self.re * other.im) / n2,
        )

    def __rtruediv__(self, other):
        return qg(other) / self

    def __pow__(self, n: int):
        if n < 0:
            return QG_ONE / self ** (-n)
        out, base = QG_ONE, self
        while n:
            if n & 1:
                out = out * base
            base = base * base
            n >>= 1
        return out

    def __bool__(self):
        return bool(self.re or self.im)

    def __eq__(self, other):
        try:
            other = qg(other)
        except TypeError:
            return NotImplemented
        return self.re == other.re and self.im == other.im

    def __hash__(self):
        return hash((self.re, self.im))

    def conj(self):
        return QGauss(self.re, -self.im)

    def norm2(self) -> Fraction:
        return self.re * self.re + self.im * self.im

    @property
    def is_rational(self) -> bool:
        return self.im == 0

    def as_fraction(self) -> Fraction:
        if self.im != 0:
            raise ValueError("not a rational value")
        return self.re

    def to_hp(self, prec: Prec):
        return to_complex(self.re, prec, self.im)

    def __repr__(self):
        if self.im == 0:
            return f"{self.re}"
        return f"({self.re}{'+' if self.im >= 0 else ''}{self.im}*I)"


def qg(x) -> QGauss:
    """Coerce int/Fraction/QGauss (or (re, im) pair) to QGauss."""
    if isinstance(x, QGauss):
        return x
    if isinstance(x, (int, Fraction)):
        return QGauss(Fraction(x))
    if isinstance(x, tuple) and len(x) == 2:
        return QGauss(Fraction(x[0]), Fraction(x[1]))
    raise TypeError(f"cannot coerce {type(x).__name__} to QGauss")


QG_ZERO = QGauss(Fraction(0))
QG_ONE = QGauss(Fraction(1))


def mat_mul(A, B):
    n, k, m = len(A), len(B), len(B[0])
    return [
        [sum((A[i][t] * B[t][j] for t in range(k)), QG_ZERO) for j in range(m)]
        for i in range(n)
    ]


def mat_sub(A, B):
    return [[A[i][j] - B[i][j] for j in range(len(A[0]))] for i in range(len(A))]


def identity(n):
    return [[QG_ONE if i == j else QG_ZERO for j in range(n)] for i in range(n)]


def charpoly(A):
    """Characteristic polynomial det(lambda*I - A), exact, by Faddeev-LeVerrier.

    Returns coefficients [c0, c1, ..., cn] with cn = 1, ascending powers.
    """
    n = len(A)
    coeffs = [QG_ZERO] * (n + 1)
    coeffs[n] = QG_ONE
    M = identity(n)
    c = QG_ZERO
    for k in range(1, n + 1):
        if k > 1:
            for i in range(n):
                M[i][i] = M[i][i] + c
        M = mat_mul(A, M)
        tr = sum((M[i][i] for i in range(n)), QG_ZERO)
        c = -tr / k
        coeffs[n - k] = c
    return coeffs


def poly_eval_qg(coeffs, x: QGauss) -> QGauss:
    acc = QG_ZERO
    for c in reversed(coeffs):
        acc = acc * x + c
    return acc


def poly_deflate_qg(coeffs, root: QGauss):
    """Exact synthetic division by (x - root); remainder must be zero."""
    out = [QG_ZERO] * (len(coeffs) - 1)
    acc = QG_ZERO
    for i in range(len(coeffs) - 1, 0, -1):
        acc = acc * root + coeffs[i]
        out[i - 1] = acc
    rem = acc * root + coeffs[0]
    return out, rem


def rational_eigenvalues(A, denom_bound: int = 10**24):
    """All eigenvalues of a QGauss matrix, required to be rational.

    Numeric hints (double precision via an HP companion-free refinement is
    overkill here; matrix sizes are tiny) are rationalized and then verified
    exactly against the characteristic polynomial; exact deflation keeps
    multiplicities honest.  Raises UnsupportedSpectrumError when a root
    resists exact rational identification.
    """
    coeffs = charpoly(A)
    from .poly import UPoly  # local import to avoid a cycle
    from .roots import poly_roots

    prec = Prec(80)
    # exact squarefree part first: Aberth converges quadratically on it
    p = UPoly(coeffs)
    g = p.gcd(p.derivative())
    sqfree = p.divmod(g)[0] if g.degree > 0 else p
    hp_coeffs = [c.to_hp(prec) for c in sqfree.coeffs]
    candidates = []
    for r, _rad in poly_roots(hp_coeffs, prec):
        if abs(float(r.imag)) > 1e-12:
            continue
        num, den = r.real.as_integer_ratio()
        cand = Fraction(int(num), int(den)).limit_denominator(denom_bound)
        if cand not in candidates:
            candidates.append(cand)
    eigs = []
    work = list(coeffs)
    for cand in candidates:
        cq = QGauss(cand)
        while len(work) > 1 and poly_eval_qg(work, cq) == QG_ZERO:
            work, rem = poly_deflate_qg(work, cq)
            if rem != QG_ZERO:
                raise UnsupportedSpectrumError("exact deflation failed")
            eigs.append(cand)
    if len(work) > 1:
        raise UnsupportedSpectrumError(
            "irrational or unidentifiable eigenvalue",
            charpoly=[str(c) for c in coeffs],
        )
    return sorted(eigs)


def rref(M):
    """Reduced row echelon form with full bookkeeping.

    Returns (R, pivots, E) where E @ M = R exactly and pivots is the list of
    pivot column indices (one per nonzero row of R).
    """
    if not M:
        return [], [], []
    rows, cols = len(M), len(M[0])
    R = [row[:] for row in M]
    E = identity(rows)
    pivots = []
    r = 0
    for c in range(cols):
        piv = None
        best = None
        for i in range(r, rows):
            if R[i][c]:
                n2 = R[i][c].norm2()
                if best is None or n2 > best:
                    best, piv = n2, i
        if piv is None:
            continue
        R[r], R[piv] = R[piv], R[r]
        E[r], E[piv] = E[piv], E[r]
        inv = QG_ONE / R[r][c]
        R[r] = [v * inv for v in R[r]]
        E[r] = [v * inv for v in E[r]]
        for i in range(rows):
            if i != r and R[i][c]:
                f = R[i][c]
                R[i] = [R[i][j] - f * R[r][j] for j in range(cols)]
                E[i] = [E[i][j] - f * E[r][j] for j in range(rows)]
        pivots.append(c)
        r += 1
        if r == rows:
            break
    return R, pivots, E


def nullspace(M):
    """Exact basis of the right nullspace of a QGauss matrix."""
    if not M:
        return []
    cols = len(M[0])
    R, pivots, _E = rref(M)
    free = [c for c in range(cols) if c not in pivots]
    basis = []
    for fc in free:
        v = [QG_ZERO] * cols
        v[fc] = QG_ONE
        for r, pc in enumerate(pivots):
            v[pc] = -R[r][fc]
        basis.append(v)
    return basis


class SingularSolver:
    """Exact factorization of a (possibly singular) square QGauss system.

    Precomputes the rref transform so that numeric right-hand sides can be
    solved repeatedly: pivot variables from the transformed rhs, free
    variables zero, plus the consistency defect on the rank-deficient rows.
    """

    def __init__(self, M):
        self.n = len(M)
        R, pivots, E = rref(M)
        self.pivots = pivots
        self.E = E
        self.R = R
        self.rank = len(pivots)
        self.zero_rows = list(range(self.rank, self.n))
        self.null_basis = nullspace(M)
        self._hp_cache = {}

    def _embedded(self, prec: Prec):
        key = prec.bits
        got = self._hp_cache.get(key)
        if got is None:
            got = [[e.to_hp(prec) for e in row] for row in self.E]
            # rows of R restricted to non-pivot columns, for back substitution
            self._hp_cache[key] = got
        return got

    def solve(self, rhs, prec: Prec):
        """Particular solution (free vars = 0) and consistency residual norm."""
        Ehp = self._embedded(prec)
        with gmpy2.local_context(prec.gctx()):
            h = [sum((Ehp[i][j] * rhs[j] for j in range(self.n)), gmpy2.mpc(0)) for i in range(self.n)]
            x = [gmpy2.mpc(0)] * self.n
            for r, pc in enumerate(self.pivots):
                x[pc] = h[r]
            defect = gmpy2.mpfr(0)
            for r in self.zero_rows:
                defect = max(defect, abs(h[r]))
        return x, defect
