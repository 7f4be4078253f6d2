"""Arbitrary-precision complex arithmetic on top of gmpy2.

Working precision is carried by an explicit :class:`Prec` context object and
threaded through every operation; nothing here depends on module-global
mutable state.  Values are gmpy2 ``mpfr``/``mpc`` instances, immutable and
safe to share between workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import gmpy2

from ..errors import IllConditionedError

__all__ = [
    "Prec",
    "to_real",
    "to_complex",
    "cabs",
    "clog",
    "cpow",
    "linsolve",
    "rationalize",
]

_LN10_LN2 = math.log(10.0) / math.log(2.0)


@dataclass(frozen=True)
class Prec:
    """Decimal working precision plus the derived gmpy2 context."""

    digits: int
    guard_bits: int = 16

    @property
    def bits(self) -> int:
        return int(math.ceil(self.digits * _LN10_LN2)) + self.guard_bits

    def gctx(self):
        return gmpy2.context(
            precision=self.bits,
            allow_complex=True,
            trap_overflow=True,
            trap_divzero=True,
            trap_invalid=True,
        )

    def activate(self):
        """Install this context for the current thread and return it."""
        ctx = self.gctx()
        gmpy2.set_context(ctx)
        return ctx

    def eps(self, offset: int = 0):
        """10**(-digits + offset) as an mpfr at this precision."""
        with gmpy2.local_context(self.gctx()):
            return gmpy2.exp10(-self.digits + offset)

    def bumped(self, factor: float = 1.5) -> "Prec":
        return Prec(int(math.ceil(self.digits * factor)), self.guard_bits)


def to_real(x, prec: Prec):
    """Embed int/Fraction/float/str/mpfr as mpfr at working precision."""
    with gmpy2.local_context(prec.gctx()):
        if isinstance(x, Fraction):
            return gmpy2.mpfr(x.numerator) / gmpy2.mpfr(x.denominator)
        return gmpy2.mpfr(x)


def to_complex(x, prec: Prec, imag=None):
    """Embed a real/complex scalar (or exact re/im pair) as mpc."""
    with gmpy2.local_context(prec.gctx()):
        if imag is not None:
            return gmpy2.mpc(to_real(x, prec), to_real(imag, prec))
        if isinstance(x, gmpy2.mpc):
            return gmpy2.mpc(x)
        if isinstance(x, complex):
            return gmpy2.mpc(gmpy2.mpfr(x.real), gmpy2.mpfr(x.imag))
        re, im = _exact_parts(x)
        if im == 0:
            return gmpy2.mpc(to_real(re, prec))
        return gmpy2.mpc(to_real(re, prec), to_real(im, prec))


def _exact_parts(x):
    re = getattr(x, "re", None)
    im = getattr(x, "im", None)
    if re is not None and im is not None and not isinstance(x, gmpy2.mpc):
        return re, im
    return x, 0


def cabs(z, prec: Prec):
    with gmpy2.local_context(prec.gctx()):
        return abs(to_complex(z, prec))


def clog(z, prec: Prec, side: int = -1):
    """Principal log; points exactly on the cut (-inf, 0] take the `side` limit.

    ``side=-1`` gives log(x - i0) = ln|x| - i*pi for x < 0, ``side=+1`` the
    conjugate.  Off the cut the side is irrelevant.
    """
    with gmpy2.local_context(prec.gctx()):
        z = to_complex(z, prec)
        re, im = z.real, z.imag
        if im == 0 and re < 0:
            z = gmpy2.mpc(re, gmpy2.mpfr("-0.0" if side < 0 else "0.0"))
        return gmpy2.log(z)


def cpow(z, lam, prec: Prec, side: int = -1):
    """z**lam via exp(lam*log z) with the cut-side convention of clog."""
    with gmpy2.local_context(prec.gctx()):
        lam = to_complex(lam, prec)
        if lam == 0:
            return gmpy2.mpc(1)
        z = to_complex(z, prec)
        if z == 0:
            raise ZeroDivisionError("0 raised to a general exponent")
        return gmpy2.exp(lam * clog(z, prec, side))


def linsolve(A, b, prec: Prec):
    """Solve A x = b by Gaussian elimination with partial pivoting.

    A is a list of row lists, b a list; entries anything `to_complex` accepts.
    Raises IllConditionedError when a pivot falls below 10^(-digits/2) times
    the largest matrix entry.
    """
    with gmpy2.local_context(prec.gctx()):
        m = len(A)
        M = [[to_complex(A[i][j], prec) for j in range(m)] for i in range(m)]
        x = [to_complex(bi, prec) for bi in b]
        if any(len(row) != m for row in A) or len(b) != m:
            raise ValueError("linsolve needs a square system")
        anorm = max((abs(M[i][j]) for i in range(m) for j in range(m)), default=gmpy2.mpfr(0))
        tiny = gmpy2.exp10(-(prec.digits // 2)) * (anorm if anorm > 0 else gmpy2.mpfr(1))
        for col in range(m):
            piv = max(range(col, m), key=lambda r: abs(M[r][col]))
            if abs(M[piv][col]) <= tiny:
                raise IllConditionedError(
                    "pivot below conditioning threshold",
                    pivot=float(abs(M[piv][col])),
                    threshold=float(tiny),
                )
            if piv != col:
                M[col], M[piv] = M[piv], M[col]
                x[col], x[piv] = x[piv], x[col]
            inv = 1 / M[col][col]
            for r in range(col + 1, m):
                f = M[r][col] * inv
                if f == 0:
                    continue
                for c in range(col + 1, m):
                    M[r][c] -= f * M[col][c]
                x[r] -= f * x[col]
        for col in range(m - 1, -1, -1):
            s = x[col]
            row = M[col]
            for c in range(col + 1, m):
                s -= row[c] * x[c]
            x[col] = s / row[col]
        return x


def mat_vec(A, v, prec: Prec):
    with gmpy2.local_context(prec.gctx()):
        return [sum((A[i][j] * v[j] for j in range(len(v))), gmpy2.mpc(0)) for i in range(len(A))]


def residual_norm(A, x, b, prec: Prec):
    with gmpy2.local_context(prec.gctx()):
        Ax = mat_vec(A, x, prec)
        return max(abs(Ax[i] - b[i]) for i in range(len(b)))


def rationalize(z, denom_bound: int, prec: Prec):
    """Recover the Gaussian rational with denominators <= denom_bound nearest z.

    Returns a (Fraction, Fraction) pair (re, im) when one lies within
    10^(-digits/2) of z, else None.
    """
    if denom_bound < 1:
        raise ValueError("denom_bound must be >= 1")
    with gmpy2.local_context(prec.gctx()):
        z = gmpy2.mpc(z)
        parts = []
        for part in (z.real, z.imag):
            num, den = part.as_integer_ratio()
            parts.append(Fraction(int(num), int(den)).limit_denominator(denom_bound))
        tol = gmpy2.exp10(-(prec.digits // 2))
        err = gmpy2.hypot(
            z.real - to_real(parts[0], prec),
            z.imag - to_real(parts[1], prec),
        )
        if err <= tol:
            return parts[0], parts[1]
        return None
