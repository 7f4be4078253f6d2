"""Local series solutions: generalized power series (with logs) at the
regular-singular leg origin, plain Taylor data at ordinary disk centers.

All recurrences run in denominator-cleared polynomial form, so the history
window has fixed length (the polynomial degrees) instead of growing with the
truncation order.  Resonant steps are solved through an exact rational
factorization of the singular ladder matrix; the numeric right-hand sides
only ever hit precomputed exact row operations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import gmpy2

from .errors import (
    FrobeniusStructureError,
    IrregularSingularityError,
    UnsupportedSpectrumError,
)
from .numkit.exact import QGauss, qg, QG_ZERO, SingularSolver, rational_eigenvalues
from .numkit.hp import Prec, to_complex, clog, cpow
from .numkit.poly import UPoly, URat
from .pathplan import LocalSystem

__all__ = [
    "LocalData",
    "ExponentStructure",
    "FrobeniusSolution",
    "local_data",
    "exponents",
    "frobenius_series",
    "taylor_fundamental",
    "taylor_series_vector",
    "choose_truncation",
]


def choose_truncation(q_ratio: float, digits: int) -> int:
    """Series length needed to push the geometric tail below 10^-digits."""
    if not 0 < q_ratio <= 0.75:
        q_ratio = 0.75
    return int(math.ceil(digits * math.log(10.0) / math.log(1.0 / q_ratio))) + 20


@dataclass
class LocalData:
    """Denominator-cleared expansion data at one point.

    At the leg origin (center 0, regular singular): t*qpoly(t) J' = apoly(t) J
    with qpoly(0) != 0.  At an ordinary center c: qpoly(u) J' = apoly(u) J in
    the local variable u = t - c.
    """

    dim: int
    center: QGauss
    qpoly: UPoly
    apoly: list
    kind: str  # "regular_singular" | "ordinary"
    A0: list  # exact residue matrix (zeros when ordinary)

    def bj(self, order: int):
        """Exact Taylor matrices B_j of the regular part R, j = 0..order-1."""
        out = [[[QG_ZERO] * self.dim for _ in range(self.dim)] for _ in range(order)]
        for r in range(self.dim):
            for c in range(self.dim):
                num = self.apoly[r][c]
                if num.is_zero():
                    continue
                if self.kind == "regular_singular":
                    # R = (A/qhat - A0)/t entrywise
                    shifted = num - self.qpoly * self.A0[r][c]
                    f = URat(shifted, self.qpoly * UPoly([0, 1]))
                    p, coeffs = f.laurent_at0(order + 1)
                    if p > 0:
                        raise IrregularSingularityError("regular part has a pole")
                    series = coeffs[:order]
                else:
                    f = URat(num, self.qpoly)
                    _p, series = f.laurent_at0(order)
                for j in range(min(order, len(series))):
                    out[j][r][c] = series[j]
        return out


def local_data(system: LocalSystem, center=None) -> LocalData:
    """Expansion data for a LocalSystem at t=0 or at an ordinary center."""
    m = system.dim
    if center is None or not qg(center):
        if system.v0 == 1:
            return LocalData(
                dim=m,
                center=QGauss(Fraction(0)),
                qpoly=system.qhat,
                apoly=[row[:] for row in system.apoly],
                kind="regular_singular",
                A0=system.residue_matrix(),
            )
        return LocalData(
            dim=m,
            center=QGauss(Fraction(0)),
            qpoly=system.qpoly,
            apoly=[row[:] for row in system.apoly],
            kind="ordinary",
            A0=[[QG_ZERO] * m for _ in range(m)],
        )
    c = qg(center)
    if system.qpoly.eval_qg(c) == QG_ZERO:
        raise IrregularSingularityError("expansion center is a singular point")
    q_c = system.qpoly.shifted(c)
    a_c = [[(a.shifted(c) if not a.is_zero() else a) for a in row] for row in system.apoly]
    return LocalData(
        dim=m,
        center=c,
        qpoly=q_c,
        apoly=a_c,
        kind="ordinary",
        A0=[[QG_ZERO] * m for _ in range(m)],
    )


# ---------------------------------------------------------------------------
# exponent structure


@dataclass(frozen=True)
class ResonanceClass:
    base: Fraction  # smallest exponent of the class
    offsets: tuple  # sorted integer offsets at which eigenvalues sit
    mults: tuple  # algebraic multiplicity per offset
    max_log: int  # highest log power allowed (class multiplicity - 1)

    @property
    def total(self) -> int:
        return sum(self.mults)


@dataclass(frozen=True)
class ExponentStructure:
    classes: tuple
    S: tuple  # base exponents, one per class

    @property
    def dim(self) -> int:
        return sum(c.total for c in self.classes)


def exponents(A0) -> ExponentStructure:
    """Group the (exact, rational) eigenvalues of A0 into integer-offset classes."""
    eigs = rational_eigenvalues(A0)
    if not eigs:
        raise UnsupportedSpectrumError("empty spectrum")
    counts = {}
    for e in eigs:
        counts[e] = counts.get(e, 0) + 1
    classes = []
    used = set()
    for lam in sorted(counts):
        if lam in used:
            continue
        members = sorted(mu for mu in counts if (mu - lam).denominator == 1 and mu >= lam)
        used.update(members)
        classes.append(
            ResonanceClass(
                base=lam,
                offsets=tuple(int(mu - lam) for mu in members),
                mults=tuple(counts[mu] for mu in members),
                max_log=sum(counts[mu] for mu in members) - 1,
            )
        )
    classes.sort(key=lambda c: c.base)
    return ExponentStructure(classes=tuple(classes), S=tuple(c.base for c in classes))


# ---------------------------------------------------------------------------
# small LU kit over gmpy2 mpc (plain lists)


def lu_factor(M):
    m = len(M)
    A = [row[:] for row in M]
    piv = list(range(m))
    for col in range(m):
        p = max(range(col, m), key=lambda r: abs(A[r][col]))
        if A[p][col] == 0:
            raise ZeroDivisionError("singular matrix in lu_factor")
        if p != col:
            A[col], A[p] = A[p], A[col]
            piv[col], piv[p] = piv[p], piv[col]
        inv = 1 / A[col][col]
        for r in range(col + 1, m):
            f = A[r][col] * inv
            A[r][col] = f
            if f != 0:
                for c in range(col + 1, m):
                    A[r][c] -= f * A[col][c]
    return A, piv


def lu_solve(fac, b):
    A, piv = fac
    m = len(A)
    x = [b[p] for p in piv]
    for r in range(1, m):
        s = x[r]
        for c in range(r):
            if A[r][c] != 0:
                s -= A[r][c] * x[c]
        x[r] = s
    for r in range(m - 1, -1, -1):
        s = x[r]
        for c in range(r + 1, m):
            if A[r][c] != 0:
                s -= A[r][c] * x[c]
        x[r] = s / A[r][r]
    return x


def _sparse_cols(poly_mat, prec: Prec):
    """Per power j: list of (row, col, coeff) over nonzero entries."""
    out = []
    j = 0
    while True:
        layer = []
        any_left = False
        for r, row in enumerate(poly_mat):
            for c, e in enumerate(row):
                if j < len(e.coeffs):
                    any_left = True
                    v = e.coeffs[j]
                    if v:
                        layer.append((r, c, v.to_hp(prec)))
        if not any_left:
            break
        out.append(layer)
        j += 1
    return out


# ---------------------------------------------------------------------------
# Frobenius construction


@dataclass
class FrobeniusColumn:
    birth: int  # order at which the column starts
    coeffs: list  # coeffs[k][n] = vector (list of mpc) or None below birth
    kmax: int  # highest log level currently populated


@dataclass
class SolvedClass:
    base: Fraction
    K: int
    columns: list  # FrobeniusColumn


@dataclass
class FrobeniusSolution:
    """Truncated local fundamental system at one expansion point."""

    dim: int
    center: QGauss
    kind: str
    N: int
    classes: list  # SolvedClass (a single log-free class when ordinary)

    @property
    def num_columns(self):
        return sum(len(c.columns) for c in self.classes)

    def column_exponents(self):
        out = []
        for cls in self.classes:
            out.extend([cls.base] * len(cls.columns))
        return out

    def evaluate_columns(self, t_offset, prec: Prec, side: int = -1):
        """All columns at displacement t from the expansion point.

        Returns (list of column vectors, max tail bound).  Powers and logs on
        the principal branch; the side prescription handles the negative real
        axis (the origin's own cut).
        """
        with gmpy2.local_context(prec.gctx()):
            t = to_complex(t_offset, prec)
            cols_out = []
            tail_total = gmpy2.mpfr(0)
            logt = None
            for cls in self.classes:
                if t == 0:
                    powl = gmpy2.mpc(1) if cls.base == 0 else gmpy2.mpc(0)
                else:
                    powl = cpow(t, Fraction(cls.base), prec, side) if cls.base else gmpy2.mpc(1)
                for col in cls.columns:
                    acc = [gmpy2.mpc(0)] * self.dim
                    tail = gmpy2.mpfr(0)
                    for k in range(col.kmax + 1):
                        series = col.coeffs[k]
                        s, tl = _horner_vec(series, t, self.dim, col.birth)
                        if k > 0:
                            if logt is None:
                                if t == 0:
                                    raise ZeroDivisionError(
                                        "log term evaluated at the expansion point"
                                    )
                                logt = clog(t, prec, side)
                            lp = logt ** k
                            s = [v * lp for v in s]
                            tl = tl * abs(lp)
                        acc = [a + v for a, v in zip(acc, s)]
                        tail += tl
                    cols_out.append([v * powl for v in acc])
                    tail_total = max(tail_total, tail * abs(powl))
            return cols_out, tail_total


def _horner_vec(series, t, dim, birth=0):
    """Vector Horner sum plus a geometric tail estimate from trailing terms."""
    acc = [gmpy2.mpc(0)] * dim
    for n in range(len(series) - 1, birth - 1, -1):
        vec = series[n]
        if vec is None:
            vec = _ZERO_CACHE.setdefault(dim, [gmpy2.mpc(0)] * dim)
        acc = [a * t + v for a, v in zip(acc, vec)]
    if birth:
        tb = t ** birth
        acc = [a * tb for a in acc]
    N = len(series) - 1
    if N - birth < 4 or t == 0:
        return acc, gmpy2.mpfr(0)
    at = abs(t)
    mags = []
    tpow = at ** (N - 4)
    for n in range(N - 4, N + 1):
        vec = series[n]
        m = max((abs(v) for v in vec), default=gmpy2.mpfr(0)) if vec else gmpy2.mpfr(0)
        mags.append(m * tpow)
        tpow *= at
    ratios = [mags[i + 1] / mags[i] for i in range(len(mags) - 1) if mags[i] > 0]
    r = max(ratios) if ratios else gmpy2.mpfr("0.5")
    r = min(r, gmpy2.mpfr("0.9"))
    nonzero = [m for m in mags if m > 0]
    top = max(nonzero) if nonzero else gmpy2.mpfr(0)
    tail = top * r / (1 - r)
    return acc, tail


_ZERO_CACHE = {}


def frobenius_series(data: LocalData, struct: ExponentStructure, N: int, prec: Prec,
                     sources=None, extra_logs: int = 0) -> FrobeniusSolution:
    """Construct the local solution ladder to order N at the singular origin.

    Homogeneous mode (sources None): returns the full fundamental system,
    one column per eigenvalue with multiplicity, log ladders as forced.

    Particular mode (sources given): returns a single zero-born column per
    class solving the inhomogeneous system with right-hand side
    ``sources(class_index, k, n) -> vector | None`` (already scaled
    consistently with data.qpoly clearing, i.e. the coefficient of the
    cleared equation).  No homogeneous columns are added.
    """
    if data.kind != "regular_singular":
        raise ValueError("frobenius_series expects the regular-singular origin")
    m = data.dim
    particular = sources is not None
    with gmpy2.local_context(prec.gctx()):
        qh = [c.to_hp(prec) for c in data.qpoly.coeffs]
        q_nonzero = [j for j in range(1, len(qh)) if qh[j] != 0]
        a_layers = _sparse_cols(data.apoly, prec)
        da = len(a_layers) - 1
        window = max(len(qh) - 1, da)
        q0inv = 1 / qh[0]
        A0h = [[a.to_hp(prec) for a in row] for row in data.A0]
        A0q = data.A0
        tol = gmpy2.exp10(-prec.digits + 12)
        zero_vec = [gmpy2.mpc(0)] * m
        classes_out = []
        for ci, cls in enumerate(struct.classes):
            K = cls.max_log + extra_logs
            lam = cls.base
            lam_h = to_complex(lam, prec)
            offsets = set(cls.offsets)
            columns = []
            if particular:
                col = FrobeniusColumn(
                    birth=0,
                    coeffs=[[None] * (N + 1) for _ in range(K + 1)],
                    kmax=K,
                )
                columns.append(col)

            def coeff_at(col, k, n):
                if k > K or n < col.birth or n < 0:
                    return None
                return col.coeffs[k][n]

            def history(col, k, n):
                """q0 * rhs of the cleared recurrence, minus the (k+1) same-n term.

                From q(t) (tJ') = A(t) J + S(t):
                [A_0 - q_0 (lam+n)] c_{n,k} = q_0 (k+1) c_{n,k+1}
                  + sum_{j>=1} q_j [(lam+n-j) c_{n-j,k} + (k+1) c_{n-j,k+1}]
                  - sum_{j>=1} A_j c_{n-j,k} - S_n-coefficient.
                """
                h = list(zero_vec)
                jmax = min(n - col.birth, window)
                for j in range(1, jmax + 1):
                    cj = coeff_at(col, k, n - j)
                    if cj is not None and j <= da:
                        for (r, c, v) in a_layers[j]:
                            if cj[c] != 0:
                                h[r] -= v * cj[c]
                for j in q_nonzero:
                    if j > n - col.birth:
                        continue
                    cj = coeff_at(col, k, n - j)
                    if cj is not None:
                        fac = (lam_h + (n - j)) * qh[j]
                        for r in range(m):
                            if cj[r] != 0:
                                h[r] += fac * cj[r]
                    cj1 = coeff_at(col, k + 1, n - j)
                    if cj1 is not None:
                        kq = (k + 1) * qh[j]
                        for r in range(m):
                            if cj1[r] != 0:
                                h[r] += kq * cj1[r]
                if particular:
                    src = sources(ci, k, n)
                    if src is not None:
                        h = [h[r] - src[r] for r in range(m)]
                return h

            for n in range(N + 1):
                resonant = n in offsets
                if not resonant:
                    Ln = [
                        [A0h[r][c] - ((lam_h + n) if r == c else 0) for c in range(m)]
                        for r in range(m)
                    ]
                    fac = lu_factor(Ln)
                    for col in columns:
                        if n < col.birth:
                            continue
                        top = K if particular else col.kmax
                        for k in range(K, top, -1):
                            col.coeffs[k][n] = None  # stays zero
                        for k in range(top, -1, -1):
                            rhs = history(col, k, n)
                            up = coeff_at(col, k + 1, n)
                            if up is not None:
                                kk = qh[0] * (k + 1)
                                rhs = [rhs[r] + kk * up[r] for r in range(m)]
                            rhs = [v * q0inv for v in rhs]
                            col.coeffs[k][n] = lu_solve(fac, rhs)
                else:
                    solver = _ladder_solver(A0q, lam + n, K, m)
                    for col in columns:
                        if n < col.birth:
                            continue
                        big = []
                        for k in range(0, K + 1):
                            h = history(col, k, n)
                            big.extend(v * q0inv for v in h)
                        y, defect = solver.solve(big, prec)
                        scale = max((abs(v) for v in big), default=gmpy2.mpfr(0))
                        if defect > tol * (1 + scale):
                            raise FrobeniusStructureError(
                                "resonant step inconsistent beyond tolerance",
                                order=n,
                                log_depth=K,
                                defect=float(defect),
                            )
                        for k in range(0, K + 1):
                            col.coeffs[k][n] = y[k * m:(k + 1) * m]
                        col.kmax = K
                    if not particular:
                        for null in solver.null_basis:
                            coeffs = [[None] * (N + 1) for _ in range(K + 1)]
                            kmax = 0
                            for k in range(K + 1):
                                vec = [null[k * m + r].to_hp(prec) for r in range(m)]
                                coeffs[k][n] = vec
                                if any(v != 0 for v in vec):
                                    kmax = k
                            columns.append(
                                FrobeniusColumn(birth=n, coeffs=coeffs, kmax=kmax)
                            )
            for col in columns:
                for k in range(len(col.coeffs)):
                    series = col.coeffs[k]
                    for n in range(col.birth, N + 1):
                        if series[n] is None:
                            series[n] = zero_vec[:]
            # tighten kmax to the truly populated depth
            for col in columns:
                km = 0
                for k in range(len(col.coeffs)):
                    if any(any(v != 0 for v in vec) for vec in col.coeffs[k][col.birth:]):
                        km = k
                col.kmax = km
            classes_out.append(SolvedClass(base=lam, K=K, columns=columns))
        return FrobeniusSolution(
            dim=m, center=data.center, kind="regular_singular", N=N, classes=classes_out
        )


_LADDER_CACHE = {}


def _matrix_key(A):
    return tuple(tuple((e.re, e.im) for e in row) for row in A)


def _ladder_solver(A0q, shift: Fraction, K: int, m: int) -> SingularSolver:
    """Exact factorization of the block ladder at a resonant offset.

    Block row k encodes (A0 - shift) c_k - (k+1) c_{k+1} = rhs_k, k = 0..K.
    """
    key = (_matrix_key(A0q), Fraction(shift), K)
    got = _LADDER_CACHE.get(key)
    if got is not None:
        return got
    sh = qg(shift)
    size = m * (K + 1)
    big = [[QG_ZERO] * size for _ in range(size)]
    for k in range(K + 1):
        for r in range(m):
            for c in range(m):
                big[k * m + r][k * m + c] = A0q[r][c] - (sh if r == c else QG_ZERO)
            if k + 1 <= K:
                big[k * m + r][(k + 1) * m + r] = qg(-(k + 1))
    solver = SingularSolver(big)
    if len(_LADDER_CACHE) > 256:
        _LADDER_CACHE.clear()
    _LADDER_CACHE[key] = solver
    return solver


def taylor_fundamental(data: LocalData, N: int, prec: Prec) -> FrobeniusSolution:
    """Fundamental matrix U with U(center) = I at an ordinary point."""
    if data.kind != "ordinary":
        raise ValueError("taylor_fundamental expects an ordinary point")
    m = data.dim
    cols = []
    with gmpy2.local_context(prec.gctx()):
        for i in range(m):
            seed = [gmpy2.mpc(1) if r == i else gmpy2.mpc(0) for r in range(m)]
            series = taylor_series_vector(data, seed, N, prec)
            cols.append(FrobeniusColumn(birth=0, coeffs=[series], kmax=0))
    cls = SolvedClass(base=Fraction(0), K=0, columns=cols)
    return FrobeniusSolution(
        dim=m, center=data.center, kind="ordinary", N=N, classes=[cls]
    )


def taylor_series_vector(data: LocalData, seed, N: int, prec: Prec, source_series=None):
    """Taylor coefficients of the solution with value ``seed`` at the center.

    q(u) J' = A(u) J + S(u) with optional source series S (list of vectors in
    the same cleared normalization).  Fixed-length recurrence:
    q0 (n+1) c_{n+1} = sum_j A_j c_{n-j} - sum_{j>=1} q_j (n+1-j) c_{n+1-j} + S_n.
    """
    if data.kind != "ordinary":
        raise ValueError("taylor_series_vector expects an ordinary point")
    m = data.dim
    with gmpy2.local_context(prec.gctx()):
        qh = [c.to_hp(prec) for c in data.qpoly.coeffs]
        q_nonzero = [j for j in range(1, len(qh)) if qh[j] != 0]
        a_layers = _sparse_cols(data.apoly, prec)
        da = len(a_layers) - 1
        q0inv = 1 / qh[0]
        out = [list(seed)]
        for n in range(N):
            rhs = [gmpy2.mpc(0)] * m
            for j in range(0, min(n, da) + 1):
                cj = out[n - j]
                for (r, c, v) in a_layers[j]:
                    if cj[c] != 0:
                        rhs[r] += v * cj[c]
            for j in q_nonzero:
                if j > n + 1:
                    continue
                fac = qh[j] * (n + 1 - j)
                if fac != 0:
                    prevv = out[n + 1 - j]
                    for r in range(m):
                        if prevv[r] != 0:
                            rhs[r] -= fac * prevv[r]
            if source_series is not None and n < len(source_series):
                sv = source_series[n]
                if sv is not None:
                    rhs = [rhs[r] + sv[r] for r in range(m)]
            inv = q0inv / (n + 1)
            out.append([v * inv for v in rhs])
        return out
