"""Arbitrary-precision, exact-rational, polynomial and linear-algebra kit."""

from .hp import Prec, to_real, to_complex, cabs, clog, cpow, linsolve, rationalize
from .exact import QGauss, qg, QG_ZERO, QG_ONE, charpoly, rref, nullspace, SingularSolver, rational_eigenvalues
from .poly import MPoly, UPoly, URat
from .roots import poly_roots, distinct_roots

__all__ = [
    "Prec",
    "to_real",
    "to_complex",
    "cabs",
    "clog",
    "cpow",
    "linsolve",
    "rationalize",
    "QGauss",
    "qg",
    "QG_ZERO",
    "QG_ONE",
    "charpoly",
    "rref",
    "nullspace",
    "SingularSolver",
    "rational_eigenvalues",
    "MPoly",
    "UPoly",
    "URat",
    "poly_roots",
    "distinct_roots",
]
