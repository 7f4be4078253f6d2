"""Exception hierarchy shared across the package.

Every error carries a short machine-readable ``code`` so the CLI can map
failures to exit codes and structured JSON without string matching.
"""


class HyperfrobError(Exception):
    code = "internal"

    def __init__(self, message, **info):
        super().__init__(message)
        self.info = info


class UsageError(HyperfrobError):
    code = "usage"


class MathDomainError(HyperfrobError):
    """Requests the mathematics cannot support (singular endpoints, bad specs)."""

    code = "math-domain"


class SingularEndpointError(MathDomainError):
    code = "singular-endpoint"


class OracleDomainError(MathDomainError):
    """Series summation asked for outside its guaranteed-margin domain."""

    code = "oracle-domain"


class DegenerateParametersError(MathDomainError):
    code = "degenerate-parameters"


class RootFindingError(HyperfrobError):
    code = "root-finding"


class IllConditionedError(HyperfrobError):
    code = "ill-conditioned"


class ClosureFailureError(HyperfrobError):
    """The theta-rewrite system did not close onto the basis."""

    code = "closure-failure"


class DerivationBugError(HyperfrobError):
    """Internal consistency check (flatness, residuals) failed hard."""

    code = "derivation-bug"


class IrregularSingularityError(HyperfrobError):
    code = "irregular-singularity"


class UnsupportedSpectrumError(HyperfrobError):
    code = "unsupported-spectrum"


class FrobeniusStructureError(HyperfrobError):
    code = "frobenius-structure"


class ContinuationPathError(HyperfrobError):
    """No disk path found between expansion origin and endpoint."""

    code = "no-continuation-path"


class PrecisionShortfallError(HyperfrobError):
    code = "precision-shortfall"
