"""Exception hierarchy shared by all refexp modules.

Every error carries a short machine-readable ``category`` that the CLI
prints and maps to an exit code.
"""


class RefexpError(Exception):
    category = "error"
    exit_code = 1


class DimensionError(RefexpError, ValueError):
    category = "dimension"


class DomainError(RefexpError, ValueError):
    category = "domain"


class NumericError(RefexpError, ArithmeticError):
    category = "numeric"
    exit_code = 4


class MissingFeatureError(RefexpError, KeyError):
    category = "missing-feature"
    exit_code = 3

    def __str__(self):
        return Exception.__str__(self)


class IntegrityError(RefexpError):
    category = "integrity"
    exit_code = 3


class AnnotationIntegrityError(IntegrityError):
    category = "annotation-integrity"


class FeatureIntegrityError(IntegrityError):
    category = "feature-integrity"


class CheckpointIntegrityError(IntegrityError):
    category = "checkpoint-integrity"


class ParseError(IntegrityError):
    category = "parse"
