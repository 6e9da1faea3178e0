"""Exception hierarchy.

Every error carries the CLI exit code it maps to, so the command layer can
translate failures without a lookup table.
"""


class FeaturedexError(Exception):
    exit_code = 2


# -- I/O and parsing (exit 2) -------------------------------------------------

class IoFailure(FeaturedexError):
    exit_code = 2


class TruncatedError(FeaturedexError):
    exit_code = 2


class MalformedError(FeaturedexError):
    exit_code = 2

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class BadMagicError(FeaturedexError):
    exit_code = 2


class VersionUnsupportedError(FeaturedexError):
    exit_code = 2


class NonFiniteError(FeaturedexError):
    exit_code = 2


class EmptyMeshError(FeaturedexError):
    exit_code = 2


# -- configuration / dimensions (exit 3) ---------------------------------------

class InvalidParamsError(FeaturedexError):
    exit_code = 3


class DegenerateError(FeaturedexError):
    exit_code = 3


class MismatchedRowsError(FeaturedexError):
    exit_code = 3


class EmptyDomainError(FeaturedexError):
    exit_code = 3


class ShapeMismatchError(FeaturedexError):
    exit_code = 3


class DimensionMismatchError(FeaturedexError):
    exit_code = 3


class DuplicateIdError(FeaturedexError):
    exit_code = 3


class ProvenanceMismatchError(FeaturedexError):
    exit_code = 3


class EmptySplitError(FeaturedexError):
    exit_code = 3


class EmptyTestSetError(FeaturedexError):
    exit_code = 3


# -- numeric failures (exit 4) -------------------------------------------------

class ZeroAreaError(FeaturedexError):
    exit_code = 4


class DivergenceError(FeaturedexError):
    exit_code = 4
