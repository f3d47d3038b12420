"""Exception hierarchy shared across the package.

Every error carries a ``context`` dict with machine-readable details
(row/column indices, parcel ids, file positions) so callers can report
precisely what went wrong. The CLI maps exception classes to exit codes.
"""


class CropCateError(Exception):
    """Base class for all structured errors raised by this package."""

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = context


class ValidationError(CropCateError):
    """Invalid in-memory inputs: NaN values, empty arrays, bad parameters."""


class SchemaError(CropCateError):
    """Malformed input file or config: wrong header, unparseable field, unknown key."""


class GeometryError(CropCateError):
    """Degenerate parcel polygon (zero area, self-intersection, too few vertices)."""


class SingleClassError(CropCateError):
    """A classification target contains only one class."""


class NoOverlapError(CropCateError):
    """Propensity trimming removed every row; no overlap region remains."""


class RankDeficientError(CropCateError):
    """Final-stage design matrix is rank deficient; context lists collinear columns."""
