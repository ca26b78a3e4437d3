"""Exception types shared across the package."""


class SparseRegError(Exception):
    """Base class for package errors."""


class EmptyCloud(SparseRegError, ValueError):
    pass


class BadFactor(SparseRegError, ValueError):
    pass


class TooFewPoints(SparseRegError, ValueError):
    pass


class DegenerateGeometry(SparseRegError, ArithmeticError):
    """Correspondence covariance is rank deficient (e.g. collinear matches)."""


class ZeroQuaternion(SparseRegError, ArithmeticError):
    """Raw quaternion output too small to normalize."""


class ShapeMismatch(SparseRegError, ValueError):
    pass


class EmptyDataset(SparseRegError, ValueError):
    pass


class IndexMismatch(SparseRegError, ValueError):
    pass


class MissingCheckpoint(SparseRegError, FileNotFoundError):
    pass


class CorruptDataset(SparseRegError, ValueError):
    pass


class ConfigMismatch(SparseRegError, ValueError):
    pass
