"""Exception hierarchy shared across the package."""


class MeshUDAError(Exception):
    pass


class ShapeError(MeshUDAError, ValueError):
    pass


class NumericError(MeshUDAError, ArithmeticError):
    pass


class DegenerateSegmentError(MeshUDAError, ValueError):
    pass


class EmptyInputError(MeshUDAError, ValueError):
    pass


class SolverError(MeshUDAError, RuntimeError):
    def __init__(self, message, params=None):
        super().__init__(message if params is None else f"{message} (params={params})")
        self.params = params


class InsufficientDataError(MeshUDAError, ValueError):
    pass


class InsufficientBatchError(MeshUDAError, ValueError):
    pass


class EstimationError(MeshUDAError, ValueError):
    pass


class SelectionError(MeshUDAError, ValueError):
    pass


class PolicyError(MeshUDAError, PermissionError):
    """Raised when oracle-only data is requested from a non-oracle context."""


class FieldSchemaError(MeshUDAError, ValueError):
    pass


class DegenerateFieldError(MeshUDAError, ValueError):
    pass


class ConfigError(MeshUDAError, ValueError):
    pass


class FormatError(MeshUDAError, ValueError):
    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} at byte offset {offset}")
        self.offset = offset


class OutputExistsError(MeshUDAError, FileExistsError):
    pass


class UnstableRunError(MeshUDAError, ArithmeticError):
    pass
