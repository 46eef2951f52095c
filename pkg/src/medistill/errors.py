class MedistillError(Exception):
    """Base class for every error raised by the package."""


class ContractError(MedistillError):
    """A precondition of an operation was violated."""


class ShapeError(MedistillError, ValueError):
    pass


class ConfigurationError(MedistillError):
    """The model or run configuration cannot support the requested operation."""


class CapacityError(MedistillError):
    pass


class IntegrityError(MedistillError):
    """A persisted file is truncated, corrupted, or of an unsupported version."""


class DivergenceError(MedistillError):
    pass
