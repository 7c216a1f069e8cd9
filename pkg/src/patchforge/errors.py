"""Exception types shared across the package."""


class PatchforgeError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(PatchforgeError, ValueError):
    pass


class ConfigurationError(PatchforgeError, ValueError):
    pass


class RangeMisconfigurationError(ConfigurationError):
    """Too many views of a transformation grid hide the patch."""


class ContractViolationError(PatchforgeError, ValueError):
    pass


class DegenerateViewError(PatchforgeError):
    """The camera sits inside scene geometry."""


class NumericalFailureError(PatchforgeError, FloatingPointError):
    pass


class TrainingFailureError(NumericalFailureError):
    pass


class DegenerateVarianceError(PatchforgeError, ZeroDivisionError):
    pass


class CorruptInputError(PatchforgeError, ValueError):
    pass


class MissingArtifactError(PatchforgeError, FileNotFoundError):
    """A pipeline stage needs the output of an earlier stage that does not exist."""
