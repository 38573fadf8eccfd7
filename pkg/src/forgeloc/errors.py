"""Exception types raised across the package."""


class ForgelocError(Exception):
    pass


class DimensionError(ForgelocError, ValueError):
    """Input tensors have the wrong rank, channel count or spatial size."""


class DegenerateInputError(ForgelocError, ValueError):
    pass


class ValidationError(ForgelocError, ValueError):
    pass


class ConfigError(ForgelocError, ValueError):
    pass


class LabelingError(ForgelocError, ValueError):
    """A contrastive batch contains a patch without any positive partner."""


class GeometryError(ForgelocError, ValueError):
    pass


class NonFiniteLossError(ForgelocError, RuntimeError):
    def __init__(self, message, *, step=None, batch_id=None, snapshot=None):
        super().__init__(message)
        self.step = step
        self.batch_id = batch_id
        self.snapshot = snapshot or {}


class MissingPrerequisiteError(ForgelocError, FileNotFoundError):
    pass
