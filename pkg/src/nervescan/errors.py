class NerveScanError(Exception):
    """Base class for errors raised by this package."""


class InvalidInputError(NerveScanError, ValueError):
    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ShapeError(NerveScanError, ValueError):
    pass


class DegenerateSnakeError(NerveScanError):
    pass


class GenerationError(NerveScanError):
    pass
