class SublabError(Exception):
    """Base class for every error raised by sublab."""


class InputError(SublabError, ValueError):
    """A precondition on the inputs of an operation does not hold."""


class StencilError(SublabError):
    """The 2-d cross-derivative stencil is not diagonally dominant at some node."""

    def __init__(self, message: str, node: tuple, control: int):
        super().__init__(message)
        self.node = node
        self.control = control


class UnsupportedError(SublabError):
    """The requested operation is not available for this scenario."""
