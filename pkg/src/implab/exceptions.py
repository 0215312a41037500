class ImplabError(Exception):
    """Base class for all errors raised by implab."""


class DimensionError(ImplabError, ValueError):
    pass


class NonFiniteError(ImplabError, FloatingPointError):
    def __init__(self, message, layer=None, step=None):
        super().__init__(message)
        self.layer = layer
        self.step = step


class ConfigurationError(ImplabError, ValueError):
    pass


class FormatError(ImplabError, ValueError):
    """A file does not match the expected binary or CSV layout."""
