class SalforgeError(Exception):
    pass


class DimensionError(SalforgeError, ValueError):
    """Array shapes are incompatible."""


class ConfigError(SalforgeError, ValueError):
    pass


class StateError(SalforgeError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class MissingResourceError(SalforgeError, FileNotFoundError):
    pass


class ValidationError(SalforgeError, ValueError):
    pass


class ParseError(SalforgeError, ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
