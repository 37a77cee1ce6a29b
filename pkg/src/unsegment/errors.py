"""Exception types shared across the package."""


class DimensionError(ValueError):
    pass


class RankError(ValueError):
    pass


class DegenerateNormError(ValueError):
    pass


class SizeError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class PromptError(ValueError):
    pass


class PlacementError(RuntimeError):
    pass


class FormatError(ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
