from typing import Optional


class SAVQAError(Exception):
    """Base class for every error raised by the package"""


class DimensionError(SAVQAError):
    pass


class DomainError(SAVQAError):
    pass


class DeterminismError(SAVQAError):
    pass


class GradientError(SAVQAError):
    pass


class GraphValidationError(SAVQAError):
    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message)
        self.index = index


class EmptyGraphError(GraphValidationError):
    pass


class ConfigError(SAVQAError):
    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class DataFormatError(SAVQAError):
    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        location = []
        if line is not None:
            location.append(f"line {line}")
        if field is not None:
            location.append(f"field '{field}'")
        super().__init__(f"{message} ({', '.join(location)})" if location else message)
        self.line = line
        self.field = field


class VocabularyError(SAVQAError):
    pass


class UnknownVariantError(SAVQAError):
    pass
