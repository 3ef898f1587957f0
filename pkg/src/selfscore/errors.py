"""Exception hierarchy shared across the package."""


class SelfScoreError(Exception):
    """Base class for all package errors."""


# ingest
class EmptyRatings(SelfScoreError, ValueError):
    pass


class ParseError(SelfScoreError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateId(SelfScoreError, ValueError):
    def __init__(self, image_id: str, line: int | None = None):
        self.image_id = image_id
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"duplicate image_id {image_id!r}{where}")


class MissingField(SelfScoreError, ValueError):
    def __init__(self, field: str, line: int | None = None):
        self.field = field
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}missing field {field!r}")


# score codec
class TooFewSamples(SelfScoreError, ValueError):
    pass


class DegenerateDesign(SelfScoreError, ValueError):
    pass


# prompting
class BinOutOfRange(SelfScoreError, ValueError):
    pass


class FormatError(SelfScoreError, ValueError):
    pass


# backend
class BackendFailure(SelfScoreError, RuntimeError):
    pass


class ContextOverflow(SelfScoreError, ValueError):
    pass


class TokenizationError(SelfScoreError, ValueError):
    pass


class ShapeMismatch(SelfScoreError, ValueError):
    pass


class NoAdapterAttached(SelfScoreError, RuntimeError):
    pass


# preference data
class EmptyAllowedSet(SelfScoreError, ValueError):
    pass


class GenerationFormatError(FormatError):
    pass


# training
class DatasetSchemaError(SelfScoreError, ValueError):
    pass


class NonFiniteLoss(SelfScoreError, FloatingPointError):
    pass


# merging
class SchemaMismatch(ShapeMismatch):
    pass


# evaluation
class DegenerateVariance(SelfScoreError, ValueError):
    pass


class JudgeFormatError(SelfScoreError, ValueError):
    pass


class ProviderError(SelfScoreError, RuntimeError):
    pass


class AllFailed(SelfScoreError, RuntimeError):
    pass


# pipeline
class ConfigError(SelfScoreError, ValueError):
    pass
