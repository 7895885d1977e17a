"""Exception hierarchy shared by every module.

The CLI maps :class:`ValidationError` subclasses to exit status 1 and
:class:`TransportError` subclasses to exit status 2.
"""
from __future__ import annotations


class WardError(Exception):
    pass


class ValidationError(WardError, ValueError):
    pass


class SchemaError(ValidationError):
    def __init__(self, column: str, source: str = ""):
        self.column = column
        where = f" in {source}" if source else ""
        super().__init__(f"missing required column {column!r}{where}")


class NotFoundError(ValidationError, LookupError):
    pass


class ConfigurationError(ValidationError):
    pass


class ContractError(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class EmptyContextError(ValidationError):
    pass


class EmptyIndexError(ValidationError):
    pass


class GenerationError(WardError):
    pass


class StagedFailureError(GenerationError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage} stage failed: {cause}")


class TransportError(WardError):
    pass


class ServerError(TransportError):
    def __init__(self, status: int, body: str, url: str = ""):
        self.status = status
        self.body_excerpt = body[:200]
        super().__init__(f"server returned {status} for {url}: {self.body_excerpt}")
