"""Shared exception types."""


class DomainError(ValueError):
    """An argument is outside an operation's documented domain."""


class SchemaError(ValueError):
    """Structured input (JSON, query string) violates its schema."""
