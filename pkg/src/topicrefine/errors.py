"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes (2 for configuration, 3 for data,
4 for numerical failures).
"""


class TopicRefineError(Exception):
    """Base class for all package errors."""


class ConfigError(TopicRefineError, ValueError):
    """Invalid hyperparameters, flags or incompatible settings."""


class ContractError(TopicRefineError, ValueError):
    """A function was called with arguments violating its contract."""


class DataError(TopicRefineError, ValueError):
    """Corpus content failed validation."""


class SchemaError(DataError):
    """Corpus file does not follow the JSON schema."""

    def __init__(self, message, dialogue_index=None, field=None):
        self.dialogue_index = dialogue_index
        self.field = field
        where = []
        if dialogue_index is not None:
            where.append(f"dialogue {dialogue_index}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class NumericalError(TopicRefineError, FloatingPointError):
    """A loss or parameter became non-finite during training."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)
