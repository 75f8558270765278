"""
Exception types raised by the laboratory.

Library modules raise these; the CLI layer turns them into a logged error
and a non-zero exit status.
"""


class MopSanError(Exception):
    """Base class for every error raised on purpose by this package."""


class ShapeMismatchError(MopSanError, ValueError):
    def __init__(self, op: str, node_index: int, detail: str):
        self.op = op
        self.node_index = node_index
        super().__init__(f"shape mismatch in '{op}' (node {node_index}): {detail}")


class UnboundInputError(MopSanError, KeyError):
    def __init__(self, name: str, owner: str):
        self.name = name
        super().__init__(f"input '{name}' of {owner} is not bound")

    def __str__(self):
        return self.args[0]


class NonFiniteError(MopSanError, ValueError):
    pass


class NonFiniteLossError(NonFiniteError):
    def __init__(self, what: str, stats: dict):
        self.stats = stats
        details = ", ".join(f"{k}={v}" for k, v in stats.items())
        super().__init__(f"non-finite {what}; batch statistics: {details}")


class LayoutParseError(MopSanError, ValueError):
    def __init__(self, message: str, row: int = None, column: int = None):
        self.row = row
        self.column = column
        where = f" (row {row}, column {column})" if row is not None else ""
        super().__init__(f"{message}{where}")


class DegenerateFeatureError(MopSanError, ValueError):
    pass


class CholeskyError(MopSanError, ValueError):
    pass


class CheckpointError(MopSanError, ValueError):
    def __init__(self, message: str, field: str = None):
        self.field = field
        super().__init__(message if field is None else f"{message} [field: {field}]")


class ConfigError(MopSanError, ValueError):
    pass


class InvalidAxisError(MopSanError, ValueError):
    pass


class EpisodeOverError(MopSanError, RuntimeError):
    pass
