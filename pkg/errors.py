"""
kafforge - Error Types
======================
Every failure the library reports is one of these, so the CLI can map it to an
exit code without inspecting messages.
"""


class KafForgeError(Exception):
    """Base class for all kafforge errors"""


class DomainError(KafForgeError, ValueError):
    """Argument outside the operation's domain (bad shape, size, range)"""


class NumericError(KafForgeError, ArithmeticError):
    """Singular solve or non-finite value during computation"""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class FormatError(KafForgeError):
    """Malformed binary container (ICRD dataset, KAFW1 checkpoint)"""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ParseError(KafForgeError):
    """Malformed text input (CSV dataset)"""

    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ConfigError(KafForgeError):
    """Invalid run configuration"""

    def __init__(self, message, line=None, field=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(f"{prefix}{message}")
        self.line = line
        self.field = field
