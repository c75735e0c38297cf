"""Exception hierarchy.

Each family maps to one CLI exit code (see ``doczsl.cli``).
"""


class DocZSLError(Exception):
    exit_code = 1


class ConfigError(DocZSLError, ValueError):
    exit_code = 2


class FormatError(DocZSLError, ValueError):
    """Malformed input file or record."""

    exit_code = 3


class ParseError(FormatError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class IntegrityError(FormatError):
    pass


class EmptyDocumentError(FormatError):
    def __init__(self, class_id, detail="no usable tokens"):
        self.class_id = class_id
        super().__init__(f"document for class {class_id!r} is empty: {detail}")


class ValidationError(DocZSLError, ValueError):
    """Dataset or split contents violate an invariant."""

    exit_code = 4


class ProtocolError(DocZSLError, ValueError):
    """Evaluation protocol precondition violated."""

    exit_code = 4


class DimensionError(DocZSLError, ValueError):
    exit_code = 4


class GraphError(DocZSLError, RuntimeError):
    exit_code = 4


class DivergenceError(DocZSLError, FloatingPointError):
    """Training produced a non-finite loss or gradient.

    ``last_good`` carries the best parameters seen before the failure, if any.
    """

    exit_code = 5

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
