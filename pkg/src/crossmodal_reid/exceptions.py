"""Exception hierarchy shared by every module of the package."""


class ReIDError(Exception):
    """Base class for all package errors."""


class DimensionError(ReIDError, ValueError):
    """Operands have incompatible shapes."""


class ParameterError(ReIDError, ValueError):
    """An argument is outside its valid range."""


class DomainError(ReIDError, ValueError):
    """An input value lies outside the domain of a function."""


class NumericError(ReIDError, ArithmeticError):
    """A computation produced NaN or Inf."""


class BatchStructureError(ReIDError, ValueError):
    """A tuple batch is missing a role or modality."""


class DatasetError(ReIDError, ValueError):
    """A dataset cannot serve the requested operation."""


class ParseError(ReIDError, ValueError):
    """A text file does not follow its documented format.

    ``line`` is the 1-based line number of the offending line when known.
    """

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class ProtocolError(ReIDError, ValueError):
    """A retrieval protocol cannot be evaluated as requested."""


class TrainingError(ReIDError, RuntimeError):
    """Training hit a non-finite loss or gradient."""
