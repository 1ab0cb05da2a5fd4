"""Exception hierarchy shared by all modules."""


class IndifieldError(Exception):
    """Base class; ``module`` tags the subsystem that raised."""

    module = "core"


class InvalidArgument(IndifieldError, ValueError):
    pass


class EmptyInput(InvalidArgument):
    pass


class DegenerateInput(InvalidArgument):
    pass


class EmptyScene(DegenerateInput):
    module = "scanner"


class EmptyMesh(EmptyInput):
    module = "metrics"


class UndefinedDistanceField(InvalidArgument):
    module = "metrics"


class ParseError(IndifieldError):
    module = "io"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IoError(IndifieldError, OSError):
    module = "io"


class CheckpointError(IndifieldError):
    module = "siren"


class NumericalError(IndifieldError, ArithmeticError):
    module = "train"
