"""Exception hierarchy shared across the package.

Each error carries an ``exit_code`` so the command line can map failures onto
its stable contract (2 usage/config, 3 data, 4 numerical).
"""


class TextMotionError(Exception):
    exit_code = 1


class UsageError(TextMotionError):
    exit_code = 2


class ConfigMismatch(UsageError):
    pass


class BadArgument(UsageError, ValueError):
    pass


class DataError(TextMotionError):
    exit_code = 3


class LayoutError(DataError, ValueError):
    pass


class ParseError(DataError, ValueError):
    pass


class BadSpec(DataError, ValueError):
    pass


class BadCorpus(DataError, ValueError):
    pass


class EmptyCorpus(DataError, ValueError):
    pass


class TooShort(DataError, ValueError):
    pass


class TooFewSamples(DataError, ValueError):
    pass


class ShapeMismatch(DataError, ValueError):
    pass


class NumericalError(TextMotionError, ArithmeticError):
    exit_code = 4


class DegenerateRotation(NumericalError):
    pass


class BadTimestep(NumericalError, ValueError):
    pass


class NonFiniteActivation(NumericalError):
    pass


class NonFiniteGradient(NumericalError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ModelError(NumericalError):
    pass
