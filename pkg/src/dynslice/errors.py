"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DynSliceError(Exception):
    code = "error"
    exit_code = 1


class PreconditionError(DynSliceError, ValueError):
    code = "precondition"
    exit_code = 5


class NumericalError(DynSliceError, ArithmeticError):
    code = "numerical"
    exit_code = 7


class FormatError(DynSliceError):
    code = "format"
    exit_code = 3


class ScheduleError(DynSliceError, ValueError):
    code = "schedule"
    exit_code = 4


class TrainingError(DynSliceError):
    code = "training"
    exit_code = 6

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class TransformError(DynSliceError):
    code = "transform"
    exit_code = 8


class TaskError(DynSliceError, ValueError):
    code = "task"
    exit_code = 9

    def __init__(self, message, item_index=None):
        super().__init__(message)
        self.item_index = item_index


class SelectionError(DynSliceError):
    code = "selection"
    exit_code = 10
