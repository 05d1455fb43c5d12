"""Exception types raised by the slowfast package."""


class SlowFastError(ValueError):
    """Base class for domain errors."""


class NegativeOffDiagonal(SlowFastError):
    def __init__(self, i, j, value):
        self.i, self.j, self.value = i, j, value
        super().__init__(f"off-diagonal entry ({i}, {j}) is negative: {value!r}")


class RowSumNonzero(SlowFastError):
    def __init__(self, i, value):
        self.i, self.value = i, value
        super().__init__(f"row {i} sums to {value!r}, expected 0")


class NotIrreducible(SlowFastError):
    pass


class NotCentered(SlowFastError):
    def __init__(self, l, value):
        self.l, self.value = l, value
        super().__init__(f"column {l} of K has mu-average {value!r}, expected 0")


class SingularSystem(SlowFastError):
    pass


class StepTooSmall(SlowFastError):
    pass


class EpsilonOutOfRange(SlowFastError):
    pass


class HorizonNegative(SlowFastError):
    pass


class UnknownModel(SlowFastError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown model"


class NotSymmetric(SlowFastError):
    pass


class NotPositiveSemidefinite(SlowFastError):
    pass


class NonFiniteState(SlowFastError):
    def __init__(self, time):
        self.time = time
        super().__init__(f"non-finite slow state at t={time!r}")


class InsufficientSignal(SlowFastError):
    def __init__(self, eps_list):
        self.eps_list = list(eps_list)
        super().__init__(
            f"weak error not above 2 standard errors at eps={self.eps_list}"
        )
