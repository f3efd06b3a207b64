"""Exception hierarchy.  Everything raised on purpose derives from StreamPrivError."""


class StreamPrivError(ValueError):
    pass


class QueryFormatError(StreamPrivError):
    """A query / config / record text block could not be parsed."""


class BucketTypeError(StreamPrivError, TypeError):
    pass


class UndefinedEstimatorError(StreamPrivError):
    pass


class UndefinedLossError(StreamPrivError):
    pass


class InfiniteEpsilonError(StreamPrivError):
    pass


class BudgetRequiresSamplingError(StreamPrivError):
    pass


class BudgetUnachievableError(StreamPrivError):
    def __init__(self, message: str, max_epsilon: float):
        super().__init__(message)
        self.max_epsilon = max_epsilon


class InsufficientSampleError(StreamPrivError):
    pass


class MalformedShareError(StreamPrivError):
    pass


class MissingSharesError(StreamPrivError):
    def __init__(self, message: str, missing: list[int]):
        super().__init__(message)
        self.missing = missing


class CorruptMessageError(StreamPrivError):
    pass


class BackpressureError(StreamPrivError):
    """Relay buffer is full; the caller may retry later."""

    retryable = True


class DuplicateQueryError(StreamPrivError):
    pass


class ScenarioError(StreamPrivError):
    pass
