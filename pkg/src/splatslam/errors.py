class ContractViolation(ValueError):
    """A caller broke an operation's precondition."""


class DatasetError(RuntimeError):
    pass


class EvaluationError(RuntimeError):
    pass


class TrackingLost(RuntimeError):
    """Nothing of the map is visible from the pose being optimized."""
