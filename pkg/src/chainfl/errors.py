"""Exception types raised across the package."""


class ChainFLError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ChainFLError, ValueError):
    pass


class TrainingDivergedError(ChainFLError, ArithmeticError):
    def __init__(self, step: int, message: str = "non-finite loss or gradient"):
        super().__init__(f"{message} at step {step}")
        self.step = step


class EmptyAggregationError(ChainFLError):
    """Every submission in the round was flagged; nothing to aggregate."""


class MiningFailedError(ChainFLError):
    pass


class VerificationPendingError(ChainFLError):
    """A submission's record has not been mined yet."""


class NoEligibleClientsError(ChainFLError):
    pass


class InsufficientClientsError(ChainFLError):
    pass


class RunawaySimulationError(ChainFLError):
    pass


class ConfigError(ChainFLError, ValueError):
    pass
