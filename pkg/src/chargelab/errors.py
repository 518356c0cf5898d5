"""Exception hierarchy shared by all modules."""


class ChargeLabError(Exception):
    pass


class InvalidInputError(ChargeLabError, ValueError):
    pass


class WrongClassError(ChargeLabError, ValueError):
    """Operation called on a domain with an unsupported boundary class."""


class InfeasibleError(ChargeLabError, ValueError):
    """Boundary data admits no admissible candidate."""


class DomainError(ChargeLabError, ValueError):
    """Evaluation point or sub-box outside the domain."""


class PreconditionError(ChargeLabError, ValueError):
    pass


class ConsistencyError(ChargeLabError, RuntimeError):
    pass


class ConvergenceError(ChargeLabError, RuntimeError):
    def __init__(self, message: str, residual: float = float("nan"), iterations: int = 0):
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations


class ConfigError(ChargeLabError, ValueError):
    pass


class EstimationError(ChargeLabError, RuntimeError):
    pass


class NotFoundError(ChargeLabError, LookupError):
    pass
