"""Exception types shared across the package."""


class EquiprecError(Exception):
    pass


class ContractError(EquiprecError, ValueError):
    """A documented precondition or interface contract was violated."""


class DimensionError(EquiprecError, ValueError):
    pass


class DomainError(EquiprecError, ValueError):
    """Input outside the mathematical domain of an operation."""


class ConfigurationError(EquiprecError, ValueError):
    pass


class ParseError(EquiprecError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class IntegrationAbort(EquiprecError, RuntimeError):
    def __init__(self, message, step=None, max_force=None):
        self.step = step
        self.max_force = max_force
        super().__init__(message)


class SetupError(EquiprecError, RuntimeError):
    pass
