class DriftGuardError(Exception):
    """Base class for every error raised by the simulator."""


class ConfigurationError(DriftGuardError, ValueError):
    pass


class PolicyError(DriftGuardError):
    pass


class ProtocolError(DriftGuardError):
    pass


class UnknownBankError(DriftGuardError, KeyError):
    def __str__(self):
        # KeyError quotes its argument, keep the message readable
        return str(self.args[0]) if self.args else ''


class BankConflictError(DriftGuardError):
    pass


class LoadError(DriftGuardError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        if line is not None:
            message = f"{path}:{line}: {message}"
        super().__init__(message)
