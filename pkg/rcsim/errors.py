from typing import Optional


class RCSimError(Exception):
    """Base class for simulator errors"""


class ConfigError(RCSimError):
    """Raised when a scenario or setting cannot be used as given"""

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        self.field = field
        self.line = line
        location = []
        if field:
            location.append(f"field {field}")
        if line is not None:
            location.append(f"line {line}")
        suffix = f" ({', '.join(location)})" if location else ""
        super().__init__(f"{message}{suffix}")


class LogicError(RCSimError):
    """Raised when the engine is driven in a way it cannot honor"""


class EmptyInput(RCSimError):
    """Raised when a Merkle tree is requested over no leaves"""


class CertificateError(RCSimError):
    """Raised when a certificate is structurally unusable"""


class StateTransferRefused(RCSimError):
    """Raised when transferred state fails certificate verification"""

    def __init__(self, message: str, cycle: Optional[int] = None):
        self.cycle = cycle
        super().__init__(message)
