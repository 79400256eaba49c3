"""Exception types shared across the simulator."""


class FedsimError(Exception):
    """Base class for all simulator errors."""


class ConfigurationError(FedsimError):
    """Invalid or mutually inconsistent configuration, including dimension mismatches."""


class FormatError(FedsimError):
    """Malformed binary payload (IDX file or quantized wire format)."""


class LengthError(FormatError):
    """Payload length does not match what its header implies."""


class SizingError(FedsimError):
    """A partitioning request cannot be honored by the available samples."""


class ConvergenceError(FedsimError):
    """An iterative solver exhausted its iteration budget."""


class NumericalError(FedsimError):
    """Non-finite values encountered during training."""


class ConfigParseError(ConfigurationError):
    """A config file line could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line
