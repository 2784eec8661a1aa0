"""Exception hierarchy."""


class BreathScanError(Exception):
    pass


class ConfigError(BreathScanError, ValueError):
    pass


class ValidationError(BreathScanError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConsistencyError(BreathScanError, ValueError):
    pass


class FormatError(BreathScanError):
    pass


class UnsupportedCodecError(FormatError):
    pass


class TrainingAbort(BreathScanError, RuntimeError):
    """Raised when training diverges (non-finite loss)."""
