"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class InvalidState(RuntimeError):
    pass


class ProtocolExhausted(RuntimeError):
    """Raised when a controller is asked to act after it already answered."""


class SchemaViolation(ValueError):
    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class JudgeError(RuntimeError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, log: list | None = None):
        super().__init__(message)
        self.log = log or []
