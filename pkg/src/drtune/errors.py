"""Exception hierarchy. Every error carries a ``context`` dict for logs and CLI output."""


class DrtuneError(Exception):
    def __init__(self, message: str, **context):
        super().__init__(message)
        self.context = context

    def __str__(self) -> str:
        base = super().__str__()
        if not self.context:
            return base
        extra = ", ".join(f"{k}={v}" for k, v in self.context.items())
        return f"{base} ({extra})"


class ShapeError(DrtuneError, ValueError):
    pass


class DivisionByZero(DrtuneError, ZeroDivisionError):
    pass


class DomainError(DrtuneError, ValueError):
    """Argument outside the operation's valid range (time step, schedule, k, class id)."""


class NonFiniteError(DrtuneError, FloatingPointError):
    """NaN/Inf in a loss, reward or gradient."""


class CheckpointError(DrtuneError):
    pass


class ConfigError(DrtuneError):
    pass
