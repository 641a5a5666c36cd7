"""Exception hierarchy shared by every module."""
from contextlib import contextmanager


class ContractError(ValueError):
    """An argument violates an operation's precondition."""


class ShapeError(ContractError):
    def __init__(self, primitive, shapes, detail=""):
        self.primitive = primitive
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{primitive}: incompatible shapes {list(self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericOverflowError(ArithmeticError):
    """A primitive produced NaN or Inf."""

    def __init__(self, op, detail=""):
        self.op = op
        super().__init__(f"non-finite value produced by {op}" + (f": {detail}" if detail else ""))


class TapeReuseError(RuntimeError):
    pass


class DeterminismError(RuntimeError):
    """A checkpointed segment replayed to a different value."""


class SingularityError(ArithmeticError):
    pass


class NumericAbort(NumericOverflowError):
    """Training stopped because the loss (or an op computing it) became non-finite."""

    def __init__(self, step, value, op="loss"):
        self.step = step
        self.value = value
        self.op = op
        ArithmeticError.__init__(self, f"non-finite {op} value {value!r} at step {step}")


class ConfigValidationError(ContractError):
    pass


class DependencyError(FileNotFoundError):
    pass


@contextmanager
def abort_on_overflow(step):
    """Re-raise an op overflow inside a training step as NumericAbort carrying the step."""
    try:
        yield
    except NumericAbort:
        raise
    except NumericOverflowError as exc:
        raise NumericAbort(step, float("nan"), exc.op) from exc
