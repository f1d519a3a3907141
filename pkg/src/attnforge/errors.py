"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class DegenerateRowError(ValueError):
    """A softmax row where every entry is masked to -inf."""


class ContractError(RuntimeError):
    """An operation was called outside its documented preconditions."""


class FormulaInapplicableError(ValueError):
    """A closed-form parameter count evaluates to a non-integer."""
