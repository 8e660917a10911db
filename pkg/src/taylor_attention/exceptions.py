"""Exception types raised across the package."""

import numpy as np


class DomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


class ElementBudgetError(OverflowError):
    """A configuration would allocate more state elements than allowed."""

    def __init__(self, elements, budget):
        self.elements = elements
        self.budget = budget
        super().__init__(
            f"configuration needs {elements} state elements, budget is {budget}"
        )


class EmptyContextError(ValueError):
    """Attention was read before any token was accumulated."""


class DegenerateDenominatorError(ArithmeticError):
    """The truncated-kernel normalizer is too close to zero to divide by.

    ``numerator`` and ``denominator`` are kept for diagnosis.
    """

    def __init__(self, numerator, denominator, token_index=None, threshold=None):
        self.numerator = np.asarray(numerator)
        self.denominator = float(denominator)
        self.token_index = token_index
        self.threshold = threshold
        where = "" if token_index is None else f" at token {token_index}"
        super().__init__(
            f"degenerate denominator {self.denominator:.3e}{where}"
            + ("" if threshold is None else f" (guard {threshold:.3e})")
        )
