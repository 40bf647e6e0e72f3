# Copyright (c) the ratechange authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

"""Exceptions raised by the library. Each one carries the exit code used by the CLI."""

import typing as tp


class RateChangeError(Exception):
    exit_code: int = 1


class ModelError(RateChangeError, ValueError):
    """Malformed model, or a model violating absolute continuity."""
    exit_code = 2


class DomainError(RateChangeError, ValueError):
    exit_code = 2


class BudgetError(RateChangeError, RuntimeError):
    """The rejection sampler ran out of attempts.

    Args:
        attempts (int): number of proposals drawn.
        accepted (int): number of accepted proposals (blocks for the segmented sampler).
        estimate (float or None): running estimate of the acceptance probability, the
            mean of `A / C` over the proposals. Used instead of `accepted / attempts`
            when given.
    """
    exit_code = 3

    def __init__(self, message: str, attempts: int, accepted: int = 0, estimate: tp.Optional[float] = None):
        super().__init__(message)
        self.attempts = attempts
        self.accepted = accepted
        self.estimate = estimate

    @property
    def acceptance_rate(self) -> float:
        if self.estimate is not None:
            return self.estimate
        return self.accepted / max(1, self.attempts)


class BoundViolation(RateChangeError, RuntimeError):
    """An observed weight went above the bound certified by the caller."""
    exit_code = 3

    def __init__(self, message: str, value: float, bound: float):
        super().__init__(message)
        self.value = value
        self.bound = bound


class DegenerateFilter(RateChangeError, RuntimeError):
    exit_code = 4

    def __init__(self, message: str, snapshot: tp.Optional[tp.List[float]] = None):
        super().__init__(message)
        self.snapshot = snapshot or []


class NumericalError(RateChangeError, ArithmeticError):
    exit_code = 4


class UsageError(RateChangeError, ValueError):
    exit_code = 5
