#!/usr/bin/env python3
"""
Error Types
===========

Two failure families are distinguished throughout the toolkit:

- InputError: bad or missing input (files, flags, configuration, data that
  violates a precondition). The CLI maps it to exit code 2.
- ModelError: a numerical or model failure (degenerate Monte Carlo
  estimates, non positive-definite Hessian, all optimizer starts failed).
  The CLI maps it to exit code 1.
"""

from typing import Optional


class InputError(ValueError):
    """Invalid input or configuration"""


class ModelError(RuntimeError):
    """Numerical or model failure"""

    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        if step is not None:
            message = f"step t={step}: {message}"
        super().__init__(message)
