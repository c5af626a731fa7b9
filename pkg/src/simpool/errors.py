# src/simpool/errors.py
"""
Exceptions raised by the simulator.

Modelled outcomes (a CCB rejection, a dropped UDP update, a stale claim) are
not errors: they are reported through counters and return values.
"""
from __future__ import annotations

from typing import Sequence


class SimpoolError(Exception):
    """Base class for every error raised by simpool."""


# ---------------------------------------------------------------------
# Kernel
# ---------------------------------------------------------------------
class SchedulingInPast(SimpoolError):
    def __init__(self, fire_at: int, clock: int):
        super().__init__(f"cannot schedule at t={fire_at} ms, clock is already t={clock} ms")
        self.fire_at = fire_at
        self.clock = clock


class InvalidParameter(SimpoolError, ValueError):
    pass


# ---------------------------------------------------------------------
# Pool model
# ---------------------------------------------------------------------
class CapacityExceeded(SimpoolError):
    pass


class SlotNotClaimed(SimpoolError):
    pass


class RequirementsMismatch(SimpoolError):
    pass


class NotRunning(SimpoolError):
    pass


class NotIdle(SimpoolError):
    pass


class ProviderInactive(SimpoolError):
    pass


class InvariantViolation(SimpoolError, AssertionError):
    pass


# ---------------------------------------------------------------------
# Configuration and I/O
# ---------------------------------------------------------------------
class ConfigError(SimpoolError, ValueError):
    pass


class ConfigParseError(ConfigError):
    pass


class ConfigValidationError(ConfigError):
    def __init__(self, path: str, reason: str):
        super().__init__(f"{path or '/'}: {reason}")
        self.path = path
        self.reason = reason


class SimpoolIOError(SimpoolError, OSError):
    pass


class AssertionFailure(SimpoolError):
    """A library scenario finished but some of its expectations did not hold."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        lines = "\n".join(f"  - {v}" for v in self.violations)
        super().__init__(f"{len(self.violations)} expectation(s) failed:\n{lines}")
