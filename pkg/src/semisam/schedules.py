"""Consistency-weight ramps and the stepwise learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

W_BASE = 0.1
RAMP_RATE = 5.0


def _check_t(t, t_max):
    if t_max <= 0:
        raise ValueError(f"t_max must be positive, got {t_max}")
    if not 0 <= t <= t_max:
        raise ValueError(f"iteration {t} outside [0, {t_max}]")


def lambda_c(t: float, t_max: float, w_base: float = W_BASE) -> float:
    """Ramp-up weight of the teacher-consistency term."""
    _check_t(t, t_max)
    return w_base * math.exp(-RAMP_RATE * (1.0 - t / t_max))


def lambda_s(t: float, t_max: float, w_base: float = W_BASE) -> float:
    """Ramp-down weight of the oracle-consistency term."""
    _check_t(t, t_max)
    return w_base * math.exp(-RAMP_RATE * (t / t_max))


@dataclass(frozen=True)
class RampSchedule:
    kind: str
    t_max: int
    w_base: float = W_BASE

    def __post_init__(self):
        if self.kind not in ("ramp_up", "ramp_down"):
            raise ValueError(f"unknown ramp kind {self.kind!r}")
        if self.t_max <= 0 or self.w_base <= 0:
            raise ValueError("t_max and w_base must be positive")

    def __call__(self, t: float) -> float:
        fn = lambda_c if self.kind == "ramp_up" else lambda_s
        return fn(t, self.t_max, self.w_base)


@dataclass(frozen=True)
class LrSchedule:
    lr0: float = 0.01
    decay_every: int = 2500
    decay_factor: float = 10.0

    def __post_init__(self):
        if self.lr0 <= 0 or self.decay_every <= 0 or self.decay_factor <= 0:
            raise ValueError("learning-rate schedule parameters must be positive")

    def __call__(self, t: int) -> float:
        return learning_rate(t, self.lr0, self.decay_every, self.decay_factor)


def learning_rate(t: int, lr0: float = 0.01, decay_every: int = 2500, decay_factor: float = 10.0) -> float:
    if t < 0:
        raise ValueError(f"iteration must be non-negative, got {t}")
    # divide rather than multiply by a negative power so 0.01 / 10 == 0.001 exactly
    return lr0 / decay_factor ** (int(t) // decay_every)
