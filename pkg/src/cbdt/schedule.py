"""Regularisation schedules for the variance (lam) and ATE (alpha) weights.

dynamic: lam <- lam * exp(-eta * Var(grad_mse)),  alpha <- alpha * exp(-eta' * Var(grad_mse))
decay:   lam_k = lam_0 / sqrt(k),  alpha_k = alpha_0 / sqrt(k)   (k = 1 at the first round)
static:  unchanged
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Literal

from .errors import NumericalDomainError, ValidationError

FLOOR = 1e-8


@dataclass(frozen=True)
class ScheduleRecord:
    k: int
    grad_variance: float
    lam: float
    alpha: float
    floored: bool = False


@dataclass(frozen=True)
class SchedulerState:
    """``lam``/``alpha`` are the values in force for the next round.

    A weight configured as exactly 0 stays 0; the floor only keeps positive
    weights from decaying to zero.
    """

    lam: float = 1.0
    alpha: float = 1.0
    eta: float = 0.1
    eta_prime: float | None = None
    mode: Literal["dynamic", "decay", "static"] = "dynamic"
    k: int = 0
    lam0: float | None = None
    alpha0: float | None = None
    floor: float = FLOOR
    _log: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        if self.mode not in ("dynamic", "decay", "static"):
            raise ValidationError(
                f"scheduler.mode must be one of dynamic, decay, static; got {self.mode!r}")
        for name in ("lam", "alpha", "eta"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValidationError(f"scheduler.{name} must be finite and >= 0")
        if self.eta_prime is None:
            object.__setattr__(self, "eta_prime", self.eta)
        if self.lam0 is None:
            object.__setattr__(self, "lam0", self.lam)
        if self.alpha0 is None:
            object.__setattr__(self, "alpha0", self.alpha)
        if len(self._log) < self.k:
            raise ValidationError("history length must equal k")

    @property
    def history(self) -> list[ScheduleRecord]:
        return self._log[: self.k]


def step(state: SchedulerState, grad_variance: float) -> SchedulerState:
    if not math.isfinite(grad_variance):
        raise NumericalDomainError(f"gradient variance is not finite ({grad_variance}); training diverged")
    if grad_variance < 0:
        raise ValidationError("gradient variance must be >= 0")
    k = state.k + 1
    if state.mode == "dynamic":
        lam = state.lam * math.exp(-state.eta * grad_variance)
        alpha = state.alpha * math.exp(-state.eta_prime * grad_variance)
    elif state.mode == "decay":
        lam = state.lam0 / math.sqrt(k)
        alpha = state.alpha0 / math.sqrt(k)
    else:
        lam, alpha = state.lam, state.alpha
    floored = False
    if state.lam0 > 0 and lam < state.floor:
        lam, floored = state.floor, True
    if state.alpha0 > 0 and alpha < state.floor:
        alpha, floored = state.floor, True
    rec = ScheduleRecord(k, float(grad_variance), lam, alpha, floored)
    # the record list is append-only and shared; each state sees its first k entries
    log = state._log if len(state._log) == state.k else state._log[: state.k]
    log.append(rec)
    return replace(state, lam=lam, alpha=alpha, k=k, _log=log)


def write_history_csv(state: SchedulerState, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "grad_variance", "lambda", "alpha", "floored"])
        for r in state.history:
            w.writerow([r.k, repr(r.grad_variance), repr(r.lam), repr(r.alpha), int(r.floored)])
