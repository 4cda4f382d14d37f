"""Completion detectors: timing and energy successive approximation, and
return-to-idle current thresholding.

The timing and energy detectors share one mechanism. A bracket
``[lower, upper]`` is kept around the quantity (delay or energy) at which
the operation completes. Each trial issues the midpoint; a passing trial
pulls ``upper`` down to it, a failing one pushes ``lower`` up to it. Once
the bracket is narrower than the resolution the detector issues ``upper``,
the smallest value known to be safe, and only re-opens the bracket when an
outcome contradicts it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .devices import Verdict
from .trace import Sample

DEFAULT_THRESHOLD_FACTOR = 1.10
DEFAULT_RESOLUTION = 10e-6
DEFAULT_WIDEN_FACTOR = 2.0


class ContractViolation(ValueError):
    pass


class Progress(Enum):
    ONGOING = "ongoing"
    COMPLETE = "complete"


class BracketEvent(Enum):
    BISECT = "bisect"
    HOLD = "hold"
    WIDEN_UP = "widen_up"
    WIDEN_DOWN = "widen_down"


@dataclass(frozen=True)
class DriftPolicy:
    """When and how far a collapsed bracket re-opens.

    ``resolution`` is in the bracket's own unit (seconds or joules).
    ``relax_after`` consecutive passes at a collapsed bracket re-open it
    downward; None disables downward re-opening.
    """

    resolution: float = DEFAULT_RESOLUTION
    widen_factor: float = DEFAULT_WIDEN_FACTOR
    relax_after: int | None = None

    def __post_init__(self):
        if self.resolution < 0:
            raise ValueError("resolution must be >= 0")
        if self.widen_factor <= 0:
            raise ValueError("widen_factor must be > 0")
        if self.relax_after is not None and self.relax_after < 1:
            raise ValueError("relax_after must be >= 1")


def _passed(result) -> bool:
    if isinstance(result, Verdict):
        return result is Verdict.PASS
    return bool(result)


def _check_bracket(lower, upper, ceiling):
    if not (0 <= lower <= upper <= ceiling):
        raise ValueError(f"bracket must satisfy 0 <= lower <= upper <= ceiling, got {lower}, {upper}, {ceiling}")


@dataclass(frozen=True)
class TimingHeuristicState:
    lower: float
    upper: float
    worst_case: float
    pass_streak: int = 0

    def __post_init__(self):
        _check_bracket(self.lower, self.upper, self.worst_case)

    @classmethod
    def initial(cls, worst_case: float) -> "TimingHeuristicState":
        return cls(0.0, worst_case, worst_case)

    @property
    def width(self) -> float:
        return self.upper - self.lower

    @property
    def ceiling(self) -> float:
        return self.worst_case


@dataclass(frozen=True)
class EnergyHeuristicState:
    lower: float
    upper: float
    ceiling: float
    accumulator: float = 0.0
    pass_streak: int = 0

    def __post_init__(self):
        _check_bracket(self.lower, self.upper, self.ceiling)
        if self.accumulator < 0:
            raise ValueError("accumulator must be >= 0")

    @classmethod
    def initial(cls, worst_case_energy: float) -> "EnergyHeuristicState":
        return cls(0.0, worst_case_energy, worst_case_energy)

    @property
    def width(self) -> float:
        return self.upper - self.lower


@dataclass(frozen=True)
class CurrentHeuristicState:
    ict: float
    threshold_factor: float
    min_latency: float

    def __post_init__(self):
        if self.threshold_factor <= 1:
            raise ValueError("threshold_factor must be > 1")
        if self.min_latency < 0:
            raise ValueError("min_latency must be >= 0")


# -- shared bracket mechanics ------------------------------------------------

def _midpoint(s) -> float:
    return 0.5 * (s.lower + s.upper)


def _bisect(s, result, observed, guess):
    if guess is None:
        guess = _midpoint(s)
    if _passed(result):
        return replace(s, lower=min(s.lower, guess), upper=guess, pass_streak=0)
    if observed is not None and observed < guess:
        raise ContractViolation(
            f"completion observed at {observed!r} but the guess {guess!r} failed"
        )
    upper = s.upper if observed is None else max(guess, min(s.upper, observed))
    upper = max(upper, guess)
    return replace(s, lower=guess, upper=min(upper, s.ceiling), pass_streak=0)


def _widen(s, policy: DriftPolicy, direction: str, observed=None):
    step = policy.widen_factor * max(s.width, policy.resolution)
    if direction == "up":
        upper = min(s.ceiling, max(s.upper + step, observed if observed is not None else 0.0))
        return replace(s, lower=s.upper, upper=upper, pass_streak=0)
    if direction == "down":
        return replace(s, lower=max(0.0, s.lower - step), pass_streak=0)
    raise ValueError("direction must be 'up' or 'down'")


def _collapsed(s, policy: DriftPolicy) -> bool:
    return s.width < policy.resolution


def _issue(s, policy: DriftPolicy) -> float:
    return s.upper if _collapsed(s, policy) else _midpoint(s)


def _feedback(s, policy, issued, result, observed):
    passed = _passed(result)
    if not _collapsed(s, policy) or issued < s.upper:
        return _bisect(s, result, observed, issued), BracketEvent.BISECT
    # collapsed: the issued value was the bracket's known-safe upper edge
    if not passed:
        if s.upper >= s.ceiling:
            return _bisect(s, result, observed, issued), BracketEvent.BISECT
        return _widen(s, policy, "up", observed), BracketEvent.WIDEN_UP
    streak = s.pass_streak + 1
    if policy.relax_after is not None and streak >= policy.relax_after and s.lower > 0:
        return _widen(s, policy, "down"), BracketEvent.WIDEN_DOWN
    return replace(s, pass_streak=streak), BracketEvent.HOLD


# -- timing ------------------------------------------------------------------

def pacer_t_next_guess(s: TimingHeuristicState) -> float:
    """Midpoint of the bracket: the delay to issue next."""
    return _midpoint(s)


def pacer_t_update(
    s: TimingHeuristicState, result, observed_completion_on_fail: float | None = None,
    guess: float | None = None,
) -> TimingHeuristicState:
    """Bisect the delay bracket after a trial at ``guess`` (default: midpoint).

    On a fail the host kept polling; the completion it saw (if given) caps
    ``upper``. A completion earlier than the failed guess is impossible and
    raises ContractViolation.
    """
    return _bisect(s, result, observed_completion_on_fail, guess)


def pacer_t_widen(
    s: TimingHeuristicState, policy: DriftPolicy, direction: str = "up",
    observed: float | None = None,
) -> TimingHeuristicState:
    """Re-open a collapsed bracket by ``widen_factor`` times its width.

    Upward re-opening starts from the old ``upper`` (which just failed) and
    never exceeds the worst case; downward re-opening never goes below 0.
    """
    return _widen(s, policy, direction, observed)


def pacer_t_issue(s: TimingHeuristicState, policy: DriftPolicy) -> float:
    return _issue(s, policy)


def pacer_t_feedback(s: TimingHeuristicState, policy: DriftPolicy, issued: float, result,
                     observed: float | None = None) -> tuple[TimingHeuristicState, BracketEvent]:
    return _feedback(s, policy, issued, result, observed)


# -- energy ------------------------------------------------------------------

def pacer_e_target(s: EnergyHeuristicState, policy: DriftPolicy | None = None) -> float:
    if policy is None:
        return _midpoint(s)
    return _issue(s, policy)


def pacer_e_step(s: EnergyHeuristicState, sample: Sample, T_s: float,
                 target: float | None = None) -> tuple[EnergyHeuristicState, bool]:
    """Accumulate one sample's energy; report whether the target is reached."""
    acc = s.accumulator + sample.voltage * sample.current * T_s
    acc = max(acc, 0.0)
    if target is None:
        target = _midpoint(s)
    return replace(s, accumulator=acc), acc >= target


def pacer_e_update(s: EnergyHeuristicState, result, observed_energy_on_fail: float | None = None,
                   guess: float | None = None) -> EnergyHeuristicState:
    return replace(_bisect(s, result, observed_energy_on_fail, guess), accumulator=0.0)


def pacer_e_feedback(s: EnergyHeuristicState, policy: DriftPolicy, issued: float, result,
                     observed: float | None = None) -> tuple[EnergyHeuristicState, BracketEvent]:
    new, event = _feedback(s, policy, issued, result, observed)
    return replace(new, accumulator=0.0), event


def cumulative_energy(voltage: np.ndarray, current: np.ndarray, T_s: float) -> np.ndarray:
    """Running energy after each sample, clamped at zero like pacer_e_step."""
    acc = np.cumsum(voltage * current * T_s)
    if acc.size and acc.min() < 0:
        # rare: noise driving the running sum negative; fall back to stepping
        out = np.empty_like(acc)
        a = 0.0
        for k, p in enumerate(voltage * current * T_s):
            a = max(a + p, 0.0)
            out[k] = a
        return out
    return acc


def pacer_e_scan(voltage: np.ndarray, current: np.ndarray, T_s: float, target: float) -> int | None:
    """Index of the first sample at which the running energy reaches ``target``."""
    acc = cumulative_energy(voltage, current, T_s)
    hits = np.flatnonzero(acc >= target)
    return int(hits[0]) if hits.size else None


# -- current -----------------------------------------------------------------

def pacer_c_init(idle_current: float, threshold_factor: float = DEFAULT_THRESHOLD_FACTOR,
                 min_latency: float = 0.0) -> CurrentHeuristicState:
    if not idle_current > 0:
        raise ValueError("idle_current must be > 0 for a return-to-idle threshold")
    return CurrentHeuristicState(idle_current * threshold_factor, threshold_factor, min_latency)


def pacer_c_step(s: CurrentHeuristicState, filtered_current: float, t: float) -> Progress:
    if t >= s.min_latency and filtered_current <= s.ict:
        return Progress.COMPLETE
    return Progress.ONGOING


def pacer_c_scan(s: CurrentHeuristicState, filtered: np.ndarray, T_s: float) -> int | None:
    """First sample index (sample k at time k * T_s) that pacer_c_step marks Complete."""
    t = np.arange(filtered.size) * T_s
    hits = np.flatnonzero((t >= s.min_latency) & (filtered <= s.ict))
    return int(hits[0]) if hits.size else None
