"""Worst-case, signaled and voltage-scaled energy accounting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .trace import CurrentTrace, State, energy_integrate


@dataclass(frozen=True)
class CommPower:
    """Switched-capacitance communication cost, P = c * f * Vdd**2."""

    c: float = 50e-12
    f: float = 25e6
    v_dd: float = 3.3

    @property
    def power(self) -> float:
        return self.c * self.f * self.v_dd ** 2


@dataclass(frozen=True)
class OverheadModel:
    """Host-side power drawn while polling a device for completion.

    The defaults describe a Cortex-M4 class host running at full speed with
    an SPI link; they are order-of-magnitude placeholders, not fixture data.
    """

    p_mcu: float = 0.25
    p_mcd: float = 0.02
    p_match: float = 0.01
    p_dev: float = 0.02
    comm: CommPower = CommPower()
    calibrated: bool = False

    def __post_init__(self):
        for name in ("p_mcu", "p_mcd", "p_match", "p_dev"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if min(self.comm.c, self.comm.f, self.comm.v_dd) < 0:
            raise ValueError("communication parameters must be >= 0")

    @property
    def total(self) -> float:
        return self.p_mcu + self.p_mcd + self.comm.power + self.p_match + self.p_dev

    @classmethod
    def zero(cls) -> "OverheadModel":
        return cls(0.0, 0.0, 0.0, 0.0, CommPower(0.0, 0.0, 0.0))


@dataclass(frozen=True)
class IODVSPolicy:
    v_nominal: float
    v_wait: float
    wait_current_scale: float = 1.0
    transition_energy: float = 0.0

    def __post_init__(self):
        if not 0 < self.v_wait <= self.v_nominal:
            raise ValueError("need 0 < v_wait <= v_nominal")
        if not 0 < self.wait_current_scale <= 1:
            raise ValueError("wait_current_scale must be in (0, 1]")
        if self.transition_energy < 0:
            raise ValueError("transition_energy must be >= 0")

    @property
    def wait_energy_ratio(self) -> float:
        return self.v_wait / self.v_nominal * self.wait_current_scale


class WorstCaseEnergy(NamedTuple):
    operation: float
    slack: float
    total: float


def worst_case_energy(t: CurrentTrace, t_op: float, t_slack_end: float) -> WorstCaseEnergy:
    """Split the energy up to ``t_slack_end`` at the true completion ``t_op``.

    Times are measured from the start of the trace.
    """
    if not 0 <= t_op <= t_slack_end <= t.duration + 0.5 * t.sample_period:
        raise ValueError("need 0 <= t_op <= t_slack_end <= trace duration")
    k_op = t.index_of(t_op)
    k_end = t.index_of(t_slack_end)
    op = energy_integrate(t, 0, k_op)
    slack = energy_integrate(t, k_op, k_end)
    return WorstCaseEnergy(op, slack, op + slack)


def signaled_energy(t: CurrentTrace, overhead: OverheadModel, t_op: float) -> float:
    if not 0 <= t_op <= t.duration + 0.5 * t.sample_period:
        raise ValueError("t_op must lie within the trace")
    k_op = t.index_of(t_op)
    # charge overhead over the sampled span so it lines up with the integral
    return energy_integrate(t, 0, k_op) + overhead.total * k_op * t.sample_period


def apply_iodvs(t: CurrentTrace, policy: IODVSPolicy) -> CurrentTrace:
    """Run Wait-state samples at the scaled voltage.

    Timing is untouched: the Wait state is assumed voltage independent.
    """
    wait = t.state == int(State.WAIT)
    if not wait.any():
        return t
    v = np.where(wait, policy.v_wait, t.voltage)
    i = np.where(wait, t.current * policy.wait_current_scale, t.current)
    return t.with_channels(voltage=v, current=i)


def iodvs_transition_cost(t: CurrentTrace, policy: IODVSPolicy) -> float:
    """Surcharge for the regulator transitions into and out of Wait."""
    wait = (t.state == int(State.WAIT)).astype(np.int8)
    edges = int(np.count_nonzero(np.diff(wait))) + int(wait[0]) + int(wait[-1]) if wait.size else 0
    return edges * policy.transition_energy
