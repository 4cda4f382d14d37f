import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slackbench.detectors import (
    BracketEvent,
    ContractViolation,
    DriftPolicy,
    EnergyHeuristicState,
    Progress,
    TimingHeuristicState,
    cumulative_energy,
    pacer_c_init,
    pacer_c_scan,
    pacer_c_step,
    pacer_e_feedback,
    pacer_e_scan,
    pacer_e_step,
    pacer_e_target,
    pacer_e_update,
    pacer_t_feedback,
    pacer_t_issue,
    pacer_t_next_guess,
    pacer_t_update,
    pacer_t_widen,
)
from slackbench.devices import Verdict
from slackbench.trace import Sample, State

POLL = 100e-6


def polled(guess, t_star, wc):
    """Where fallback polling sees completion after a failed guess."""
    if guess >= t_star:
        return guess
    return min(guess + math.ceil((t_star - guess) / POLL - 1e-9) * POLL, wc)


def run_timing(t_star, wc, trials, policy=DriftPolicy()):
    s = TimingHeuristicState.initial(wc)
    log = [s]
    for _ in range(trials):
        g = pacer_t_issue(s, policy)
        ok = g >= t_star
        s, ev = pacer_t_feedback(s, policy, g, ok, None if ok else polled(g, t_star, wc))
        log.append(s)
    return log


# -- timing ---------------------------------------------------------------------

def test_first_guess_is_half_worst_case():
    assert pacer_t_next_guess(TimingHeuristicState.initial(5e-3)) == 2.5e-3


def test_pass_moves_upper_and_fail_moves_lower():
    s = TimingHeuristicState.initial(8.0)
    p = pacer_t_update(s, Verdict.PASS)
    assert (p.lower, p.upper) == (0.0, 4.0)
    f = pacer_t_update(s, Verdict.FAIL)
    assert (f.lower, f.upper) == (4.0, 8.0)
    f2 = pacer_t_update(s, Verdict.FAIL, observed_completion_on_fail=5.0)
    assert (f2.lower, f2.upper) == (4.0, 5.0)


def test_fail_with_earlier_completion_is_a_contract_violation():
    with pytest.raises(ContractViolation):
        pacer_t_update(TimingHeuristicState.initial(8.0), Verdict.FAIL, observed_completion_on_fail=3.0)


def test_bracket_invariants_enforced():
    with pytest.raises(ValueError):
        TimingHeuristicState(2.0, 1.0, 5.0)
    with pytest.raises(ValueError):
        TimingHeuristicState(0.0, 6.0, 5.0)


def test_policy_validation():
    with pytest.raises(ValueError):
        DriftPolicy(resolution=-1)
    with pytest.raises(ValueError):
        DriftPolicy(widen_factor=0)
    with pytest.raises(ValueError):
        DriftPolicy(relax_after=0)


def test_bisection_oracle_on_random_deterministic_devices():
    rng = np.random.default_rng(2016)
    policy = DriftPolicy(resolution=0.0)
    for _ in range(100):
        wc = float(rng.uniform(1e-3, 0.3))
        t_star = float(rng.uniform(0.01, 0.99)) * wc
        log = run_timing(t_star, wc, 25, policy)
        for k in range(1, len(log)):
            prev, cur = log[k - 1], log[k]
            assert prev.lower <= cur.lower <= cur.upper <= prev.upper  # nesting
            assert cur.lower <= t_star <= cur.upper
            assert cur.width <= wc / 2 ** k * (1 + 1e-12)


def test_collapse_then_hold():
    wc, t_star = 5e-3, 3.455e-3
    log = run_timing(t_star, wc, 40)
    k = next(i for i, s in enumerate(log) if s.width < 10e-6)
    assert k <= math.ceil(math.log2(wc / 10e-6))
    final = log[-1]
    assert final.upper >= t_star
    assert final.upper - t_star < 10e-6


def test_no_widen_in_steady_state():
    wc, t_star = 5e-3, 3.455e-3
    policy = DriftPolicy()
    s = TimingHeuristicState.initial(wc)
    events = []
    for _ in range(1000):
        g = pacer_t_issue(s, policy)
        ok = g >= t_star
        s, ev = pacer_t_feedback(s, policy, g, ok, None if ok else polled(g, t_star, wc))
        events.append(ev)
    assert BracketEvent.WIDEN_UP not in events and BracketEvent.WIDEN_DOWN not in events
    assert all(e is BracketEvent.HOLD for e in events[-900:])


def test_widen_up_after_drift_then_reconverge():
    wc, t0 = 5e-3, 3.455e-3
    policy = DriftPolicy()
    s = run_timing(t0, wc, 30)[-1]
    t1 = t0 * 1.15
    events = []
    for n in range(20):
        g = pacer_t_issue(s, policy)
        ok = g >= t1
        s, ev = pacer_t_feedback(s, policy, g, ok, None if ok else polled(g, t1, wc))
        events.append(ev)
    assert events[0] is BracketEvent.WIDEN_UP
    assert pacer_t_issue(s, policy) >= t1
    assert abs(pacer_t_issue(s, policy) - t1) / t1 < 0.02


def test_widen_down_after_pass_streak():
    wc, t0 = 5e-3, 3.455e-3
    policy = DriftPolicy(relax_after=5)
    s = run_timing(t0, wc, 30, DriftPolicy())[-1]
    t1 = t0 * 0.8
    events, issued = [], []
    for _ in range(600):
        g = pacer_t_issue(s, policy)
        ok = g >= t1
        s, ev = pacer_t_feedback(s, policy, g, ok, None if ok else polled(g, t1, wc))
        events.append(ev)
        issued.append(g)
    assert BracketEvent.WIDEN_DOWN in events[:6]
    # the step is proportional to the collapsed width, so the walk down is gradual
    assert issued[100] < issued[0]
    assert abs(issued[-1] - t1) / t1 < 0.02


def test_widen_respects_limits():
    s = TimingHeuristicState(4.99e-3, 4.995e-3, 5e-3)
    up = pacer_t_widen(s, DriftPolicy(), "up")
    assert up.upper == 5e-3 and up.lower == s.upper
    low = TimingHeuristicState(1e-6, 5e-6, 5e-3)
    down = pacer_t_widen(low, DriftPolicy(), "down")
    assert down.lower == 0.0
    with pytest.raises(ValueError):
        pacer_t_widen(s, DriftPolicy(), "sideways")


def test_fail_at_worst_case_ceiling_is_a_bisect():
    s = TimingHeuristicState(5e-3, 5e-3, 5e-3)
    new, ev = pacer_t_feedback(s, DriftPolicy(), 5e-3, True)
    assert ev is BracketEvent.HOLD and new.upper == 5e-3


# -- energy ---------------------------------------------------------------------

def test_energy_bracket_mirrors_timing():
    s = EnergyHeuristicState.initial(100e-6)
    assert pacer_e_target(s) == 50e-6
    p = pacer_e_update(s, True)
    assert (p.lower, p.upper, p.accumulator) == (0.0, 50e-6, 0.0)
    f = pacer_e_update(s, False, 70e-6)
    assert (f.lower, f.upper) == (50e-6, 70e-6)
    with pytest.raises(ContractViolation):
        pacer_e_update(s, False, 10e-6)


def test_energy_step_accumulates_and_reports():
    s = EnergyHeuristicState.initial(10e-9)
    reached = False
    n = 0
    while not reached:
        s, reached = pacer_e_step(s, Sample(2.0, 1e-3, State.WAIT), 1e-6)
        n += 1
    # 2 nJ per sample, target 5 nJ
    assert n == 3
    s2, _ = pacer_e_feedback(s, DriftPolicy(resolution=0.0), 5e-9, True)
    assert s2.accumulator == 0.0


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), frac=st.floats(0.01, 1.2))
def test_energy_scan_matches_stepping(seed, frac):
    rng = np.random.default_rng(seed)
    n = 400
    v = np.full(n, 3.3)
    i = rng.normal(2e-3, 1e-3, n)
    total = float(np.sum(v * i * 1e-6))
    target = max(frac * total, 1e-12)
    s = EnergyHeuristicState(0.0, 2 * target, max(2 * target, 1.0))
    k_step = None
    for k in range(n):
        s, hit = pacer_e_step(s, Sample(3.3, float(i[k]), State.WAIT), 1e-6, target)
        if hit:
            k_step = k
            break
    assert pacer_e_scan(v, i, 1e-6, target) == k_step


def test_cumulative_energy_clamps_at_zero():
    acc = cumulative_energy(np.ones(4), np.array([-1.0, 2.0, -5.0, 1.0]), 1.0)
    assert acc.tolist() == [0.0, 2.0, 0.0, 1.0]


# -- current --------------------------------------------------------------------

def test_ict_is_threshold_times_idle():
    s = pacer_c_init(2e-3)
    assert s.ict == pytest.approx(2.2e-3)
    with pytest.raises(ValueError):
        pacer_c_init(0.0)
    with pytest.raises(ValueError):
        pacer_c_init(1e-3, threshold_factor=1.0)
    with pytest.raises(ValueError):
        pacer_c_init(1e-3, min_latency=-1)


def test_step_semantics():
    s = pacer_c_init(1e-3, 1.1, 1e-3)
    assert pacer_c_step(s, 0.5e-3, 0.5e-3) is Progress.ONGOING
    assert pacer_c_step(s, 2e-3, 2e-3) is Progress.ONGOING
    assert pacer_c_step(s, 1.05e-3, 1e-3) is Progress.COMPLETE


def test_all_idle_completes_at_min_latency():
    s = pacer_c_init(1e-3, 1.1, 250e-6)
    assert pacer_c_scan(s, np.full(1000, 1e-3), 1e-6) == 250


def test_never_below_threshold_never_completes():
    s = pacer_c_init(1e-3)
    assert pacer_c_scan(s, np.full(5000, 1.2e-3), 1e-6) is None


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31), min_lat=st.integers(0, 120), factor=st.floats(1.01, 2.0))
def test_scan_matches_step_and_respects_min_latency(seed, min_lat, factor):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.5e-3, 2e-3, 150)
    s = pacer_c_init(1e-3, factor, min_lat * 1e-6)
    k = pacer_c_scan(s, x, 1e-6)
    stepped = next((n for n in range(x.size) if pacer_c_step(s, x[n], n * 1e-6) is Progress.COMPLETE), None)
    assert k == stepped
    if k is not None:
        assert k * 1e-6 >= s.min_latency
