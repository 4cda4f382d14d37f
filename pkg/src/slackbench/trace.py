"""Sampled voltage/current traces and the energy math run over them.

A trace is a uniformly sampled record of supply voltage, device current and
the device state label at each sample. Energy is accumulated as the sum of
``V * I * Ts`` over samples, using exactly rounded summation so that results
do not depend on how a range is chunked.
"""

from __future__ import annotations

import csv
import math
import os
import tempfile
from collections import deque
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

DEFAULT_SAMPLE_PERIOD = 1e-6
DEFAULT_FILTER_WINDOW = 50

CSV_HEADER = ("time_s", "voltage_v", "current_a", "state")


class TraceFormatError(ValueError):
    """Raised for malformed trace files; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class State(IntEnum):
    IDLE = 0
    ACTIVE = 1
    WAIT = 2
    VERIFY = 3

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "State":
        try:
            return cls[label.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown state label {label!r}") from None


@dataclass(frozen=True)
class Sample:
    voltage: float
    current: float
    state: State

    def __post_init__(self):
        if not (math.isfinite(self.voltage) and math.isfinite(self.current)):
            raise ValueError("sample voltage and current must be finite")
        if self.voltage < 0:
            raise ValueError("sample voltage must be >= 0")
        object.__setattr__(self, "state", State(self.state))


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


class CurrentTrace:
    """Immutable, uniformly sampled trace.

    Sample ``n`` is taken at time ``n * sample_period``.
    """

    __slots__ = ("sample_period", "voltage", "current", "state")

    def __init__(self, voltage, current, state, sample_period: float = DEFAULT_SAMPLE_PERIOD):
        if not (sample_period > 0 and math.isfinite(sample_period)):
            raise ValueError("sample_period must be a positive finite number")
        v = _frozen(voltage, np.float64)
        i = _frozen(current, np.float64)
        s = _frozen(state, np.int8)
        if v.ndim != 1 or v.shape != i.shape or v.shape != s.shape:
            raise ValueError("voltage, current and state must be 1-D and equally long")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(i))):
            raise ValueError("voltage and current must be finite")
        if v.size and v.min() < 0:
            raise ValueError("voltage must be >= 0")
        if s.size and (s.min() < State.IDLE or s.max() > State.VERIFY):
            raise ValueError("state codes must be one of the four device states")
        object.__setattr__(self, "sample_period", float(sample_period))
        object.__setattr__(self, "voltage", v)
        object.__setattr__(self, "current", i)
        object.__setattr__(self, "state", s)

    def __setattr__(self, name, value):
        raise AttributeError("CurrentTrace is immutable")

    @classmethod
    def from_samples(cls, samples: Iterable[Sample], sample_period: float = DEFAULT_SAMPLE_PERIOD):
        samples = list(samples)
        return cls(
            [s.voltage for s in samples],
            [s.current for s in samples],
            [int(s.state) for s in samples],
            sample_period,
        )

    def __len__(self) -> int:
        return int(self.current.size)

    def __getitem__(self, n: int) -> Sample:
        return Sample(float(self.voltage[n]), float(self.current[n]), State(int(self.state[n])))

    def __iter__(self):
        for n in range(len(self)):
            yield self[n]

    def __eq__(self, other):
        if not isinstance(other, CurrentTrace):
            return NotImplemented
        return (
            self.sample_period == other.sample_period
            and np.array_equal(self.voltage, other.voltage)
            and np.array_equal(self.current, other.current)
            and np.array_equal(self.state, other.state)
        )

    __hash__ = None

    def __repr__(self):
        return f"CurrentTrace(n={len(self)}, sample_period={self.sample_period!r})"

    @property
    def duration(self) -> float:
        return len(self) * self.sample_period

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self)) * self.sample_period

    def with_channels(self, voltage=None, current=None) -> "CurrentTrace":
        return CurrentTrace(
            self.voltage if voltage is None else voltage,
            self.current if current is None else current,
            self.state,
            self.sample_period,
        )

    def index_of(self, t: float) -> int:
        """Sample index at time ``t``, clipped into [0, N]."""
        n = int(round(t / self.sample_period))
        return min(max(n, 0), len(self))

    def state_span(self, state: State) -> tuple[int, int] | None:
        """First and one-past-last index carrying ``state`` (None if absent)."""
        idx = np.flatnonzero(self.state == int(state))
        if idx.size == 0:
            return None
        return int(idx[0]), int(idx[-1]) + 1


def instantaneous_power(s: Sample) -> float:
    return s.voltage * s.current


def _exact_sum(values: np.ndarray) -> float:
    return math.fsum(values.tolist())


def energy_integrate(t: CurrentTrace, start: int = 0, stop: int | None = None) -> float:
    """Energy in joules over samples ``[start, stop)``.

    An empty range yields 0 J; a range reaching outside ``[0, N)`` raises
    IndexError.
    """
    n = len(t)
    if stop is None:
        stop = n
    if start < 0 or stop > n or start > n or stop < 0:
        raise IndexError(f"range [{start}, {stop}) outside trace of length {n}")
    if stop <= start:
        return 0.0
    p = t.voltage[start:stop] * t.current[start:stop]
    return _exact_sum(p) * t.sample_period


class EnergyBreakdown(NamedTuple):
    by_state: dict[str, float]
    total: float


def energy_by_state(t: CurrentTrace) -> EnergyBreakdown:
    p = t.voltage * t.current
    parts = {}
    for state in State:
        mask = t.state == int(state)
        if mask.any():
            parts[state.label] = _exact_sum(p[mask]) * t.sample_period
    total = math.fsum(parts.values())
    return EnergyBreakdown(parts, total)


class MovingAverageFilter:
    """Streaming boxcar mean over the last ``window`` inputs.

    During warm-up the mean is taken over the inputs seen so far.
    """

    def __init__(self, window: int = DEFAULT_FILTER_WINDOW):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = int(window)
        self._buf: deque[float] = deque()
        self._sum = 0.0

    def update(self, x: float) -> float:
        self._buf.append(x)
        self._sum += x
        if len(self._buf) > self.window:
            self._sum -= self._buf.popleft()
        return self._sum / len(self._buf)

    def reset(self):
        self._buf.clear()
        self._sum = 0.0


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    """Vectorised equivalent of feeding ``x`` through MovingAverageFilter."""
    if window < 1:
        raise ValueError("window must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    if window == 1 or x.size == 0:
        return x.copy()
    # offset by the first value so flat segments come back bit-exact
    base = x[0]
    cs = np.cumsum(x - base)
    out = cs.copy()
    out[window:] = cs[window:] - cs[:-window]
    counts = np.minimum(np.arange(1, x.size + 1), window)
    return base + out / counts


def filter_moving_average(t: CurrentTrace, window: int = DEFAULT_FILTER_WINDOW) -> CurrentTrace:
    if window < 1:
        raise ValueError("window must be >= 1")
    return t.with_channels(current=moving_average(t.current, window))


def concat(traces: Iterable[CurrentTrace]) -> CurrentTrace:
    traces = list(traces)
    if not traces:
        raise ValueError("nothing to concatenate")
    ts = traces[0].sample_period
    if any(tr.sample_period != ts for tr in traces):
        raise ValueError("sample periods differ")
    return CurrentTrace(
        np.concatenate([tr.voltage for tr in traces]),
        np.concatenate([tr.current for tr in traces]),
        np.concatenate([tr.state for tr in traces]),
        ts,
    )


def _atomic_open(path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    return os.fdopen(fd, "w", newline=""), tmp


def write_trace_csv(t: CurrentTrace, path) -> None:
    path = Path(path)
    fh, tmp = _atomic_open(path)
    try:
        with fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            labels = [s.label for s in State]
            times = t.times
            for n in range(len(t)):
                w.writerow((
                    repr(float(times[n])),
                    repr(float(t.voltage[n])),
                    repr(float(t.current[n])),
                    labels[t.state[n]],
                ))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_trace_csv(path) -> CurrentTrace:
    """Parse a trace CSV; raises TraceFormatError naming the bad line."""
    times, volts, amps, states = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TraceFormatError("empty file", 1) from None
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise TraceFormatError(f"expected header {','.join(CSV_HEADER)}", 1)
        for row in reader:
            line = reader.line_num
            if len(row) != 4:
                raise TraceFormatError(f"expected 4 fields, got {len(row)}", line)
            try:
                t, v, i = float(row[0]), float(row[1]), float(row[2])
            except ValueError as exc:
                raise TraceFormatError(str(exc), line) from None
            if not all(math.isfinite(x) for x in (t, v, i)):
                raise TraceFormatError("non-finite value", line)
            try:
                st = State.from_label(row[3])
            except ValueError as exc:
                raise TraceFormatError(str(exc), line) from None
            times.append(t)
            volts.append(v)
            amps.append(i)
            states.append(int(st))
    if len(times) < 2:
        raise TraceFormatError("a trace needs at least two samples", reader.line_num + 1)
    ts = times[1] - times[0]
    if ts <= 0:
        raise TraceFormatError("time must be strictly increasing", 3)
    for n, tn in enumerate(times):
        if abs(tn - (times[0] + n * ts)) > 1e-6 * ts:
            raise TraceFormatError("samples are not uniformly spaced", n + 2)
    return CurrentTrace(volts, amps, states, ts)
