"""Simulated-time event loop and latency accounting.

Time is an integer tick (simulated milliseconds), so totals are exact sums.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Mapping, Optional

import numpy as np

from .errors import InvalidInputError, RunawaySimulationError


@dataclass(frozen=True)
class Distribution:
    """``constant`` (lo == hi) or inclusive integer ``uniform`` on [lo, hi]."""

    lo: int
    hi: int

    def __post_init__(self):
        if int(self.lo) != self.lo or int(self.hi) != self.hi:
            raise InvalidInputError("latency bounds must be whole ticks")
        if self.lo < 0 or self.hi < self.lo:
            raise InvalidInputError(f"bad latency support [{self.lo}, {self.hi}]")
        object.__setattr__(self, "lo", int(self.lo))
        object.__setattr__(self, "hi", int(self.hi))

    @classmethod
    def constant(cls, c: int) -> "Distribution":
        return cls(c, c)

    @classmethod
    def uniform(cls, lo: int, hi: int) -> "Distribution":
        return cls(lo, hi)

    @classmethod
    def parse(cls, spec: Any) -> "Distribution":
        """Accepts an int, ``{"constant": c}`` or ``{"uniform": [lo, hi]}``."""
        if isinstance(spec, Distribution):
            return spec
        if isinstance(spec, (int, float)) and not isinstance(spec, bool):
            return cls.constant(spec)
        if isinstance(spec, Mapping) and len(spec) == 1:
            (kind, value), = spec.items()
            if kind == "constant":
                return cls.constant(value)
            if kind == "uniform" and len(value) == 2:
                return cls.uniform(*value)
        raise InvalidInputError(f"cannot parse latency distribution {spec!r}")

    @property
    def mean(self) -> float:
        return (self.lo + self.hi) / 2

    def sample(self, rng: np.random.Generator) -> int:
        if self.lo == self.hi:
            return self.lo
        return int(rng.integers(self.lo, self.hi + 1))

    def to_json(self):
        if self.lo == self.hi:
            return {"constant": self.lo}
        return {"uniform": [self.lo, self.hi]}


@dataclass(frozen=True)
class LatencyConfig:
    t_fl: Distribution = Distribution(300, 500)
    t_c_to_s: Distribution = Distribution(20, 60)
    t_s_to_c: Distribution = Distribution(20, 60)
    t_bg: Distribution = Distribution(800, 1600)
    t_bv: Distribution = Distribution(400, 1200)
    t_bs: Distribution = Distribution(600, 1400)

    FIELDS = ("t_fl", "t_c_to_s", "t_s_to_c", "t_bg", "t_bv", "t_bs")

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any]) -> "LatencyConfig":
        unknown = set(doc) - set(cls.FIELDS)
        if unknown:
            raise InvalidInputError(f"unknown latency fields: {sorted(unknown)}")
        return cls(**{k: Distribution.parse(v) for k, v in doc.items()})

    def to_json(self) -> dict:
        return {k: getattr(self, k).to_json() for k in self.FIELDS}


def system_latency(n: int, t_fl, t_c_to_s, t_s_to_c):
    """Total FL time over ``n`` rounds: n * (t_fl + t_c->s + t_s->c)."""
    if n < 1:
        raise InvalidInputError("need at least one round")
    if min(t_fl, t_c_to_s, t_s_to_c) < 0:
        raise InvalidInputError("latency components must be non-negative")
    return n * (t_fl + t_c_to_s + t_s_to_c)


def blockchain_latency(t_bg, t_bv, t_bs):
    """Per-round blockchain time: generation + consensus + synchronisation."""
    if min(t_bg, t_bv, t_bs) < 0:
        raise InvalidInputError("latency components must be non-negative")
    return t_bg + t_bv + t_bs


@dataclass(frozen=True)
class RoundLatency:
    t_fl: int
    t_c_to_s: int
    t_s_to_c: int
    t_bg: int
    t_bv: int
    t_bs: int

    @property
    def t_system(self) -> int:
        return self.t_fl + self.t_c_to_s + self.t_s_to_c

    @property
    def t_b(self) -> int:
        return blockchain_latency(self.t_bg, self.t_bv, self.t_bs)

    def to_json(self) -> dict:
        return {
            "t_fl": self.t_fl,
            "t_c_to_s": self.t_c_to_s,
            "t_s_to_c": self.t_s_to_c,
            "t_bg": self.t_bg,
            "t_bv": self.t_bv,
            "t_bs": self.t_bs,
            "t_b": self.t_b,
        }


@dataclass
class LatencyReport:
    rounds: list[RoundLatency] = field(default_factory=list)

    def add(self, sample: RoundLatency) -> None:
        self.rounds.append(sample)

    @property
    def n_rounds(self) -> int:
        return len(self.rounds)

    @property
    def t_c(self) -> int:
        return sum(r.t_system for r in self.rounds)

    @property
    def t_b(self) -> list[int]:
        return [r.t_b for r in self.rounds]

    def cumulative_t_c(self) -> list[int]:
        out, total = [], 0
        for r in self.rounds:
            total += r.t_system
            out.append(total)
        return out

    def to_json(self) -> dict:
        n = self.n_rounds
        return {
            "n_rounds": n,
            "t_c": self.t_c,
            "t_b": self.t_b,
            "t_b_total": sum(self.t_b),
            "mean_t_system": self.t_c / n if n else 0.0,
            "mean_t_b": sum(self.t_b) / n if n else 0.0,
            "total": self.t_c + sum(self.t_b),
            "per_round": [r.to_json() for r in self.rounds],
        }


def sample_blockchain_latency(cfg: LatencyConfig, rng: np.random.Generator) -> tuple[int, int, int]:
    return cfg.t_bg.sample(rng), cfg.t_bv.sample(rng), cfg.t_bs.sample(rng)


class EventKind(str, Enum):
    SUBMIT = "submit"
    MINE = "mine"
    VERIFY = "verify"
    AGGREGATE = "aggregate"
    BROADCAST = "broadcast"


@dataclass(frozen=True, order=True)
class Event:
    fire_time: int
    sequence: int
    kind: EventKind = field(compare=False)
    payload: Any = field(default=None, compare=False)

    def trace_entry(self) -> tuple:
        return (self.fire_time, self.sequence, self.kind.value, self.payload)


Handler = Callable[["Simulator", Event], Optional[Iterable[tuple[int, EventKind, Any]]]]


class Simulator:
    """Single-threaded discrete-event loop ordered by (fire_time, sequence)."""

    def __init__(self, max_events_per_tick: int = 100_000):
        self.now = 0
        self._queue: list[Event] = []
        self._seq = 0
        self.max_events_per_tick = max_events_per_tick

    def __len__(self):
        return len(self._queue)

    def schedule(self, delay: int, kind: EventKind, payload: Any = None) -> Event:
        if delay < 0:
            raise InvalidInputError("cannot schedule into the past")
        event = Event(self.now + int(delay), self._seq, EventKind(kind), payload)
        self._seq += 1
        heapq.heappush(self._queue, event)
        return event

    def schedule_at(self, fire_time: int, kind: EventKind, payload: Any = None) -> Event:
        return self.schedule(fire_time - self.now, kind, payload)

    def advance_to(self, tick: int) -> None:
        if tick < self.now:
            raise InvalidInputError("simulated clock cannot move backwards")
        if self._queue and self._queue[0].fire_time < tick:
            raise InvalidInputError("pending events would be skipped")
        self.now = tick

    def run_until_idle(self, handler: Optional[Handler] = None) -> list[Event]:
        """Process queued events in order; a handler may return follow-up
        ``(delay, kind, payload)`` triples, scheduled relative to the event time."""
        trace = []
        same_tick = 0
        while self._queue:
            event = heapq.heappop(self._queue)
            if event.fire_time == self.now:
                same_tick += 1
                if same_tick > self.max_events_per_tick:
                    raise RunawaySimulationError(
                        f"more than {self.max_events_per_tick} events at tick {self.now}"
                    )
            else:
                same_tick = 1
            self.now = event.fire_time
            trace.append(event)
            if handler is not None:
                for delay, kind, payload in handler(self, event) or ():
                    self.schedule(delay, kind, payload)
        return trace


def broadcast_chain(
    sim: Simulator,
    head_hash: str,
    clients: Iterable[str],
    t_bs: Distribution,
    rng: np.random.Generator,
) -> list[Event]:
    """Schedule one delivery of ``head_hash`` per client after an independent t_bs draw."""
    return [sim.schedule(t_bs.sample(rng), EventKind.BROADCAST, (client, head_hash)) for client in clients]


def deliver(trace: Iterable[Event], local_heads: dict[str, str]) -> None:
    """Apply broadcast deliveries from a processed trace to per-client head views."""
    for ev in trace:
        if ev.kind is EventKind.BROADCAST:
            client, head = ev.payload
            local_heads[client] = head
