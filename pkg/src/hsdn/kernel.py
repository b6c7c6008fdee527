"""Event loop, seeded random streams and the link/channel model.

All times are integer microseconds.
"""
from __future__ import annotations

import hashlib
import heapq
import math
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Optional

MS = 1_000
S = 1_000_000

EVENT_KINDS = (
    "packet-arrival",
    "timer",
    "link-change",
    "control-message-delivery",
    "measurement-mark",
)


class ScenarioError(Exception):
    """Fatal error in a scenario or harness (bad reference, time travel)."""


def derive_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def rng_stream(seed: int, label: str) -> random.Random:
    """Independent pseudo-random stream keyed by ``(seed, label)``."""
    if not label:
        raise ValueError("rng label must be nonempty")
    return random.Random(derive_seed(seed, label))


class Event:
    __slots__ = ("fire_time", "seq", "kind", "action", "detail", "cancelled")

    def __init__(self, fire_time: int, seq: int, kind: str,
                 action: Optional[Callable[[], None]], detail: Optional[dict]):
        self.fire_time = fire_time
        self.seq = seq
        self.kind = kind
        self.action = action
        self.detail = detail
        self.cancelled = False

    def __lt__(self, other: "Event") -> bool:
        return (self.fire_time, self.seq) < (other.fire_time, other.seq)

    def __repr__(self) -> str:
        return f"Event(t={self.fire_time}, seq={self.seq}, kind={self.kind!r})"


class Simulator:
    """Single-threaded discrete-event loop ordered by ``(fire_time, seq)``."""

    def __init__(self, seed: int = 0, record_trace: bool = True):
        self.seed = seed
        self.now = 0
        self._queue: list[Event] = []
        self._seq = 0
        self._streams: dict[str, random.Random] = {}
        self.record_trace = record_trace
        self.trace: list[tuple] = []
        self._stopped = False

    def rng(self, label: str) -> random.Random:
        stream = self._streams.get(label)
        if stream is None:
            stream = self._streams[label] = rng_stream(self.seed, label)
        return stream

    def schedule(self, fire_time: int, kind: str,
                 action: Optional[Callable[[], None]] = None,
                 detail: Optional[dict] = None) -> Event:
        if fire_time < self.now:
            raise ScenarioError(
                f"cannot schedule {kind} at t={fire_time} before now={self.now}")
        if kind not in EVENT_KINDS:
            raise ScenarioError(f"unknown event kind {kind!r}")
        ev = Event(int(fire_time), self._seq, kind, action, detail)
        self._seq += 1
        heapq.heappush(self._queue, ev)
        return ev

    def schedule_in(self, delay: int, kind: str,
                    action: Optional[Callable[[], None]] = None,
                    detail: Optional[dict] = None) -> Event:
        return self.schedule(self.now + delay, kind, action, detail)

    @staticmethod
    def cancel(ev: Event) -> None:
        ev.cancelled = True

    def mark(self, what: str, **fields: Any) -> None:
        """Record a non-event entry (decisions, measurements) in the trace."""
        if self.record_trace:
            self.trace.append((self.now, -1, "measurement-mark", dict(fields, what=what)))

    def stop(self) -> None:
        self._stopped = True

    def pending(self) -> int:
        return sum(1 for ev in self._queue if not ev.cancelled)

    def run_until(self, t_end: int) -> list[tuple]:
        """Fire every event with ``fire_time <= t_end``; returns the fired slice of the trace."""
        start = len(self.trace)
        queue = self._queue
        self._stopped = False
        while queue and queue[0].fire_time <= t_end:
            ev = heapq.heappop(queue)
            if ev.cancelled:
                continue
            self.now = ev.fire_time
            if self.record_trace:
                self.trace.append((ev.fire_time, ev.seq, ev.kind, ev.detail))
            if ev.action is not None:
                ev.action()
            if self._stopped:
                return self.trace[start:]
        if t_end > self.now:
            self.now = t_end
        return self.trace[start:]


# --------------------------------------------------------------------------
# latency distributions and links

@dataclass(frozen=True)
class LatencyDist:
    """Per-message latency distribution, sampled in integer microseconds.

    ``constant`` uses ``value``; ``uniform`` draws from ``[low, high]``;
    ``lognormal`` has median ``value`` and shape ``sigma`` truncated to
    ``[low, high]``.
    """
    kind: str = "constant"
    value: int = 1 * MS
    sigma: float = 0.0
    low: int = 1
    high: int = 0

    def __post_init__(self):
        if self.kind not in ("constant", "uniform", "lognormal"):
            raise ValueError(f"unknown latency distribution {self.kind!r}")
        if self.kind == "constant" and self.value <= 0:
            raise ValueError("latency must be positive")
        if self.kind == "uniform" and not 0 < self.low <= self.high:
            raise ValueError("uniform latency needs 0 < low <= high")
        if self.kind == "lognormal":
            if self.value <= 0 or self.sigma < 0:
                raise ValueError("lognormal latency needs median > 0, sigma >= 0")
            if not 0 < self.low <= self.value <= self.high:
                raise ValueError("lognormal truncation needs 0 < low <= median <= high")

    @classmethod
    def constant(cls, us: int) -> "LatencyDist":
        return cls("constant", value=us)

    @classmethod
    def uniform(cls, low: int, high: int) -> "LatencyDist":
        return cls("uniform", value=(low + high) // 2, low=low, high=high)

    @classmethod
    def lognormal(cls, median: int, sigma: float, low: int, high: int) -> "LatencyDist":
        return cls("lognormal", value=median, sigma=sigma, low=low, high=high)

    @property
    def median(self) -> int:
        return self.value

    @property
    def maximum(self) -> int:
        return self.value if self.kind == "constant" else self.high

    def sample(self, rng: random.Random) -> int:
        if self.kind == "constant":
            return self.value
        if self.kind == "uniform":
            return rng.randint(self.low, self.high)
        x = int(round(self.value * math.exp(self.sigma * rng.gauss(0.0, 1.0))))
        return min(max(x, self.low), self.high)

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "value_us": self.value}
        if self.kind == "uniform":
            return {"kind": "uniform", "low_us": self.low, "high_us": self.high}
        return {"kind": "lognormal", "median_us": self.value, "sigma": self.sigma,
                "low_us": self.low, "high_us": self.high}

    @classmethod
    def from_dict(cls, d: dict) -> "LatencyDist":
        kind = d.get("kind", "constant")
        if kind == "constant":
            return cls.constant(int(d["value_us"]))
        if kind == "uniform":
            return cls.uniform(int(d["low_us"]), int(d["high_us"]))
        if kind == "lognormal":
            return cls.lognormal(int(d["median_us"]), float(d["sigma"]),
                                 int(d["low_us"]), int(d["high_us"]))
        raise ValueError(f"unknown latency distribution {kind!r}")


@dataclass
class LinkAttr:
    latency: LatencyDist
    loss_prob: float = 0.0
    up: bool = True
    kind: str = "data"

    def __post_init__(self):
        if not 0.0 <= self.loss_prob < 1.0 and not (self.kind == "control" and self.loss_prob == 1.0):
            raise ValueError(f"loss_prob {self.loss_prob} outside [0, 1)")
        if self.kind not in ("data", "control"):
            raise ValueError(f"unknown link kind {self.kind!r}")


def link_key(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


class Topology:
    """Graph of data links plus one control link per node to the controller.

    Attributes are stored once per unordered pair, so ``link(a, b)`` and
    ``link(b, a)`` return the same object.
    """

    def __init__(self):
        self.nodes: set[int] = set()
        self._links: dict[tuple[int, int], LinkAttr] = {}
        self._adj: dict[int, set[int]] = {}
        self.control: dict[int, LinkAttr] = {}
        self.version = 0

    def add_node(self, n: int) -> None:
        self.nodes.add(n)
        self._adj.setdefault(n, set())
        self.version += 1

    def add_link(self, a: int, b: int, attr: LinkAttr) -> None:
        if a == b:
            raise ScenarioError(f"self-loop on node {a}")
        for n in (a, b):
            if n not in self.nodes:
                self.add_node(n)
        self._links[link_key(a, b)] = attr
        self._adj[a].add(b)
        self._adj[b].add(a)
        self.version += 1

    def remove_link(self, a: int, b: int) -> None:
        del self._links[link_key(a, b)]
        self._adj[a].discard(b)
        self._adj[b].discard(a)
        self.version += 1

    def has_link(self, a: int, b: int) -> bool:
        return link_key(a, b) in self._links

    def link(self, a: int, b: int) -> LinkAttr:
        try:
            return self._links[link_key(a, b)]
        except KeyError:
            raise ScenarioError(f"unknown link {a}-{b}") from None

    def links(self) -> Iterator[tuple[tuple[int, int], LinkAttr]]:
        for key in sorted(self._links):
            yield key, self._links[key]

    def set_link_state(self, a: int, b: int, up: bool) -> None:
        self.link(a, b).up = up
        self.version += 1

    def set_control_state(self, n: int, up: bool) -> None:
        if n not in self.control:
            raise ScenarioError(f"node {n} has no control link")
        self.control[n].up = up
        self.version += 1

    def neighbors(self, n: int, up_only: bool = True) -> list[int]:
        return sorted(m for m in self._adj.get(n, ())
                      if not up_only or self._links[link_key(n, m)].up)

    def adjacency(self, up_only: bool = True) -> dict[int, list[int]]:
        return {n: self.neighbors(n, up_only) for n in sorted(self.nodes)}

    def copy(self) -> "Topology":
        t = Topology()
        t.nodes = set(self.nodes)
        t._links = {k: LinkAttr(v.latency, v.loss_prob, v.up, v.kind)
                    for k, v in self._links.items()}
        t._adj = {k: set(v) for k, v in self._adj.items()}
        t.control = {k: LinkAttr(v.latency, v.loss_prob, v.up, v.kind)
                     for k, v in self.control.items()}
        t.version = self.version
        return t

    def state_signature(self) -> dict[tuple[int, int], bool]:
        return {k: v.up for k, v in self._links.items()}


# --------------------------------------------------------------------------
# message transport

@dataclass
class ControlAttempt:
    send_time: int
    delivered: bool
    latency: int = 0


@dataclass
class ControlDelivery:
    """Outcome bookkeeping for a (possibly retransmitted) control message."""
    first_send: int
    attempts: list[ControlAttempt] = field(default_factory=list)
    delivered_at: Optional[int] = None
    exhausted: bool = False

    @property
    def last_send(self) -> int:
        return self.attempts[-1].send_time if self.attempts else self.first_send

    @property
    def retries(self) -> int:
        return max(0, len(self.attempts) - 1)


class Fabric:
    """Moves packets and messages over the true topology.

    Data-link transmissions in flight when their link goes down are dropped.
    Control messages ride the per-node control link with loss and
    retransmission after ``rto`` up to ``max_retries`` times.
    """

    def __init__(self, sim: Simulator, topo: Topology):
        self.sim = sim
        self.topo = topo
        self._inflight: dict[tuple[int, int], dict[Event, Callable[[str], None]]] = {}
        self.link_rng = sim.rng("data-link")
        self.control_rng = sim.rng("control-link")

    # -- data links --------------------------------------------------------
    def transmit(self, a: int, b: int, on_arrival: Callable[[], None],
                 on_drop: Callable[[str], None], detail: Optional[dict] = None) -> None:
        attr = self.topo.link(a, b)
        if not attr.up:
            on_drop("link-down")
            return
        if attr.loss_prob and self.link_rng.random() < attr.loss_prob:
            on_drop("loss")
            return
        key = link_key(a, b)
        flights = self._inflight.setdefault(key, {})
        ev: Event

        def arrive() -> None:
            flights.pop(ev, None)
            on_arrival()

        ev = self.sim.schedule_in(attr.latency.sample(self.link_rng), "packet-arrival",
                                  arrive, detail)
        flights[ev] = on_drop

    def apply_link_event(self, a: int, b: int, up: bool) -> None:
        """Change the true state of a data link now; bumps topology version."""
        self.topo.set_link_state(a, b, up)
        if not up:
            flights = self._inflight.pop(link_key(a, b), {})
            for ev, on_drop in sorted(flights.items(), key=lambda kv: kv[0].seq):
                self.sim.cancel(ev)
                on_drop("in-flight")

    def schedule_link_event(self, a: int, b: int, up: bool, t: int,
                            after: Optional[Callable[[], None]] = None) -> Event:
        self.topo.link(a, b)

        def fire() -> None:
            self.apply_link_event(a, b, up)
            if after is not None:
                after()

        return self.sim.schedule(t, "link-change", fire,
                                 {"link": [min(a, b), max(a, b)], "up": up})

    # -- control channel ---------------------------------------------------
    def deliver_control(self, node: int, on_deliver: Callable[[ControlDelivery], None],
                        on_fail: Optional[Callable[[ControlDelivery], None]] = None,
                        rto: int = 60 * MS, max_retries: int = 3,
                        detail: Optional[dict] = None,
                        on_attempt: Optional[Callable[[], None]] = None) -> ControlDelivery:
        """Send one control message across ``node``'s control link (either direction).

        Each attempt is lost with the link's loss probability or when the link
        is down; a lost attempt is retried after ``rto``.  ``on_fail`` runs
        once retries are exhausted.
        """
        record = ControlDelivery(first_send=self.sim.now)
        attr = self.topo.control.get(node)
        if attr is None:
            raise ScenarioError(f"node {node} has no control link")

        def attempt() -> None:
            if on_attempt is not None:
                on_attempt()
            now = self.sim.now
            lost = (not attr.up) or (attr.loss_prob > 0
                                     and self.control_rng.random() < attr.loss_prob)
            if not lost:
                lat = attr.latency.sample(self.control_rng)
                record.attempts.append(ControlAttempt(now, True, lat))

                def deliver() -> None:
                    if not attr.up:
                        # channel went down while the message was in flight
                        record.attempts[-1].delivered = False
                        retry()
                        return
                    record.delivered_at = self.sim.now
                    on_deliver(record)

                self.sim.schedule_in(lat, "control-message-delivery", deliver, detail)
            else:
                record.attempts.append(ControlAttempt(now, False))
                retry()

        def retry() -> None:
            if len(record.attempts) > max_retries:
                record.exhausted = True
                if on_fail is not None:
                    on_fail(record)
                return
            base = record.attempts[-1].send_time
            self.sim.schedule(max(base + rto, self.sim.now), "timer", attempt,
                              {"retransmit": detail} if detail else None)

        attempt()
        return record

    def control_reachable(self, node: int) -> bool:
        attr = self.topo.control.get(node)
        return attr is not None and attr.up
