"""Deterministic datagram fabric: virtual clock, seeded loss, per-link latency,
per-node egress serialization, temporary (spoofable) source addresses.

All time is integer nanoseconds. For a fixed seed and operation sequence the
full event trace is bit-identical across runs.
"""

from __future__ import annotations

import csv
import hashlib
import heapq
import random
from dataclasses import dataclass, field, replace

from .errors import AllocationError, SimulationTimeout

NS_PER_US = 1_000
NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000

DEFAULT_PORT = 9001
DEFAULT_MAX_DATAGRAM = 1500

#: First node index of the reserved, unroutable temporary-address range.
#: Registered nodes always get indices below this, so pool draws can never
#: collide with a real node.
TEMP_BASE = 1_000_000


def ms(v: float) -> int:
    """Milliseconds to integer nanoseconds."""
    return round(v * NS_PER_MS)


@dataclass(frozen=True, order=True)
class OverlayAddress:
    node: int
    port: int = DEFAULT_PORT

    def __str__(self) -> str:
        return f"n{self.node}:{self.port}"


@dataclass
class Datagram:
    """Unreliable overlay message. ``src`` is freely settable by the sender
    and is never authenticated: delivery depends only on ``dst``."""

    src: OverlayAddress
    dst: OverlayAddress
    payload: bytes
    send_time: int = 0


@dataclass(frozen=True)
class LinkConfig:
    latency_ns: int = 20 * NS_PER_MS
    loss_rate: float = 0.0
    bandwidth: int = 0  # bytes per virtual second, 0 = unlimited

    def __post_init__(self):
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ValueError(f"loss_rate out of range: {self.loss_rate}")
        if self.latency_ns < 0:
            raise ValueError("latency must be >= 0")

    def serialization_ns(self, nbytes: int) -> int:
        if self.bandwidth <= 0:
            return 0
        return nbytes * NS_PER_S // self.bandwidth


class PairLatency:
    """Per-ordered-pair latency drawn uniformly from [lo, hi], keyed by a
    stable hash of (salt, u, v) so the draw does not depend on query order."""

    def __init__(self, salt: int, lo_ns: int, hi_ns: int):
        self.salt = salt
        self.lo_ns = lo_ns
        self.hi_ns = hi_ns

    def __call__(self, u: int, v: int) -> int:
        if self.hi_ns <= self.lo_ns:
            return self.lo_ns
        h = hashlib.blake2b(
            b"%d|%d|%d" % (self.salt, u, v), digest_size=8
        ).digest()
        r = int.from_bytes(h, "big")
        return self.lo_ns + r % (self.hi_ns - self.lo_ns + 1)


@dataclass
class NodeCounters:
    sent_pkts: int = 0
    sent_bytes: int = 0
    recv_pkts: int = 0
    recv_bytes: int = 0
    dropped_loss: int = 0
    dropped_queue: int = 0
    dropped_unroutable: int = 0


@dataclass
class LinkCounters:
    sent: int = 0
    delivered: int = 0
    dropped: int = 0


class SimEvent:
    """One-shot wakeup used by protocol coroutines."""

    __slots__ = ("_fab", "done", "value", "_waiters")

    def __init__(self, fab: "Fabric"):
        self._fab = fab
        self.done = False
        self.value = None
        self._waiters: list = []

    def set(self, value=None) -> None:
        if self.done:
            return
        self.done = True
        self.value = value
        for proc in self._waiters:
            self._fab.call_at(self._fab.clock, proc._resume)
        self._waiters.clear()


class _Proc:
    """Drives a protocol generator. Yield values:

    ``("sleep", ns)``  resume after a virtual delay;
    ``SimEvent``       resume when the event fires (immediately if already set).
    """

    def __init__(self, fab: "Fabric", gen):
        self.fab = fab
        self.gen = gen
        self.finished = SimEvent(fab)
        self.error: BaseException | None = None

    def _resume(self) -> None:
        try:
            yielded = next(self.gen)
        except StopIteration as stop:
            self.finished.set(stop.value)
            return
        except Exception as exc:  # surfaced by whoever joins the proc
            self.error = exc
            self.finished.set(None)
            return
        if isinstance(yielded, SimEvent):
            if yielded.done:
                self.fab.call_at(self.fab.clock, self._resume)
            else:
                yielded._waiters.append(self)
        elif isinstance(yielded, tuple) and yielded[0] == "sleep":
            self.fab.call_at(self.fab.clock + int(yielded[1]), self._resume)
        else:
            raise TypeError(f"bad yield from protocol coroutine: {yielded!r}")


@dataclass
class _Node:
    index: int
    label: str
    addr: OverlayAddress
    handler: object = None
    inbox: list = field(default_factory=list)


class Fabric:
    """Discrete-event simulated network.

    Single-owner: one logical execution context drives ``send_datagram`` and
    ``advance``. Independent Fabric instances share no state.
    """

    def __init__(
        self,
        seed: int = 0,
        *,
        default_link: LinkConfig | None = None,
        max_datagram: int = DEFAULT_MAX_DATAGRAM,
        temp_pool_start: int = TEMP_BASE,
        temp_pool_size: int = 65536,
        temp_addr_mode: str = "spoof-random",
        max_queue_delay_ns: int = 0,
        latency_model=None,
        trace_enabled: bool = True,
    ):
        if temp_addr_mode not in ("spoof-random", "mtd-pool"):
            raise ValueError(f"unknown temp_addr_mode: {temp_addr_mode}")
        self.seed = seed
        self.rng = random.Random(seed)
        self.clock = 0
        self.default_link = default_link or LinkConfig()
        self.max_datagram = max_datagram
        self.max_queue_delay_ns = max_queue_delay_ns
        self.latency_model = latency_model
        self.trace_enabled = trace_enabled
        self.trace: list[tuple] = []  # (time_ns, src, dst, bytes, outcome, channel)

        self._heap: list = []
        self._seq = 0
        self._nodes: list[_Node] = []
        self._links: dict[tuple[int, int], LinkConfig] = {}
        self._loss: dict[tuple[int, int], float] = {}
        self._egress_bw: dict[int, int] = {}
        self._egress_free: dict[int, int] = {}

        self.node_counters: dict[int, NodeCounters] = {}
        self.link_counters: dict[tuple[int, int], LinkCounters] = {}

        self._id_counter = 0
        self._temp_start = temp_pool_start
        self._temp_size = temp_pool_size
        self._temp_mode = temp_addr_mode
        self._temp_allocated: set[int] = set()
        self._temp_cursor = 0
        self._temp_bindings: dict[int, int] = {}  # temp node index -> real node

    # ---- topology -------------------------------------------------------

    def add_node(self, label: str = "", handler=None, port: int = DEFAULT_PORT) -> OverlayAddress:
        idx = len(self._nodes)
        if idx >= self._temp_start:
            raise ValueError("node index range collides with temp pool")
        node = _Node(idx, label or f"node{idx}", OverlayAddress(idx, port), handler)
        self._nodes.append(node)
        self.node_counters[idx] = NodeCounters()
        return node.addr

    def set_handler(self, node: int, handler) -> None:
        self._nodes[node].handler = handler

    def fresh_id(self) -> int:
        """Fabric-unique identifier (hop ids, chain ids, cookies)."""
        self._id_counter += 1
        return self._id_counter

    def label(self, node: int) -> str:
        return self._nodes[node].label

    @property
    def node_count(self) -> int:
        return len(self._nodes)

    def set_link(self, src: int, dst: int, link: LinkConfig) -> None:
        self._links[(src, dst)] = link

    def set_link_loss(self, src: int, dst: int, loss_rate: float) -> None:
        if not 0.0 <= loss_rate <= 1.0:
            raise ValueError("loss_rate out of range")
        self._loss[(src, dst)] = loss_rate

    def set_egress_bandwidth(self, node: int, bytes_per_s: int) -> None:
        self._egress_bw[node] = bytes_per_s

    def effective_link(self, origin: int | None, dst: int) -> LinkConfig:
        explicit = self._links.get((origin, dst)) if origin is not None else None
        if explicit is not None:
            loss = self._loss.get((origin, dst), explicit.loss_rate)
            return replace(explicit, loss_rate=loss)
        lat = self.default_link.latency_ns
        if self.latency_model is not None and origin is not None:
            lat = self.latency_model(origin, dst)
        loss = self._loss.get((origin, dst), self.default_link.loss_rate)
        bw = self.default_link.bandwidth
        if origin is not None:
            bw = self._egress_bw.get(origin, bw)
        return LinkConfig(latency_ns=lat, loss_rate=loss, bandwidth=bw)

    # ---- temporary addresses ---------------------------------------------

    def allocate_temp_address(self) -> OverlayAddress:
        """Draw an unused address from the reserved pool.

        ``spoof-random`` draws uniformly (models picking a random address to
        spoof); ``mtd-pool`` hands out pool slots in sequence.
        """
        if len(self._temp_allocated) >= self._temp_size:
            raise AllocationError("temporary address pool exhausted")
        if self._temp_mode == "spoof-random":
            while True:
                off = self.rng.randrange(self._temp_size)
                if off not in self._temp_allocated:
                    break
            port = self.rng.randrange(1024, 65536)
        else:
            off = self._temp_cursor
            while off in self._temp_allocated:
                off += 1
            self._temp_cursor = off + 1
            port = 0
        self._temp_allocated.add(off)
        return OverlayAddress(self._temp_start + off, port)

    def is_temp_address(self, addr: OverlayAddress) -> bool:
        return addr.node >= self._temp_start

    def bind_temp_address(self, addr: OverlayAddress, node: int) -> None:
        self._temp_bindings[addr.node] = node

    # ---- scheduling -------------------------------------------------------

    def call_at(self, t: int, fn) -> None:
        if t < self.clock:
            raise ValueError("cannot schedule in the past")
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, fn))

    def call_later(self, dt: int, fn) -> None:
        self.call_at(self.clock + dt, fn)

    def spawn(self, gen) -> _Proc:
        proc = _Proc(self, gen)
        self.call_at(self.clock, proc._resume)
        return proc

    def has_events(self) -> bool:
        return bool(self._heap)

    def next_event_time(self) -> int | None:
        return self._heap[0][0] if self._heap else None

    # ---- datagram plane ---------------------------------------------------

    def send_datagram(self, d: Datagram, origin: int | None = None, channel: str = "") -> bool:
        """Schedule delivery of ``d``. Returns True if a delivery event was
        enqueued, False if the datagram was dropped.

        ``origin`` is the physical sending node, used for egress serialization
        and link lookup; it defaults to ``d.src.node`` when that is a
        registered node (spoofed sources must pass it explicitly to be
        rate-limited correctly). Unknown destinations are silently dropped and
        counted, mirroring IP behavior.
        """
        if len(d.payload) > self.max_datagram:
            raise ValueError(f"payload {len(d.payload)} exceeds max datagram {self.max_datagram}")
        if origin is None and d.src.node < len(self._nodes):
            origin = d.src.node
        d.send_time = self.clock

        dst_node = d.dst.node
        if dst_node >= len(self._nodes):
            bound = self._temp_bindings.get(dst_node)
            if bound is None:
                if origin is not None:
                    self.node_counters[origin].dropped_unroutable += 1
                lk = self._lcount(origin, dst_node)
                lk.sent += 1
                lk.dropped += 1
                self._trace(self.clock, d, "dropped_unroutable", channel)
                return False
            dst_node = bound

        link = self.effective_link(origin, dst_node)
        nbytes = len(d.payload)

        # Per-node FIFO egress: a datagram cannot start serializing until the
        # previous one from the same node has finished.
        start_tx = self.clock
        if origin is not None and link.bandwidth > 0:
            start_tx = max(self.clock, self._egress_free.get(origin, 0))
            if self.max_queue_delay_ns and start_tx - self.clock > self.max_queue_delay_ns:
                self.node_counters[origin].dropped_queue += 1
                self.node_counters[origin].dropped_loss += 1
                lk = self._lcount(origin, dst_node)
                lk.sent += 1
                lk.dropped += 1
                self._trace(self.clock, d, "dropped_loss", channel)
                return False
        ser = link.serialization_ns(nbytes)
        end_tx = start_tx + ser
        if origin is not None and link.bandwidth > 0:
            self._egress_free[origin] = end_tx

        if origin is not None:
            nc = self.node_counters[origin]
            nc.sent_pkts += 1
            nc.sent_bytes += nbytes
        lk = self._lcount(origin, dst_node)
        lk.sent += 1

        if link.loss_rate > 0 and self.rng.random() < link.loss_rate:
            if origin is not None:
                self.node_counters[origin].dropped_loss += 1
            lk.dropped += 1
            self._trace(end_tx, d, "dropped_loss", channel)
            return False

        deliver_at = end_tx + link.latency_ns
        self._seq += 1
        heapq.heappush(
            self._heap,
            (deliver_at, self._seq, _Delivery(self, dst_node, d, channel, origin)),
        )
        return True

    def _lcount(self, origin: int | None, dst: int) -> LinkCounters:
        key = (origin if origin is not None else -1, dst)
        lk = self.link_counters.get(key)
        if lk is None:
            lk = self.link_counters[key] = LinkCounters()
        return lk

    def _trace(self, t: int, d: Datagram, outcome: str, channel: str) -> None:
        if self.trace_enabled:
            self.trace.append((t, str(d.src), str(d.dst), len(d.payload), outcome, channel))

    # ---- event loop --------------------------------------------------------

    def step(self) -> bool:
        """Process the single next event. Returns False if the queue is empty."""
        if not self._heap:
            return False
        t, _, fn = heapq.heappop(self._heap)
        self.clock = t
        fn()
        return True

    def advance(self, until: int, collect: bool = True) -> list[tuple[int, Datagram]]:
        """Process all events with timestamp <= until, in time order with FIFO
        tie-breaking; afterwards clock == until. Returns the datagrams
        delivered during this call as (node, datagram) pairs."""
        if until < self.clock:
            raise ValueError("advance target is in the past")
        self._collect = [] if collect else None
        while self._heap and self._heap[0][0] <= until:
            self.step()
        self.clock = until
        out = self._collect if collect else []
        self._collect = None
        return out

    _collect: list | None = None

    def run_until_idle(self, max_time_ns: int | None = None) -> None:
        """Drain the event queue; raise SimulationTimeout past ``max_time_ns``."""
        while self._heap:
            if max_time_ns is not None and self._heap[0][0] > max_time_ns:
                raise SimulationTimeout(f"simulation exceeded {max_time_ns} ns")
            self.step()

    def run_until(self, ev: SimEvent, max_time_ns: int | None = None) -> bool:
        """Drive events until ``ev`` fires. Returns False if the queue drained
        without it firing."""
        while not ev.done:
            if not self._heap:
                return False
            if max_time_ns is not None and self._heap[0][0] > max_time_ns:
                raise SimulationTimeout(f"simulation exceeded {max_time_ns} ns")
            self.step()
        return True

    def deliveries(self, node: int) -> list[Datagram]:
        """Drain the inbox of a handler-less node."""
        box = self._nodes[node].inbox
        self._nodes[node].inbox = []
        return box

    # ---- export -------------------------------------------------------------

    def write_trace_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_ns", "src", "dst", "bytes", "outcome", "channel"])
            for row in self.trace:
                w.writerow(row)


class _Delivery:
    __slots__ = ("fab", "dst", "d", "channel", "origin")

    def __init__(self, fab: Fabric, dst: int, d: Datagram, channel: str, origin):
        self.fab = fab
        self.dst = dst
        self.d = d
        self.channel = channel
        self.origin = origin

    def __call__(self) -> None:
        fab = self.fab
        nc = fab.node_counters[self.dst]
        nc.recv_pkts += 1
        nc.recv_bytes += len(self.d.payload)
        fab._lcount(self.origin, self.dst).delivered += 1
        fab._trace(fab.clock, self.d, "delivered", self.channel)
        if fab._collect is not None:
            fab._collect.append((self.dst, self.d))
        node = fab._nodes[self.dst]
        if node.handler is not None:
            node.handler(self.d)
        else:
            node.inbox.append(self.d)
