"""Sliding-window ARQ with cumulative acks: the per-hop reliable link used by
the control channel and the vanilla baseline.

Each hop id names a bidirectional link; every side owns one sender and one
receiver. The sender retransmits the oldest unacked segment on RTO expiry and
fails only after ``max_retries`` consecutive timeouts on one segment. The
receiver delivers an ordered, exactly-once segment stream.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .errors import HopFailure
from .fabric import Datagram, Fabric, OverlayAddress, SimEvent, ms
from .wire import ACK_HEADER, KIND_SEG, KIND_SEG_ACK, SEG_HEADER

DEFAULT_WINDOW = 32
DEFAULT_RTO_NS = ms(200)
DEFAULT_MAX_RETRIES = 8
DEFAULT_SEG_PAYLOAD = 1024


@dataclass
class HopParams:
    window: int = DEFAULT_WINDOW
    rto_ns: int = DEFAULT_RTO_NS
    max_retries: int = DEFAULT_MAX_RETRIES
    seg_payload: int = DEFAULT_SEG_PAYLOAD


class HopSender:
    def __init__(
        self,
        fab: Fabric,
        own_addr: OverlayAddress,
        peer: OverlayAddress,
        hop_id: int,
        params: HopParams | None = None,
        channel: str = "",
    ):
        self.fab = fab
        self.own_addr = own_addr
        self.peer = peer
        self.hop_id = hop_id
        self.params = params or HopParams()
        self.channel = channel

        self._queue: deque[bytes] = deque()
        self._unacked: dict[int, bytes] = {}
        self.base = 0
        self.next_seq = 0
        self._timer_gen = 0
        self._timeouts = 0
        self.failed = False
        self.transmissions = 0
        self.retransmissions = 0
        self.drained = SimEvent(fab)
        self.drained.set()
        self.on_first_tx = None  # callable(seq, nbytes, t)
        self.on_fail = None      # callable()

    def queued_segments(self) -> int:
        return len(self._queue) + len(self._unacked)

    def send(self, data: bytes) -> int:
        """Split ``data`` into segments and queue them. Returns the number of
        segments enqueued."""
        if self.failed:
            raise HopFailure(f"hop {self.hop_id} already failed")
        n = 0
        size = self.params.seg_payload
        for off in range(0, len(data), size):
            self._queue.append(data[off : off + size])
            n += 1
        if n and self.drained.done:
            self.drained = SimEvent(self.fab)
        self._pump()
        return n

    def send_segment(self, payload: bytes) -> None:
        """Queue one segment without re-splitting (relay pumps use this to
        preserve segment boundaries)."""
        if self.failed:
            raise HopFailure(f"hop {self.hop_id} already failed")
        if len(payload) > self.params.seg_payload:
            raise ValueError("segment larger than hop segment payload")
        self._queue.append(payload)
        if self.drained.done:
            self.drained = SimEvent(self.fab)
        self._pump()

    def _pump(self) -> None:
        while self._queue and len(self._unacked) < self.params.window and not self.failed:
            payload = self._queue.popleft()
            seq = self.next_seq
            self.next_seq += 1
            self._unacked[seq] = payload
            self._transmit(seq, first=True)
        if self._unacked:
            self._arm_timer()

    def _transmit(self, seq: int, first: bool) -> None:
        payload = self._unacked[seq]
        buf = SEG_HEADER.pack(KIND_SEG, self.hop_id, seq) + payload
        self.transmissions += 1
        if not first:
            self.retransmissions += 1
        elif self.on_first_tx is not None:
            self.on_first_tx(seq, len(payload), self.fab.clock)
        self.fab.send_datagram(
            Datagram(self.own_addr, self.peer, buf),
            origin=self.own_addr.node,
            channel=self.channel,
        )

    def _arm_timer(self) -> None:
        self._timer_gen += 1
        gen = self._timer_gen
        self.fab.call_later(self.params.rto_ns, lambda: self._on_timeout(gen))

    def _on_timeout(self, gen: int) -> None:
        if gen != self._timer_gen or self.failed or not self._unacked:
            return
        self._timeouts += 1
        if self._timeouts >= self.params.max_retries:
            self.failed = True
            self.drained.set()
            if self.on_fail is not None:
                self.on_fail()
            return
        self._transmit(self.base, first=False)
        self._arm_timer()

    def on_ack(self, cum: int) -> None:
        if self.failed or cum <= self.base:
            return
        for seq in range(self.base, cum):
            self._unacked.pop(seq, None)
        self.base = cum
        self._timeouts = 0
        self._timer_gen += 1  # invalidate outstanding timer
        self._pump()
        if not self._unacked and not self._queue:
            self.drained.set()


class HopReceiver:
    def __init__(
        self,
        fab: Fabric,
        own_addr: OverlayAddress,
        peer: OverlayAddress,
        hop_id: int,
        on_deliver=None,
        channel: str = "",
    ):
        self.fab = fab
        self.own_addr = own_addr
        self.peer = peer
        self.hop_id = hop_id
        self.on_deliver = on_deliver
        self.channel = channel
        self.expected = 0
        self._ooo: dict[int, bytes] = {}
        self.delivered_segments = 0
        self.delivered_bytes = 0

    def on_seg(self, seq: int, payload: bytes) -> None:
        if seq >= self.expected:
            self._ooo.setdefault(seq, payload)
        while self.expected in self._ooo:
            data = self._ooo.pop(self.expected)
            self.expected += 1
            self.delivered_segments += 1
            self.delivered_bytes += len(data)
            if self.on_deliver is not None:
                self.on_deliver(data, self.fab.clock)
        ack = ACK_HEADER.pack(KIND_SEG_ACK, self.hop_id, self.expected)
        self.fab.send_datagram(
            Datagram(self.own_addr, self.peer, ack),
            origin=self.own_addr.node,
            channel=self.channel,
        )


def reliable_send(fab: Fabric, sender: HopSender, data: bytes, max_time_ns: int | None = None) -> int:
    """Blocking-style send: drive the fabric until every segment of ``data``
    is acked. Returns the byte count; raises HopFailure on retry exhaustion."""
    sender.send(data)
    fab.run_until(sender.drained, max_time_ns)
    if sender.failed:
        raise HopFailure(f"hop {sender.hop_id} failed after {sender.params.max_retries} timeouts")
    return len(data)
