"""Base class for protocol participants: datagram kind dispatch plus the
reliable-hop establishment handshake (SYN/SYNACK with retries)."""

from __future__ import annotations

from dataclasses import dataclass, field

from .arq import HopParams, HopReceiver, HopSender
from .fabric import Datagram, Fabric, OverlayAddress, SimEvent
from .wire import (
    ACK_HEADER,
    KIND_HOP_SYN,
    KIND_HOP_SYNACK,
    KIND_SEG,
    KIND_SEG_ACK,
    SEG_HEADER,
    SYN_HEADER,
    SYNACK_HEADER,
)


@dataclass
class HopInfo:
    hop_id: int
    chain_id: int
    cookie: int
    peer: OverlayAddress
    initiated: bool
    params: HopParams = field(default_factory=HopParams)


class ProtocolNode:
    """A fabric node that speaks the datagram wire protocol."""

    def __init__(self, fab: Fabric, label: str = "", channel_tag: str = ""):
        self.fab = fab
        self.addr = fab.add_node(label, handler=self._on_datagram)
        self.node = self.addr.node
        self.channel_tag = channel_tag
        self.hop_senders: dict[int, HopSender] = {}
        self.hop_receivers: dict[int, HopReceiver] = {}
        self.hops: dict[int, HopInfo] = {}
        self._pending_syn: dict[int, dict] = {}
        self.malformed = 0

    # ---- datagram dispatch -------------------------------------------------

    def _on_datagram(self, d: Datagram) -> None:
        if not d.payload:
            self.malformed += 1
            return
        kind = d.payload[0]
        if kind == KIND_SEG:
            _, hop_id, seq = SEG_HEADER.unpack_from(d.payload)
            rx = self.hop_receivers.get(hop_id)
            if rx is not None:
                rx.on_seg(seq, d.payload[SEG_HEADER.size :])
        elif kind == KIND_SEG_ACK:
            _, hop_id, cum = ACK_HEADER.unpack_from(d.payload)
            tx = self.hop_senders.get(hop_id)
            if tx is not None:
                tx.on_ack(cum)
        elif kind == KIND_HOP_SYN:
            self._on_hop_syn(d)
        elif kind == KIND_HOP_SYNACK:
            self._on_hop_synack(d)
        else:
            self.handle_datagram(kind, d)

    def handle_datagram(self, kind: int, d: Datagram) -> None:
        """Subclass hook for non-hop datagram kinds."""
        self.malformed += 1

    def send_raw(self, dst: OverlayAddress, payload: bytes, channel: str = "", src: OverlayAddress | None = None) -> bool:
        return self.fab.send_datagram(
            Datagram(src or self.addr, dst, payload), origin=self.node, channel=channel or self.channel_tag
        )

    # ---- hop establishment ---------------------------------------------------

    def establish_hop(
        self,
        peer: OverlayAddress,
        hop_id: int,
        chain_id: int = 0,
        cookie: int = 0,
        params: HopParams | None = None,
        channel: str = "",
    ) -> SimEvent:
        """Initiate a bidirectional reliable hop to ``peer``. The returned
        event fires with True once the SYNACK arrives, False on retry
        exhaustion."""
        params = params or HopParams()
        channel = channel or self.channel_tag
        done = SimEvent(self.fab)
        info = HopInfo(hop_id, chain_id, cookie, peer, True, params)
        self.hops[hop_id] = info
        self._make_engines(info, channel)
        state = {"tries": 0, "done": done, "gen": 0, "info": info, "channel": channel}
        self._pending_syn[hop_id] = state
        self._send_syn(hop_id)
        return done

    def _send_syn(self, hop_id: int) -> None:
        state = self._pending_syn.get(hop_id)
        if state is None:
            return
        info: HopInfo = state["info"]
        if state["tries"] >= info.params.max_retries:
            state["done"].set(False)
            del self._pending_syn[hop_id]
            return
        state["tries"] += 1
        state["gen"] += 1
        gen = state["gen"]
        buf = SYN_HEADER.pack(
            KIND_HOP_SYN, hop_id, info.chain_id, info.cookie, info.params.window, info.params.seg_payload
        )
        self.send_raw(info.peer, buf, channel=state["channel"])
        self.fab.call_later(info.params.rto_ns, lambda: self._syn_timeout(hop_id, gen))

    def _syn_timeout(self, hop_id: int, gen: int) -> None:
        state = self._pending_syn.get(hop_id)
        if state is None or state["gen"] != gen:
            return
        self._send_syn(hop_id)

    def _on_hop_syn(self, d: Datagram) -> None:
        _, hop_id, chain_id, cookie, window, seg_payload = SYN_HEADER.unpack_from(d.payload)
        if hop_id not in self.hops:
            params = HopParams(window=window, seg_payload=seg_payload)
            info = HopInfo(hop_id, chain_id, cookie, d.src, False, params)
            self.hops[hop_id] = info
            self._make_engines(info, self.channel_tag)
            self.on_hop_established(info)
        self.send_raw(d.src, SYNACK_HEADER.pack(KIND_HOP_SYNACK, hop_id))

    def _on_hop_synack(self, d: Datagram) -> None:
        _, hop_id = SYNACK_HEADER.unpack_from(d.payload)
        state = self._pending_syn.pop(hop_id, None)
        if state is None:
            return
        state["gen"] += 1
        state["done"].set(True)
        self.on_hop_established(state["info"])

    def _make_engines(self, info: HopInfo, channel: str) -> None:
        if info.hop_id in self.hop_senders:
            return
        self.hop_senders[info.hop_id] = HopSender(
            self.fab, self.addr, info.peer, info.hop_id, info.params, channel
        )
        self.hop_receivers[info.hop_id] = HopReceiver(
            self.fab, self.addr, info.peer, info.hop_id,
            on_deliver=lambda data, t, h=info.hop_id: self.on_hop_deliver(h, data, t),
            channel=channel,
        )

    # ---- subclass hooks ---------------------------------------------------------

    def on_hop_established(self, info: HopInfo) -> None:
        """Called once per side when a hop becomes usable."""

    def on_hop_deliver(self, hop_id: int, data: bytes, t: int) -> None:
        """Called with each in-order segment payload."""
