"""Endpoint node for a client or server: consumes circuit-construction acks,
owns inbound data-channel cells, and feeds hop streams to channel readers."""

from __future__ import annotations

from .node import ProtocolNode
from .onion import SealedCell
from .relay import _ACK_HDR
from .wire import KIND_BUILD_BACK, KIND_DATA, KIND_EXTEND_ACK, unpack_addr


class PartyNode(ProtocolNode):
    def __init__(self, fab, label, cipher, rng):
        super().__init__(fab, label)
        self.cipher = cipher
        self.rng = rng
        self.build_acks: dict[int, object] = {}       # circuit_id -> SimEvent
        self.data_handlers: dict[int, object] = {}    # circuit_id -> callable(cell, t)
        self.hop_consumers: dict[int, object] = {}    # hop_id -> callable(data, t)
        self.unknown_data = 0

    def on_hop_deliver(self, hop_id: int, data: bytes, t: int) -> None:
        consumer = self.hop_consumers.get(hop_id)
        if consumer is not None:
            consumer(data, t)

    def handle_datagram(self, kind: int, d) -> None:
        if kind in (KIND_EXTEND_ACK, KIND_BUILD_BACK):
            _, cid = _ACK_HDR.unpack_from(d.payload)
            acker = unpack_addr(d.payload, _ACK_HDR.size)
            ev = self.build_acks.get(cid)
            if ev is not None and not ev.done:
                ev.set(acker)
        elif kind == KIND_DATA:
            try:
                cell = SealedCell.from_wire(d.payload[1:])
            except ValueError:
                self.malformed += 1
                return
            handler = self.data_handlers.get(cell.circuit_id)
            if handler is None:
                self.unknown_data += 1
            else:
                handler(cell, self.fab.clock)
        else:
            self.malformed += 1
