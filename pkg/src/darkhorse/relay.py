"""The UDP overlay relay.

A relay keeps a circuit table and, per delivered datagram, peels (outbound
circuits) or adds (inbound circuits) exactly one onion layer before forwarding
to the neighbor it learned during construction. Routing is by circuit id
only; the datagram source address is never consulted. Relays also terminate
reliable hops and splice pairs of them into the byte pipes that carry the
control channel and the vanilla baseline.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

from .fabric import Fabric, OverlayAddress, ms
from .node import HopInfo, ProtocolNode
from .onion import (
    DOMAIN_LAYER,
    KeyPair,
    RelayDirectory,
    SealedCell,
    SymmetricKey,
    layer_add,
    make_nonce,
    open_sealed,
    peel,
)
from .wire import (
    FRAME_CHAIN_EXTEND,
    FRAME_CHAIN_FAIL,
    FRAME_CHAIN_READY,
    FRAME_RENDEZVOUS_WAIT,
    FrameBuffer,
    INSTR_EXIT,
    INSTR_EXTEND_TO,
    INSTR_RELAY,
    KIND_BUILD,
    KIND_BUILD_BACK,
    KIND_DATA,
    KIND_EXTEND,
    KIND_EXTEND_ACK,
    KIND_TEARDOWN,
    pack_addr,
    pack_frame,
    unpack_addr,
)

DIR_ADD_FORWARD = 0   # relays add a layer; data flows toward the circuit owner
DIR_PEEL_FORWARD = 1  # relays peel a layer; data flows away from the owner

DEFAULT_IDLE_TIMEOUT_NS = 10 * 60 * 1_000_000_000

_EXTEND_HDR = struct.Struct(">BI")       # kind, circuit_id  (+ reply addr + blob)
_ACK_HDR = struct.Struct(">BI")          # kind, circuit_id  (+ acker addr)
_TEARDOWN_HDR = struct.Struct(">BI")


@dataclass
class CircuitEntry:
    circuit_id: int
    key: SymmetricKey
    direction: int
    next_hop: OverlayAddress          # toward the circuit owner
    prev_hop: OverlayAddress | None   # away from the owner (filled on extend)
    created_at: int
    last_used: int
    layer_counter: int = 0


class RelayNode(ProtocolNode):
    def __init__(
        self,
        fab: Fabric,
        directory: RelayDirectory,
        cipher,
        label: str = "",
        crypto_cost_ns: int = 0,
        idle_timeout_ns: int = DEFAULT_IDLE_TIMEOUT_NS,
    ):
        super().__init__(fab, label or "relay")
        self.directory = directory
        self.cipher = cipher
        self.crypto_cost_ns = crypto_cost_ns
        self.idle_timeout_ns = idle_timeout_ns
        self.keypair = KeyPair.generate(fab.rng)
        directory.register(self.node, self.keypair)

        self.circuits: dict[int, CircuitEntry] = {}
        self.forwarded = 0
        self.unknown_circuit = 0
        self.integrity_fail = 0
        self.extends_installed = 0
        self.extends_rejected = 0
        self.teardowns = 0

        self._pending_extend: dict[int, OverlayAddress] = {}
        # chain splicing: chain key -> hop ids at this relay (at most two)
        self._chain_hops: dict[int, list[int]] = {}
        self._hop_chain: dict[int, int] = {}
        self._pump: dict[int, int] = {}
        self._tip_buf: dict[int, FrameBuffer] = {}
        self._rendezvous: dict[int, int] = {}
        self._cookie_hops: dict[int, int] = {}
        self._pending_bridge: dict[int, list[bytes]] = {}

    # ---- datagram dispatch ------------------------------------------------

    def handle_datagram(self, kind: int, d) -> None:
        if kind == KIND_EXTEND:
            self.handle_extend(d)
        elif kind == KIND_EXTEND_ACK:
            self._on_extend_ack(d)
        elif kind == KIND_BUILD:
            self._on_build(d)
        elif kind == KIND_BUILD_BACK:
            self._on_build_back(d)
        elif kind == KIND_DATA:
            self.forward_data(d)
        elif kind == KIND_TEARDOWN:
            self._on_teardown(d)
        else:
            self.malformed += 1

    # ---- circuit construction ------------------------------------------------

    def handle_extend(self, d) -> None:
        try:
            _, cid = _EXTEND_HDR.unpack_from(d.payload)
            reply = unpack_addr(d.payload, _EXTEND_HDR.size)
            blob = d.payload[_EXTEND_HDR.size + 6 :]
            plain = open_sealed(self.cipher, self.keypair, blob)
            direction = plain[0]
            key = SymmetricKey(plain[1:33], key_id=cid)
        except Exception:
            self.malformed += 1
            return
        entry = self.circuits.get(cid)
        if entry is not None:
            if entry.key == key and entry.next_hop == reply:
                self._send_extend_ack(cid, reply)  # idempotent retry
            else:
                self.extends_rejected += 1
            return
        now = self.fab.clock
        self.circuits[cid] = CircuitEntry(cid, key, direction, reply, None, now, now)
        self.extends_installed += 1
        self._send_extend_ack(cid, reply)

    def _send_extend_ack(self, cid: int, reply: OverlayAddress) -> None:
        buf = _ACK_HDR.pack(KIND_EXTEND_ACK, cid) + pack_addr(self.addr)
        self.send_raw(reply, buf, channel="build")

    def _on_extend_ack(self, d) -> None:
        _, cid = _ACK_HDR.unpack_from(d.payload)
        acker = unpack_addr(d.payload, _ACK_HDR.size)
        entry = self.circuits.get(cid)
        if entry is None:
            self.unknown_circuit += 1
            return
        target = self._pending_extend.pop(cid, None)
        if target is not None:
            entry.prev_hop = target
        elif entry.prev_hop is None or entry.prev_hop != acker:
            return
        buf = _ACK_HDR.pack(KIND_BUILD_BACK, cid) + pack_addr(acker)
        self.send_raw(entry.next_hop, buf, channel="build")

    def _on_build(self, d) -> None:
        try:
            cell = SealedCell.from_wire(d.payload[1:])
        except ValueError:
            self.malformed += 1
            return
        entry = self.circuits.get(cell.circuit_id)
        if entry is None:
            self.unknown_circuit += 1
            return
        entry.last_used = self.fab.clock
        try:
            plain = peel(self.cipher, entry.key, cell)
        except Exception:
            self.integrity_fail += 1
            return
        if isinstance(plain, SealedCell) or not plain:
            self.malformed += 1
            return
        instr = plain[0]
        if instr == INSTR_EXTEND_TO:
            target = unpack_addr(plain, 1)
            blob = plain[7:]
            self._pending_extend[cell.circuit_id] = target
            buf = _EXTEND_HDR.pack(KIND_EXTEND, cell.circuit_id) + pack_addr(self.addr) + blob
            self._after_crypto(lambda: self.send_raw(target, buf, channel="build"))
        elif instr == INSTR_RELAY:
            if entry.prev_hop is None:
                self.malformed += 1
                return
            inner = plain[1:]
            dst = entry.prev_hop
            self._after_crypto(lambda: self.send_raw(dst, bytes([KIND_BUILD]) + inner, channel="build"))
        else:
            self.malformed += 1

    def _on_build_back(self, d) -> None:
        _, cid = _ACK_HDR.unpack_from(d.payload)
        entry = self.circuits.get(cid)
        if entry is None:
            self.unknown_circuit += 1
            return
        self.send_raw(entry.next_hop, d.payload, channel="build")

    def _on_teardown(self, d) -> None:
        _, cid = _TEARDOWN_HDR.unpack_from(d.payload)
        entry = self.circuits.pop(cid, None)
        if entry is None:
            return
        self.teardowns += 1
        if entry.prev_hop is not None:
            self.send_raw(entry.prev_hop, d.payload, channel="build")

    # ---- data plane -------------------------------------------------------------

    def forward_data(self, d) -> None:
        """Apply this relay's layer to a data cell and pass it along. The
        source address of ``d`` plays no part in the lookup."""
        try:
            cell = SealedCell.from_wire(d.payload[1:])
        except ValueError:
            self.malformed += 1
            return
        entry = self.circuits.get(cell.circuit_id)
        if entry is None:
            self.unknown_circuit += 1
            return
        entry.last_used = self.fab.clock
        if entry.direction == DIR_ADD_FORWARD:
            nonce = make_nonce(DOMAIN_LAYER, 0, entry.layer_counter)
            entry.layer_counter += 1
            out = layer_add(self.cipher, entry.key, cell, nonce)
            dst = entry.next_hop
            self.forwarded += 1
            self._after_crypto(
                lambda: self.send_raw(dst, bytes([KIND_DATA]) + out.to_wire(), channel="data")
            )
        else:
            try:
                peeled = peel(self.cipher, entry.key, cell)
            except Exception:
                self.integrity_fail += 1
                return
            self.forwarded += 1
            if isinstance(peeled, SealedCell):
                if entry.prev_hop is None:
                    self.malformed += 1
                    return
                dst = entry.prev_hop
                wire = bytes([KIND_DATA]) + peeled.to_wire()
                self._after_crypto(lambda: self.send_raw(dst, wire, channel="data"))
            else:
                if not peeled or peeled[0] != INSTR_EXIT:
                    self.malformed += 1
                    return
                dst = unpack_addr(peeled, 1)
                payload = peeled[7:]
                self._after_crypto(lambda: self.send_raw(dst, payload, channel="data"))

    def _after_crypto(self, action) -> None:
        if self.crypto_cost_ns > 0:
            self.fab.call_later(self.crypto_cost_ns, action)
        else:
            action()

    def expire_idle(self) -> int:
        """Drop circuit entries idle longer than the timeout."""
        now = self.fab.clock
        stale = [cid for cid, e in self.circuits.items() if now - e.last_used > self.idle_timeout_ns]
        for cid in stale:
            del self.circuits[cid]
        return len(stale)

    # ---- chain splicing (control path / vanilla baseline) -------------------------

    def on_hop_established(self, info: HopInfo) -> None:
        if info.chain_id == 0:
            return
        key = info.chain_id
        if info.cookie:
            if info.cookie in self._rendezvous:
                key = self._rendezvous.pop(info.cookie)
            elif not info.initiated:
                # rendezvous hop arrived before the other side registered the
                # cookie: buffer its bytes until the registration shows up
                self._cookie_hops[info.cookie] = info.hop_id
                self._pending_bridge[info.hop_id] = []
                return
        self._attach_chain_hop(info.hop_id, key, announce=info.initiated)

    def _attach_chain_hop(self, hop_id: int, key: int, announce: bool) -> None:
        self._hop_chain[hop_id] = key
        hops = self._chain_hops.setdefault(key, [])
        if hop_id in hops:
            return
        hops.append(hop_id)
        if len(hops) == 1:
            self._tip_buf[key] = FrameBuffer()
        elif len(hops) == 2:
            left, right = hops
            self._pump[left] = right
            self._pump[right] = left
            self._tip_buf.pop(key, None)
            if announce:
                # this relay extended the chain; tell the endpoint
                ready = pack_frame(FRAME_CHAIN_READY, struct.pack(">I", hop_id))
                self.hop_senders[left].send_segment(ready)
            backlog = self._pending_bridge.pop(right, None)
            if backlog:
                sender = self.hop_senders[left]
                for seg in backlog:
                    self._after_crypto(lambda s=seg: sender.send_segment(s))

    def on_hop_deliver(self, hop_id: int, data: bytes, t: int) -> None:
        pending = self._pending_bridge.get(hop_id)
        if pending is not None:
            pending.append(data)
            return
        target = self._pump.get(hop_id)
        if target is not None:
            sender = self.hop_senders[target]
            self._after_crypto(lambda: sender.send_segment(data))
            return
        key = self._hop_chain.get(hop_id)
        if key is None:
            return
        buf = self._tip_buf.get(key)
        if buf is None:
            return
        for ftype, body in buf.feed(data):
            self._on_tip_frame(hop_id, key, ftype, body)

    def _on_tip_frame(self, hop_id: int, chain_key: int, ftype: int, body: bytes) -> None:
        if ftype == FRAME_CHAIN_EXTEND:
            target = unpack_addr(body, 0)
            new_hop_id, cookie = struct.unpack_from(">II", body, 6)
            params = self.hops[hop_id].params
            done = self.establish_hop(
                target, new_hop_id, chain_id=chain_key, cookie=cookie, params=params
            )
            def notify():
                if done.value is not True:
                    fail = pack_frame(FRAME_CHAIN_FAIL, struct.pack(">I", new_hop_id))
                    self.hop_senders[hop_id].send_segment(fail)
                # success is announced by on_hop_established after splicing
            self._watch(done, notify)
        elif ftype == FRAME_RENDEZVOUS_WAIT:
            (cookie,) = struct.unpack_from(">I", body)
            waiting = self._cookie_hops.pop(cookie, None)
            if waiting is not None:
                self._attach_chain_hop(waiting, chain_key, announce=False)
            else:
                self._rendezvous[cookie] = chain_key
        else:
            self.malformed += 1

    def _watch(self, event, fn) -> None:
        def waiter():
            yield event
            fn()
        self.fab.spawn(waiter())

    # ---- stats --------------------------------------------------------------------

    def stats_row(self) -> dict:
        nc = self.fab.node_counters[self.node]
        return {
            "relay_id": self.node,
            "forwarded": self.forwarded,
            "unknown_circuit": self.unknown_circuit,
            "integrity_fail": self.integrity_fail,
            "bytes_in": nc.recv_bytes,
            "bytes_out": nc.sent_bytes,
        }


def write_relay_stats_csv(path, relays: list[RelayNode]) -> None:
    fields = ["relay_id", "forwarded", "unknown_circuit", "integrity_fail", "bytes_in", "bytes_out"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in relays:
            w.writerow(r.stats_row())
