"""Typed control-channel messages and their wire codec.

Every message is a frame: ``length:u32 | type:u8 | body`` (big-endian). The
codec is versioned via the ``proto_version`` byte in Hello and is covered by
golden byte vectors in the test suite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .fabric import OverlayAddress
from .wire import FRAME_HEADER, pack_addr, unpack_addr

PROTO_VERSION = 1

MSG_HELLO = 0x01
MSG_HELLO_ACK = 0x02
MSG_CHANNEL_BINDING = 0x03
MSG_REQUEST = 0x04
MSG_METADATA = 0x05
MSG_TRANSFER_COMPLETE = 0x06
MSG_LOSS_REPORT = 0x07
MSG_TEARDOWN = 0x08
MSG_REPAIR_CHUNK = 0x09

DIR_C2S = 0
DIR_S2C = 1


@dataclass(frozen=True)
class Hello:
    session_id: int
    e2e_key_material: bytes  # X25519 public key of the sender
    proto_version: int = PROTO_VERSION

    def __post_init__(self):
        if len(self.e2e_key_material) != 32:
            raise ValueError("key material must be 32 bytes")


@dataclass(frozen=True)
class HelloAck:
    session_id: int
    e2e_key_material: bytes

    def __post_init__(self):
        if len(self.e2e_key_material) != 32:
            raise ValueError("key material must be 32 bytes")


@dataclass(frozen=True)
class ChannelBinding:
    direction: int  # DIR_C2S or DIR_S2C: who will SEND on the bound channel
    last_relay_addr: OverlayAddress
    temp_src_addr: OverlayAddress

    def __post_init__(self):
        if self.direction not in (DIR_C2S, DIR_S2C):
            raise ValueError("direction must be c2s or s2c")


@dataclass(frozen=True)
class Request:
    transfer_id: int
    resource_id: int
    size_hint: int = 0


@dataclass(frozen=True)
class Metadata:
    transfer_id: int
    total_packets: int
    packet_size: int  # on-wire packet size, bytes
    seq_bytes: int
    chunk_size: int
    data_len: int

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        expect = -(-self.data_len // self.chunk_size)
        if self.total_packets != expect:
            raise ValueError(
                f"total_packets {self.total_packets} != ceil(data_len/chunk_size) = {expect}"
            )
        if self.total_packets > 0xFFFFFFFF:
            raise ValueError("total_packets exceeds u32")


@dataclass(frozen=True)
class TransferComplete:
    transfer_id: int
    packets_sent: int
    round_index: int = 0


@dataclass(frozen=True)
class LossReport:
    transfer_id: int
    missing_seqs: tuple[int, ...]

    def __post_init__(self):
        seqs = self.missing_seqs
        if not isinstance(seqs, tuple):
            object.__setattr__(self, "missing_seqs", tuple(seqs))
            seqs = self.missing_seqs
        if any(b <= a for a, b in zip(seqs, seqs[1:])):
            raise ValueError("missing_seqs must be strictly increasing")


@dataclass(frozen=True)
class Teardown:
    session_id: int


@dataclass(frozen=True)
class RepairChunk:
    """One recovered packet pushed over the reliable channel."""

    transfer_id: int
    seq: int
    chunk: bytes


ControlMessage = (
    Hello | HelloAck | ChannelBinding | Request | Metadata | TransferComplete
    | LossReport | Teardown | RepairChunk
)

_U32 = struct.Struct(">I")
_HELLO = struct.Struct(">IB32s")
_HELLO_ACK = struct.Struct(">I32s")
_REQUEST = struct.Struct(">IIQ")
_METADATA = struct.Struct(">IIIBIQ")
_COMPLETE = struct.Struct(">IQI")
_REPAIR = struct.Struct(">II")


def encode_message(msg: ControlMessage) -> bytes:
    if isinstance(msg, Hello):
        body = _HELLO.pack(msg.session_id, msg.proto_version, msg.e2e_key_material)
        mtype = MSG_HELLO
    elif isinstance(msg, HelloAck):
        body = _HELLO_ACK.pack(msg.session_id, msg.e2e_key_material)
        mtype = MSG_HELLO_ACK
    elif isinstance(msg, ChannelBinding):
        body = bytes([msg.direction]) + pack_addr(msg.last_relay_addr) + pack_addr(msg.temp_src_addr)
        mtype = MSG_CHANNEL_BINDING
    elif isinstance(msg, Request):
        body = _REQUEST.pack(msg.transfer_id, msg.resource_id, msg.size_hint)
        mtype = MSG_REQUEST
    elif isinstance(msg, Metadata):
        body = _METADATA.pack(
            msg.transfer_id, msg.total_packets, msg.packet_size,
            msg.seq_bytes, msg.chunk_size, msg.data_len,
        )
        mtype = MSG_METADATA
    elif isinstance(msg, TransferComplete):
        body = _COMPLETE.pack(msg.transfer_id, msg.packets_sent, msg.round_index)
        mtype = MSG_TRANSFER_COMPLETE
    elif isinstance(msg, LossReport):
        body = _U32.pack(msg.transfer_id) + _U32.pack(len(msg.missing_seqs))
        body += b"".join(_U32.pack(s) for s in msg.missing_seqs)
        mtype = MSG_LOSS_REPORT
    elif isinstance(msg, Teardown):
        body = _U32.pack(msg.session_id)
        mtype = MSG_TEARDOWN
    elif isinstance(msg, RepairChunk):
        body = _REPAIR.pack(msg.transfer_id, msg.seq) + msg.chunk
        mtype = MSG_REPAIR_CHUNK
    else:
        raise TypeError(f"not a control message: {msg!r}")
    return FRAME_HEADER.pack(len(body), mtype) + body


def decode_body(mtype: int, body: bytes) -> ControlMessage:
    if mtype == MSG_HELLO:
        session_id, ver, km = _HELLO.unpack(body)
        return Hello(session_id, km, ver)
    if mtype == MSG_HELLO_ACK:
        session_id, km = _HELLO_ACK.unpack(body)
        return HelloAck(session_id, km)
    if mtype == MSG_CHANNEL_BINDING:
        return ChannelBinding(body[0], unpack_addr(body, 1), unpack_addr(body, 7))
    if mtype == MSG_REQUEST:
        return Request(*_REQUEST.unpack(body))
    if mtype == MSG_METADATA:
        return Metadata(*_METADATA.unpack(body))
    if mtype == MSG_TRANSFER_COMPLETE:
        return TransferComplete(*_COMPLETE.unpack(body))
    if mtype == MSG_LOSS_REPORT:
        tid = _U32.unpack_from(body, 0)[0]
        count = _U32.unpack_from(body, 4)[0]
        seqs = struct.unpack_from(f">{count}I", body, 8) if count else ()
        return LossReport(tid, tuple(seqs))
    if mtype == MSG_TEARDOWN:
        return Teardown(_U32.unpack(body)[0])
    if mtype == MSG_REPAIR_CHUNK:
        tid, seq = _REPAIR.unpack_from(body, 0)
        return RepairChunk(tid, seq, body[_REPAIR.size :])
    raise ValueError(f"unknown message type {mtype}")


def decode_message(buf: bytes) -> ControlMessage:
    """Decode one full frame (inverse of encode_message)."""
    length, mtype = FRAME_HEADER.unpack_from(buf)
    body = buf[FRAME_HEADER.size : FRAME_HEADER.size + length]
    if len(body) != length:
        raise ValueError("truncated message")
    return decode_body(mtype, body)
