"""Datagram-level and stream-level wire constants.

Datagram payloads start with a one-byte kind tag. Stream frames (carried over
reliable hops) are ``len:u32 | type:u8 | body``, big-endian throughout.
"""

from __future__ import annotations

import struct

# ---- datagram kinds ----------------------------------------------------------
KIND_EXTEND = 0x01       # install a circuit entry (sealed key material inside)
KIND_EXTEND_ACK = 0x02   # extend acknowledged by the new relay
KIND_BUILD = 0x03        # owner-sealed construction cell relayed along the path
KIND_BUILD_BACK = 0x04   # extend ack relayed back toward the owner
KIND_TEARDOWN = 0x05     # remove a circuit entry, forwarded away from owner
KIND_DATA = 0x06         # data-plane onion cell

KIND_HOP_SYN = 0x10
KIND_HOP_SYNACK = 0x11
KIND_SEG = 0x12
KIND_SEG_ACK = 0x13

# ---- construction instructions (inside peeled BUILD cells) -------------------
INSTR_EXTEND_TO = 0x01   # followed by target addr + sealed blob
INSTR_RELAY = 0x02       # followed by an inner cell for the next relay
INSTR_EXIT = 0x03        # innermost instruction of a peel-forward circuit

# ---- stream frame types -------------------------------------------------------
FRAME_CHAIN_EXTEND = 0xC0
FRAME_CHAIN_READY = 0xC1
FRAME_RENDEZVOUS_WAIT = 0xC2
FRAME_CHAIN_FAIL = 0xC3
FRAME_SEALED_MSG = 0xE0
FRAME_STREAM_CELL = 0xE1
FRAME_SENDME = 0xE2
# 0x01-0x0F: plaintext control messages (see messages.py)

FRAME_HEADER = struct.Struct(">IB")  # body length, frame type

SEG_HEADER = struct.Struct(">BII")          # kind, hop_id, seq
ACK_HEADER = struct.Struct(">BII")          # kind, hop_id, cumulative ack
SYN_HEADER = struct.Struct(">BIIIHH")       # kind, hop_id, chain_id, cookie, window, seg_payload
SYNACK_HEADER = struct.Struct(">BI")        # kind, hop_id

ADDR_STRUCT = struct.Struct(">IH")  # node index, port


def pack_addr(addr) -> bytes:
    return ADDR_STRUCT.pack(addr.node, addr.port)


def unpack_addr(buf: bytes, offset: int = 0):
    from .fabric import OverlayAddress

    node, port = ADDR_STRUCT.unpack_from(buf, offset)
    return OverlayAddress(node, port)


def pack_frame(ftype: int, body: bytes) -> bytes:
    return FRAME_HEADER.pack(len(body), ftype) + body


class FrameBuffer:
    """Accumulates stream bytes and yields complete (type, body) frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[tuple[int, bytes]]:
        self._buf.extend(data)
        frames = []
        while True:
            if len(self._buf) < FRAME_HEADER.size:
                break
            length, ftype = FRAME_HEADER.unpack_from(self._buf)
            end = FRAME_HEADER.size + length
            if len(self._buf) < end:
                break
            frames.append((ftype, bytes(self._buf[FRAME_HEADER.size : end])))
            del self._buf[:end]
        return frames

    def pending(self) -> bytes:
        return bytes(self._buf)
