"""Layered authenticated encryption for circuits.

A sealed cell is ``circuit_id:4 | layer_count:1 | nonce:12 | ciphertext:N``
(big-endian). Each seal level is one layer: peeling a cell with L > 1 yields
the inner cell (the inner nonce is the first 12 bytes of the plaintext);
peeling a cell with L == 1 yields the application payload. Every layer adds
exactly LAYER_OVERHEAD bytes, so all packets of a transfer stay the same size
on the wire at each hop.

Nonces are never random on the data plane: they pack a domain tag, a layer
index, and a counter, so identical inputs produce identical bytes for a fixed
seed (see golden vectors).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from .errors import IntegrityError

KEY_LEN = 32
NONCE_LEN = 12
TAG_LEN = 16

CELL_HEADER = struct.Struct(">IB")  # circuit_id, layer count
CELL_BASE_OVERHEAD = CELL_HEADER.size + NONCE_LEN + TAG_LEN  # 33 bytes, 1 layer
LAYER_OVERHEAD = NONCE_LEN + TAG_LEN  # each extra layer adds 28 bytes

# Nonce domain tags (first nonce byte).
DOMAIN_DATA = 0x00      # end-to-end data packets (counter = seq)
DOMAIN_REQUEST = 0x01   # end-to-end request cells
DOMAIN_LAYER = 0x02     # relay-added / owner-wrapped onion layers
DOMAIN_BUILD = 0x03     # circuit construction cells
DOMAIN_CONTROL = 0x04   # control channel messages


def make_nonce(domain: int, layer: int, counter: int) -> bytes:
    return struct.pack(">BBHQ", domain, layer, 0, counter)


@dataclass(frozen=True)
class SymmetricKey:
    key_bytes: bytes
    key_id: int = 0

    def __post_init__(self):
        if len(self.key_bytes) != KEY_LEN:
            raise ValueError("keys are 32 bytes")


@dataclass(frozen=True)
class LayerKeySet:
    """Keys for one circuit: relay keys in path order (owner-nearest first,
    which is also unwrap order) plus the client/server end-to-end key."""

    relay_keys: tuple[SymmetricKey, ...]
    e2e_key: SymmetricKey | None = None

    def __post_init__(self):
        seen = {k.key_bytes for k in self.relay_keys}
        if len(seen) != len(self.relay_keys):
            raise ValueError("relay keys must be distinct")
        if self.e2e_key is not None and self.e2e_key.key_bytes in seen:
            raise ValueError("e2e key must differ from every relay key")

    def with_e2e(self, e2e: SymmetricKey) -> "LayerKeySet":
        return LayerKeySet(self.relay_keys, e2e)


@dataclass(frozen=True)
class SealedCell:
    circuit_id: int
    layers: int
    nonce: bytes
    ciphertext: bytes

    def to_wire(self) -> bytes:
        return CELL_HEADER.pack(self.circuit_id, self.layers) + self.nonce + self.ciphertext

    @classmethod
    def from_wire(cls, buf: bytes) -> "SealedCell":
        if len(buf) < CELL_BASE_OVERHEAD:
            raise ValueError("short cell")
        cid, layers = CELL_HEADER.unpack_from(buf)
        nonce = buf[CELL_HEADER.size : CELL_HEADER.size + NONCE_LEN]
        return cls(cid, layers, nonce, buf[CELL_HEADER.size + NONCE_LEN :])

    def wire_size(self) -> int:
        return CELL_HEADER.size + NONCE_LEN + len(self.ciphertext)


def cell_wire_size(payload_len: int, layers: int) -> int:
    """On-wire size of a payload sealed under ``layers`` nested layers."""
    return CELL_HEADER.size + payload_len + layers * LAYER_OVERHEAD


class AeadCipher:
    """ChaCha20-Poly1305: 32-byte keys, 12-byte nonces, 16-byte tags."""

    name = "aead"

    def __init__(self):
        self._cache: dict[bytes, ChaCha20Poly1305] = {}

    def _ctx(self, key: SymmetricKey) -> ChaCha20Poly1305:
        ctx = self._cache.get(key.key_bytes)
        if ctx is None:
            ctx = self._cache[key.key_bytes] = ChaCha20Poly1305(key.key_bytes)
        return ctx

    def seal(self, key: SymmetricKey, nonce: bytes, plain: bytes, aad: bytes) -> bytes:
        return self._ctx(key).encrypt(nonce, plain, aad)

    def open(self, key: SymmetricKey, nonce: bytes, ct: bytes, aad: bytes) -> bytes:
        try:
            return self._ctx(key).decrypt(nonce, ct, aad)
        except InvalidTag as exc:
            raise IntegrityError("authentication tag mismatch") from exc


class NullCipher:
    """Identity transform with a keyed-checksum tag of the same width as the
    AEAD tag. Used only so wire-format golden vectors are human-readable."""

    name = "null"

    def _tag(self, key: SymmetricKey, nonce: bytes, data: bytes, aad: bytes) -> bytes:
        h = hashlib.blake2b(key=key.key_bytes, digest_size=TAG_LEN)
        h.update(nonce)
        h.update(aad)
        h.update(data)
        return h.digest()

    def seal(self, key: SymmetricKey, nonce: bytes, plain: bytes, aad: bytes) -> bytes:
        return plain + self._tag(key, nonce, plain, aad)

    def open(self, key: SymmetricKey, nonce: bytes, ct: bytes, aad: bytes) -> bytes:
        if len(ct) < TAG_LEN:
            raise IntegrityError("short ciphertext")
        plain, tag = ct[:-TAG_LEN], ct[-TAG_LEN:]
        if self._tag(key, nonce, plain, aad) != tag:
            raise IntegrityError("checksum tag mismatch")
        return plain


_CIPHERS = {"aead": AeadCipher, "null": NullCipher}


def get_cipher(name: str):
    try:
        return _CIPHERS[name]()
    except KeyError:
        raise ValueError(f"unknown cipher {name!r}") from None


def _aad(circuit_id: int) -> bytes:
    return struct.pack(">I", circuit_id)


def seal_cell(cipher, key: SymmetricKey, circuit_id: int, nonce: bytes, payload: bytes) -> SealedCell:
    """Base (innermost) seal: a 1-layer cell."""
    ct = cipher.seal(key, nonce, payload, _aad(circuit_id))
    return SealedCell(circuit_id, 1, nonce, ct)


def layer_add(cipher, key: SymmetricKey, cell: SealedCell, nonce: bytes) -> SealedCell:
    """Add one layer on top of an existing cell (inbound relays do this)."""
    inner = cell.nonce + cell.ciphertext
    ct = cipher.seal(key, nonce, inner, _aad(cell.circuit_id))
    return SealedCell(cell.circuit_id, cell.layers + 1, nonce, ct)


def peel(cipher, key: SymmetricKey, cell: SealedCell) -> SealedCell | bytes:
    """Remove exactly one layer. The innermost peel yields the payload bytes;
    any outer peel yields the next cell."""
    plain = cipher.open(key, cell.nonce, cell.ciphertext, _aad(cell.circuit_id))
    if cell.layers <= 1:
        return plain
    return SealedCell(cell.circuit_id, cell.layers - 1, plain[:NONCE_LEN], plain[NONCE_LEN:])


def onion_wrap(cipher, relay_keys, circuit_id: int, payload: bytes, counter: int) -> SealedCell:
    """Seal ``payload`` under every relay key, innermost-first, so that each
    relay along an owner-to-far-end path peels one layer in path order."""
    if not payload:
        raise ValueError("payload must be non-empty")
    keys = list(relay_keys)
    cell = seal_cell(
        cipher, keys[-1], circuit_id, make_nonce(DOMAIN_LAYER, len(keys) - 1, counter), payload
    )
    for i in range(len(keys) - 2, -1, -1):
        cell = layer_add(cipher, keys[i], cell, make_nonce(DOMAIN_LAYER, i, counter))
    return cell


def unwrap_all(cipher, keyset: LayerKeySet, cell: SealedCell) -> bytes:
    """Owner side of an inbound channel: remove every relay layer in order
    (owner-nearest first), then open the end-to-end layer."""
    current: SealedCell | bytes = cell
    for key in keyset.relay_keys:
        if not isinstance(current, SealedCell):
            raise IntegrityError("ran out of layers before relay keys")
        current = peel(cipher, key, current)
    if keyset.e2e_key is None:
        return current  # type: ignore[return-value]
    if not isinstance(current, SealedCell):
        raise IntegrityError("missing end-to-end layer")
    inner = peel(cipher, keyset.e2e_key, current)
    if isinstance(inner, SealedCell):
        raise IntegrityError("unexpected extra layer")
    return inner


class E2ESealer:
    """End-to-end packet encryption. The sequence number feeds the nonce, so
    each seq may be sealed at most once per (lane, domain); the lane byte
    separates the two directions sharing one session key."""

    def __init__(self, cipher, key: SymmetricKey, circuit_id: int, domain: int = DOMAIN_DATA, lane: int = 0):
        self.cipher = cipher
        self.key = key
        self.circuit_id = circuit_id
        self.domain = domain
        self.lane = lane
        self._used: set[int] = set()

    def seal(self, seq: int, payload: bytes) -> SealedCell:
        from .errors import NonceReuseError

        if seq in self._used:
            raise NonceReuseError(f"seq {seq} already sealed")
        self._used.add(seq)
        return self.seal_replay(seq, payload)

    def seal_replay(self, seq: int, payload: bytes) -> SealedCell:
        """Re-seal a previously sent seq (retransmission): same nonce, same
        plaintext, hence an identical cell."""
        nonce = make_nonce(self.domain, self.lane, seq)
        return seal_cell(self.cipher, self.key, self.circuit_id, nonce, payload)

    def open(self, cell: SealedCell) -> tuple[int, bytes]:
        """Returns (domain, plaintext)."""
        plain = peel(self.cipher, self.key, cell)
        if isinstance(plain, SealedCell):
            raise IntegrityError("expected innermost cell")
        return cell.nonce[0], plain


# ---- key establishment primitives -------------------------------------------


def key_from_rng(rng, key_id: int = 0) -> SymmetricKey:
    return SymmetricKey(rng.randbytes(KEY_LEN), key_id)


def _kdf(shared: bytes, context: bytes) -> bytes:
    return hashlib.blake2b(shared, digest_size=KEY_LEN, person=context[:16]).digest()


class KeyPair:
    """X25519 keypair with deterministic generation from a seeded rng."""

    def __init__(self, private: X25519PrivateKey):
        self.private = private
        self.public_bytes = private.public_key().public_bytes_raw()

    @classmethod
    def generate(cls, rng) -> "KeyPair":
        return cls(X25519PrivateKey.from_private_bytes(rng.randbytes(KEY_LEN)))


def seal_to_public(cipher, public_bytes: bytes, plain: bytes, rng) -> bytes:
    """Seal a blob to a long-term public key: ephemeral X25519 + AEAD."""
    eph = KeyPair.generate(rng)
    shared = eph.private.exchange(X25519PublicKey.from_public_bytes(public_bytes))
    key = SymmetricKey(_kdf(shared + eph.public_bytes, b"extend-seal"))
    ct = cipher.seal(key, bytes(NONCE_LEN), plain, b"")
    return eph.public_bytes + ct


def open_sealed(cipher, keypair: KeyPair, blob: bytes) -> bytes:
    if len(blob) < KEY_LEN:
        raise IntegrityError("short sealed blob")
    eph_pub, ct = blob[:KEY_LEN], blob[KEY_LEN:]
    shared = keypair.private.exchange(X25519PublicKey.from_public_bytes(eph_pub))
    key = SymmetricKey(_kdf(shared + eph_pub, b"extend-seal"))
    return cipher.open(key, bytes(NONCE_LEN), ct, b"")


def derive_shared_key(own: KeyPair, peer_public: bytes, context: bytes = b"e2e") -> SymmetricKey:
    shared = own.private.exchange(X25519PublicKey.from_public_bytes(peer_public))
    return SymmetricKey(_kdf(shared, context))


class RelayDirectory:
    """Simulated directory mapping relay node index to its long-term public
    key. Private halves stay with the relays."""

    def __init__(self):
        self._public: dict[int, bytes] = {}

    def register(self, node: int, keypair: KeyPair) -> None:
        self._public[node] = keypair.public_bytes

    def public_key(self, node: int) -> bytes:
        return self._public[node]
