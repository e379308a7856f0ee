"""Owner-side telescoping circuit construction.

The owner contacts the first relay directly, then extends one hop at a time
through the partial circuit: the instruction for relay k travels sealed under
the keys of relays 1..k-1, so interior relays learn only their neighbors.
Every step is acknowledged back along the construction path and retried on
timeout.
"""

from __future__ import annotations

import struct

from .errors import CircuitBuildError
from .fabric import Fabric, OverlayAddress, SimEvent, ms
from .onion import (
    DOMAIN_BUILD,
    LayerKeySet,
    key_from_rng,
    make_nonce,
    seal_cell,
    seal_to_public,
)
from .party import PartyNode
from .relay import DIR_ADD_FORWARD, _EXTEND_HDR, _TEARDOWN_HDR
from .wire import (
    INSTR_EXIT,
    INSTR_EXTEND_TO,
    INSTR_RELAY,
    KIND_BUILD,
    KIND_EXTEND,
    KIND_TEARDOWN,
    pack_addr,
)

DEFAULT_EXTEND_TIMEOUT_NS = ms(2000)
DEFAULT_EXTEND_RETRIES = 3


def build_circuit(
    party: PartyNode,
    relay_addrs: list[OverlayAddress],
    directory,
    circuit_id: int,
    direction: int = DIR_ADD_FORWARD,
    timeout_ns: int = DEFAULT_EXTEND_TIMEOUT_NS,
    retries: int = DEFAULT_EXTEND_RETRIES,
):
    """Coroutine building a circuit through ``relay_addrs`` (owner-nearest
    first). Returns (LayerKeySet without e2e key, per-hop completion times).
    Raises CircuitBuildError with the failing hop index."""
    fab = party.fab
    cipher = party.cipher
    keys = []
    hop_times = []

    for hop, relay in enumerate(relay_addrs, start=1):
        key = key_from_rng(party.rng, key_id=hop)
        blob = seal_to_public(
            cipher, directory.public_key(relay.node), bytes([direction]) + key.key_bytes, party.rng
        )
        if hop == 1:
            wire = _EXTEND_HDR.pack(KIND_EXTEND, circuit_id) + pack_addr(party.addr) + blob
        else:
            # seal the extend instruction for the current tip (relay hop-1),
            # then wrap it in relay markers for every relay closer to us
            payload = bytes([INSTR_EXTEND_TO]) + pack_addr(relay) + blob
            cell = seal_cell(
                cipher, keys[hop - 2], circuit_id, make_nonce(DOMAIN_BUILD, hop - 1, hop), payload
            )
            for j in range(hop - 3, -1, -1):
                inner = bytes([INSTR_RELAY]) + cell.to_wire()
                cell = seal_cell(
                    cipher, keys[j], circuit_id, make_nonce(DOMAIN_BUILD, j + 1, hop), inner
                )
            wire = bytes([KIND_BUILD]) + cell.to_wire()

        acked = False
        for _attempt in range(retries):
            ev = SimEvent(fab)
            party.build_acks[circuit_id] = ev
            party.send_raw(relay_addrs[0], wire, channel="build")
            fab.call_later(timeout_ns, lambda e=ev: e.set(None))
            yield ev
            if ev.value == relay:
                acked = True
                break
        party.build_acks.pop(circuit_id, None)
        if not acked:
            teardown_circuit(party, relay_addrs[0], circuit_id)
            raise CircuitBuildError(hop)
        keys.append(key)
        hop_times.append(fab.clock)

    return LayerKeySet(tuple(keys)), hop_times


def establish_circuit_keys(
    party: PartyNode,
    relay_addrs: list[OverlayAddress],
    directory,
    circuit_id: int,
    direction: int = DIR_ADD_FORWARD,
    timeout_ns: int = DEFAULT_EXTEND_TIMEOUT_NS,
    retries: int = DEFAULT_EXTEND_RETRIES,
    max_time_ns: int | None = None,
) -> LayerKeySet:
    """Blocking-style wrapper around :func:`build_circuit`."""
    proc = party.fab.spawn(
        build_circuit(party, relay_addrs, directory, circuit_id, direction, timeout_ns, retries)
    )
    party.fab.run_until(proc.finished, max_time_ns)
    if proc.error is not None:
        raise proc.error
    keyset, _ = proc.finished.value
    return keyset


def teardown_circuit(party: PartyNode, first_relay: OverlayAddress, circuit_id: int) -> None:
    party.send_raw(first_relay, _TEARDOWN_HDR.pack(KIND_TEARDOWN, circuit_id), channel="build")


def exit_payload(dst: OverlayAddress, payload: bytes) -> bytes:
    """Innermost plaintext of a peel-forward circuit: deliver ``payload`` to
    ``dst`` when the last relay removes the final layer."""
    return bytes([INSTR_EXIT]) + pack_addr(dst) + payload
