import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from darkhorse.arq import HopParams, reliable_send
from darkhorse.errors import HopFailure
from darkhorse.fabric import Fabric, LinkConfig, ms
from darkhorse.node import ProtocolNode


class Endpoint(ProtocolNode):
    def __init__(self, fab, label):
        super().__init__(fab, label)
        self.received = bytearray()
        self.segment_times = []

    def on_hop_deliver(self, hop_id, data, t):
        self.received.extend(data)
        self.segment_times.append(t)


def make_pair(seed=0, latency_ms=20, fwd_loss=0.0, back_loss=0.0, params=None):
    fab = Fabric(seed=seed, default_link=LinkConfig(latency_ns=ms(latency_ms)))
    a = Endpoint(fab, "a")
    b = Endpoint(fab, "b")
    if fwd_loss:
        fab.set_link_loss(a.node, b.node, fwd_loss)
    if back_loss:
        fab.set_link_loss(b.node, a.node, back_loss)
    done = a.establish_hop(b.addr, hop_id=1, params=params or HopParams())
    fab.run_until(done)
    assert done.value is True
    return fab, a, b


def test_zero_loss_single_transmission_per_segment():
    params = HopParams(window=32, seg_payload=100)
    fab, a, b = make_pair(params=params)
    data = bytes(range(256)) * 4  # 1024 B -> 11 segments
    sender = a.hop_senders[1]
    t0 = fab.clock
    n = reliable_send(fab, sender, data)
    assert n == len(data)
    assert bytes(b.received) == data
    assert sender.transmissions == 11
    assert sender.retransmissions == 0
    # 11 segments fit in one window: delivery takes one link latency,
    # the final ack one more.
    assert b.segment_times[-1] == t0 + ms(20)
    assert fab.clock == t0 + 2 * ms(20)


def test_windowed_delivery_time_analytic():
    # window 4, 8 segments, zero loss: second window departs after the
    # first ack returns (one RTT), so total delivery = 2 * latency + RTT.
    params = HopParams(window=4, seg_payload=10)
    fab, a, b = make_pair(params=params)
    t0 = fab.clock
    reliable_send(fab, a.hop_senders[1], b"x" * 80)
    rtt = 2 * ms(20)
    assert b.segment_times[-1] == t0 + rtt + ms(20)


def test_loss_half_retransmission_count_geometric():
    # Forward loss 0.5, lossless acks: transmissions per segment are
    # geometric with mean 1/(1-p) = 2. Oracle: sample mean within 3 sigma.
    # Retry budget is generous so no segment exhausts it (0.5^30 per try).
    trials = 1000
    params = HopParams(window=1, seg_payload=8, rto_ns=ms(50), max_retries=30)
    fab, a, b = make_pair(seed=77, fwd_loss=0.5, params=params)
    sender = a.hop_senders[1]
    for i in range(trials):
        reliable_send(fab, sender, b"seg%05d" % i)
    assert bytes(b.received) == b"".join(b"seg%05d" % i for i in range(trials))
    mean_tx = sender.transmissions / trials
    sigma = (2.0 / trials) ** 0.5  # geometric variance (1-p)/p^2 = 2
    assert abs(mean_tx - 2.0) < 3 * sigma
    assert sender.transmissions > trials  # bytes on wire exceed payload


def test_total_loss_fails_after_max_retries():
    params = HopParams(window=4, seg_payload=16, rto_ns=ms(100), max_retries=8)
    fab, a, b = make_pair(seed=5, params=params)
    fab.set_link_loss(a.node, b.node, 1.0)
    sender = a.hop_senders[1]
    t0 = fab.clock
    with pytest.raises(HopFailure):
        reliable_send(fab, sender, b"doomed payload")
    assert sender.failed
    # initial send, then retransmits on timeouts 1..7, fail at the 8th
    assert sender.transmissions == 8
    assert fab.clock == t0 + 8 * ms(100)


def test_ack_loss_triggers_retransmission_but_no_duplication():
    params = HopParams(window=8, seg_payload=32, rto_ns=ms(60))
    fab, a, b = make_pair(seed=11, back_loss=0.4, params=params)
    data = random.Random(3).randbytes(4096)
    reliable_send(fab, a.hop_senders[1], data)
    assert bytes(b.received) == data  # exactly once, in order


def test_hop_establish_retries_on_syn_loss():
    fab = Fabric(seed=8, default_link=LinkConfig(latency_ns=ms(10), loss_rate=0.6))
    a = Endpoint(fab, "a")
    b = Endpoint(fab, "b")
    done = a.establish_hop(b.addr, hop_id=7, params=HopParams(rto_ns=ms(50), max_retries=25))
    fab.run_until(done)
    assert done.value is True


def test_hop_establish_fails_when_peer_unreachable():
    fab = Fabric(seed=9, default_link=LinkConfig(latency_ns=ms(10), loss_rate=1.0))
    a = Endpoint(fab, "a")
    b = Endpoint(fab, "b")
    done = a.establish_hop(b.addr, hop_id=7, params=HopParams(rto_ns=ms(50), max_retries=3))
    fab.run_until(done)
    assert done.value is False


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), loss=st.floats(0.0, 0.45))
def test_exactly_once_in_order_property(seed, loss):
    params = HopParams(window=8, seg_payload=64, rto_ns=ms(80), max_retries=30)
    fab, a, b = make_pair(seed=seed, fwd_loss=loss, back_loss=loss / 2, params=params)
    data = random.Random(seed).randbytes(1500)
    reliable_send(fab, a.hop_senders[1], data)
    assert bytes(b.received) == data


def test_bidirectional_streams_share_hop():
    fab, a, b = make_pair(params=HopParams(seg_payload=50))
    reliable_send(fab, a.hop_senders[1], b"from a")
    reliable_send(fab, b.hop_senders[1], b"from b")
    assert bytes(b.received) == b"from a"
    assert bytes(a.received) == b"from b"
