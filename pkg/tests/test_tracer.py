import heapq

import pytest
from hypothesis import given, strategies as st
from conftest import events, run_text

from qspn.addressing import TopologyParams, make_address, parse_address
from qspn.maps import BnodeFact, NodeMaps, RouteFact, apply_fact
from qspn.rem import IDENTITY, Rem, rem_compose
from qspn.tracer import (Hop, Kind, LoopError, PacketError, TracerPacket, append_hop, decode, dedup_key,
                         encode, has_traversed, is_interesting, lock, unlock)

P = TopologyParams(3, 256)


def A(text):
    return parse_address(text, P)


def ctp(level, *ids):
    return TracerPacket(level, hops=tuple(Hop(i, level) for i in ids))


def test_append_hop():
    assert ctp(1, 1).hops + (Hop(2, 1),) == append_hop(ctp(1, 1), Hop(2, 1)).hops
    assert append_hop(TracerPacket(1), Hop(7, 1)).traversed == (7,)
    with pytest.raises(LoopError):
        append_hop(ctp(1, 1, 2), Hop(1, 1))


def test_lock_keeps_hops():
    pkt = ctp(2, 33)
    ltp = lock(pkt, A("44.44.44"), Rem(12, 50))
    assert ltp.kind == Kind.LTP and ltp.lock_ip == A("44.44.44")
    assert ltp.hops == pkt.hops and ltp.lock_rem == Rem(12, 50)
    with pytest.raises(PacketError):
        lock(ltp, A("44.44.1"))


def test_lock_ip_invariant():
    with pytest.raises(PacketError):
        TracerPacket(1, Kind.LTP)
    with pytest.raises(PacketError):
        TracerPacket(1, Kind.CTP, lock_ip=A("1.1.1"))


def test_unlock_case1():
    ltp = lock(ctp(2, 44), A("33.33.33"), Rem(12, 50))
    out = unlock(ltp, A("33.5.6"), 33, Rem(20, 40))
    assert out.kind == Kind.CTP and out.lock_ip is None
    assert out.traversed == (44, 33) and has_traversed(out, 33)
    assert out.hops[-1].link_rem == Rem(20, 40)
    with pytest.raises(PacketError):
        unlock(ltp, A("22.5.6"), 33, IDENTITY)
    with pytest.raises(PacketError):
        unlock(out, A("33.5.6"), 33, IDENTITY)


def dijkstra(adj, src, dst):
    best = {src: (0, float("inf"))}
    todo = [(0, -float("inf"), src)]
    while todo:
        d, nbw, u = heapq.heappop(todo)
        if u == dst:
            return Rem(d, -nbw)
        for v, (rtt, bw) in adj[u].items():
            cand = (d + rtt, min(-nbw, bw))
            if v not in best or cand[0] < best[v][0]:
                best[v] = cand
                heapq.heappush(todo, (cand[0], -cand[1], v))


def test_unlock_rem_matches_dijkstra():
    topo = """levels=2 group_size=4
node 1.0
node 2.0
node 2.1
node 2.2
node 3.0
link 1.0 2.0 rtt=10 bw=50
link 2.0 2.2 rtt=3 bw=90
link 2.2 2.1 rtt=3 bw=80
link 2.0 2.1 rtt=20 bw=100
link 2.1 3.0 rtt=10 bw=60
"""
    net = run_text(topo, "30000 tp 1.0 1")
    adj = {"2.0": {"2.2": (3, 90), "2.1": (20, 100)}, "2.1": {"2.2": (3, 80), "2.0": (20, 100)},
           "2.2": {"2.0": (3, 90), "2.1": (3, 80)}}
    want = rem_compose(dijkstra(adj, "2.1", "2.0"), Rem(10, 50))
    unl = [ev for ev in events(net, 30000, ("send.unlock",)) if str(ev.src) == "2.1"]
    assert unl and unl[0].pkt.hops[-1].link_rem == want == Rem(16, 50)


def test_has_traversed():
    assert has_traversed(ctp(1, 2, 1), 2)
    assert not has_traversed(TracerPacket(1), 5)


@given(st.lists(st.integers(0, 255), max_size=12))
def test_traversed_matches_set_oracle(ids):
    pkt, seen = TracerPacket(2), set()
    for i in ids:
        if i in seen:
            with pytest.raises(LoopError):
                append_hop(pkt, Hop(i, 2))
            continue
        pkt = append_hop(pkt, Hop(i, 2))
        seen.add(i)
    assert all(has_traversed(pkt, i) == (i in seen) for i in range(256))


def test_is_interesting():
    m = NodeMaps(A("44.44.1"))
    ltp = lock(ctp(2, 33), A("44.44.44"), Rem(12, 50))
    facts = [BnodeFact(2, A("44.44.44"), 33, Rem(12, 50)),
             RouteFact(2, 33, A("44.44.44"), Rem(15, 50))]
    assert is_interesting(ltp, m, facts)
    assert not is_interesting(ltp, m, facts, seen={dedup_key(ltp)})
    for f in facts:
        apply_fact(m, f)
    assert not is_interesting(ltp, m, facts)
    worse = [facts[0], RouteFact(2, 33, A("44.44.44"), Rem(40, 50))]
    assert not is_interesting(ltp, m, worse)


def test_dedup_key():
    a = lock(TracerPacket(2, hops=(Hop(33, 2, Rem(5, 5)), Hop(44, 2))), A("44.44.44"), Rem(1, 1))
    b = lock(TracerPacket(2, hops=(Hop(33, 2, Rem(50, 9)), Hop(44, 2))), A("44.44.44"), Rem(9, 9))
    assert dedup_key(a) == dedup_key(b)
    c = lock(TracerPacket(2, hops=a.hops), A("44.44.2"))
    assert dedup_key(a) != dedup_key(c)


P2 = TopologyParams(2, 4)
addr2 = st.tuples(st.integers(0, 3), st.integers(0, 3)).map(lambda c: make_address(c, P2))


@st.composite
def packets(draw):
    level = draw(st.integers(0, 1))
    n = draw(st.integers(0, 4))
    ids = draw(st.lists(addr2 if level == 0 else st.integers(0, 3), min_size=n, max_size=n, unique=True))
    rems = st.builds(Rem, st.integers(0, 500), st.integers(1, 500))
    hops = tuple(Hop(i, level, draw(rems)) for i in ids)
    if level == 0 and hops and draw(st.booleans()):
        hops = (Hop(hops[0].id, 0, dead=True),) + hops[1:]
    pkt = TracerPacket(level, hops=hops, forced=draw(st.booleans()), bounced=draw(st.booleans()))
    if level == 1 and draw(st.booleans()):
        pkt = lock(pkt, draw(addr2), draw(rems))
    return pkt


@given(packets(), packets(), packets())
def test_dedup_key_equivalence(a, b, c):
    ka, kb, kc = dedup_key(a), dedup_key(b), dedup_key(c)
    assert ka == dedup_key(a)
    assert (ka == kb) == (kb == ka)
    if ka == kb and kb == kc:
        assert ka == kc


@given(packets())
def test_wire_round_trip(pkt):
    assert decode(encode(pkt, P2), P2) == pkt


def test_decode_rejects_trailing_bytes():
    raw = encode(ctp(1, 2), P2) + b"\x00"
    with pytest.raises(PacketError):
        decode(raw, P2)
