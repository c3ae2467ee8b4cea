"""Acceptance criteria 1-10, one test each.

Each test records a single PASS/FAIL line (shown in the terminal summary)
before asserting, so a failing criterion is still reported in the same format.
"""

import itertools
import random
import time

import pytest
from conftest import SCENARIOS, VERDICTS, events, run_fixture, run_text

from qspn.addressing import Address, TopologyParams
from qspn.check import check_flood_once, check_loop_freedom, check_reachability, probe_all
from qspn.engine import EngineConfig
from qspn.rem import LinkQuality, rem_compose
from qspn.simnet import NonQuiescent, SimNetwork, Topology, generate_topology, load_scenario, load_topology


def verdict(number, name, ok, detail):
    VERDICTS.append(f"{'PASS' if ok else 'FAIL'} {number:>2} {name}: {detail}")
    assert ok, detail


# -- 1 ---------------------------------------------------------------------------

def test_memory_bound():
    p = TopologyParams(3, 4)
    worst, slowest = 0, 0.0
    for seed in range(3):
        t0 = time.perf_counter()
        net = SimNetwork.from_topology(generate_topology(p, (4, 4, 4), seed, full=True), seed=seed)
        net.run_until_quiescent()
        assert len(net.engines) == 64
        worst = max(worst, net.max_targets)
        slowest = max(slowest, time.perf_counter() - t0)
        assert not [v for v in net.violations if "memory bound" in v]
    ipv4 = TopologyParams.ipv4().map_bound
    ok = worst <= p.map_bound == 12 and ipv4 == 256 * 4 == 1024 and slowest < 1.0
    verdict(1, "memory bound", ok, f"max targets {worst} <= 12, ipv4 bound {ipv4}, slowest run {slowest:.2f}s < 1s")


# -- 2 ---------------------------------------------------------------------------

def _better(a, b):
    return a[0] < b[0] or (a[0] == b[0] and a[1] > b[1])


def brute_force_best(n, edges):
    """Floyd-Warshall over (total rtt, bottleneck bw), rtt first then wider bw."""
    inf = (float("inf"), 0)
    d = [[inf] * n for _ in range(n)]
    for (u, v), (rtt, bw) in edges.items():
        for x, y in ((u, v), (v, u)):
            if _better((rtt, bw), d[x][y]):
                d[x][y] = (rtt, bw)
    for k, i, j in itertools.product(range(n), repeat=3):
        if i != j and d[i][k] != inf and d[k][j] != inf:
            cand = (d[i][k][0] + d[k][j][0], min(d[i][k][1], d[k][j][1]))
            if _better(cand, d[i][j]):
                d[i][j] = cand
    return d


def random_gnode(seed):
    rng = random.Random(seed)
    p = TopologyParams(2, 16)
    n = rng.randint(2, 16)
    ids = rng.sample(range(16), n)
    edges = {}
    order = list(range(n))
    rng.shuffle(order)
    for j in range(1, n):
        u, v = order[rng.randrange(j)], order[j]
        edges[(min(u, v), max(u, v))] = (rng.randint(1, 100), rng.randint(10, 100))
    for u, v in itertools.combinations(range(n), 2):
        if (u, v) not in edges and rng.random() < 0.3:
            edges[(u, v)] = (rng.randint(1, 100), rng.randint(10, 100))
    nodes = [Address((i, 0), p) for i in ids]
    topo = Topology(p, sorted(nodes))
    for (u, v), (rtt, bw) in edges.items():
        topo.links[frozenset((nodes[u], nodes[v]))] = LinkQuality(rtt, bw)
    return topo, nodes, ids, edges


def test_level0_optimality():
    t0 = time.perf_counter()
    mismatches, checked = [], 0
    for seed in range(50):
        topo, nodes, ids, edges = random_gnode(seed)
        net = SimNetwork.from_topology(topo, seed=seed)
        net.run_until_quiescent()
        oracle = brute_force_best(len(nodes), edges)
        for u, v in itertools.permutations(range(len(nodes)), 2):
            checked += 1
            e = net.engines[nodes[u]].maps.best(0, ids[v])
            got = None if e is None else (e.rem.total_rtt, e.rem.bottleneck_bw)
            if got != oracle[u][v]:
                mismatches.append((seed, str(nodes[u]), str(nodes[v]), got, oracle[u][v]))
    elapsed = time.perf_counter() - t0
    ok = not mismatches and elapsed < 5.0
    verdict(2, "level-0 optimality", ok,
            f"{checked} pairs, {len(mismatches)} mismatches vs brute force, {elapsed:.2f}s < 5s")


# -- 3 and 4 ---------------------------------------------------------------------

_static_runs = {}


def static_runs():
    """The 20 multi-level topologies shared by criteria 3 and 4."""
    if not _static_runs:
        p = TopologyParams(3, 4)
        t0 = time.perf_counter()
        for seed in range(20):
            net = SimNetwork.from_topology(generate_topology(p, (4, 4, 4), seed), seed=seed)
            net.run_until_quiescent()
            _static_runs[seed] = (net, probe_all(net))
        _static_runs["elapsed"] = time.perf_counter() - t0
    return _static_runs


def test_full_reachability():
    runs = static_runs()
    t0 = time.perf_counter()
    pairs = ok_pairs = loops = 0
    failed = []
    for seed in range(20):
        net, probes = runs[seed]
        pairs += len(probes)
        ok_pairs += sum(1 for r in probes.values() if r == "ok")
        loops += sum(1 for r in probes.values() if r == "loop")
        for v in (check_reachability(net, probes), check_loop_freedom(net, probes)):
            if not v.ok:
                failed.append(f"seed {seed} {v.line()}")
    elapsed = runs["elapsed"] + time.perf_counter() - t0
    ok = ok_pairs == pairs and loops == 0 and not failed and elapsed < 10.0
    verdict(3, "full reachability", ok,
            f"{ok_pairs}/{pairs} pairs delivered, {loops} loops, {elapsed:.2f}s < 10s")


FIXTURES = ("wandering", "three_bnodes", "case1")


def test_flood_once():
    nets = [static_runs()[seed][0] for seed in range(20)]
    nets += [run_fixture(name) for name in FIXTURES]
    bad = [v.line() for v in map(check_flood_once, nets) if not v.ok]
    verdict(4, "flood-once", not bad, f"{len(nets)} runs, {len(bad)} with duplicate forwards or uncovered members")


# -- 5 ---------------------------------------------------------------------------

def test_loop_termination():
    t0 = time.perf_counter()
    checked = run_fixture("three_bnodes")
    quiet = checked.messages
    unchecked = SimNetwork.from_topology(load_topology(SCENARIOS / "three_bnodes.topo"),
                                         EngineConfig(loop_check=False), max_messages=100_000)
    unchecked.schedule(load_scenario(SCENARIOS / "three_bnodes.scn"))
    with pytest.raises(NonQuiescent):
        unchecked.run_until_quiescent()
    elapsed = time.perf_counter() - t0
    ok = quiet < 100_000 < unchecked.messages and elapsed < 1.0
    verdict(5, "loop termination", ok,
            f"check on: quiescent after {quiet} messages; check off: {unchecked.messages} > 1e5; "
            f"{elapsed:.2f}s (limit 1s)")


# -- 6 ---------------------------------------------------------------------------

CHAIN = """levels=2 group_size=4
node 0.0
node 0.1
node 0.2
link 0.0 0.1 rtt=5 bw=50
link 0.1 0.2 rtt=5 bw=50
"""


def level0_ctps_after_join(net, label="B"):
    """(distinct flood generations, hop paths) of level-0 CTPs sent from the join on."""
    t = next(ev.time for ev in net.trace if ev.kind == "join" and ev.detail == label)
    sends = [ev for ev in net.trace
             if ev.time >= t and ev.kind.startswith("send.") and ev.pkt.level == 0]
    return {ev.pkt.epoch for ev in sends}, [tuple(str(h) for h in ev.pkt.hops) for ev in sends]


def test_join_economy():
    # A=0.0 and C=0.2 stay connected through 0.1 so the gnode never splits.
    net = run_text(CHAIN, "10000 add_node B 0.0:rtt=3:bw=50 0.2:rtt=4:bw=50")
    b = str(net.labels["B"])
    gens, paths = level0_ctps_after_join(net)
    full = {p for p in paths if b in p and len(p) == 3}
    ok = len(gens) == 2 and ("0.0", b, "0.2") in full and ("0.2", b, "0.0") in full
    verdict(6, "join economy", ok, f"{len(gens)} distinct CTPs (expected 2), paths A>B>C and C>B>A present: "
            f"{('0.0', b, '0.2') in full and ('0.2', b, '0.0') in full}")


# -- 7 ---------------------------------------------------------------------------

def test_wandering_tp():
    net = run_fixture("wandering")
    got = [(ev.kind, str(ev.src), str(ev.dst), ev.pkt.traversed)
           for ev in events(net, since=30000, kinds=("send",))]
    want = [
        ("send.orig", "1.0", "1.1", ()),               # flood in G1
        ("send.unlock", "1.1", "2.0", (1,)),           # A2 appends G1, crosses to B1
        ("send.lock", "2.0", "2.1", (1,)),             # flood in G2
        ("send.unlock", "2.1", "3.0", (1, 2)),
        ("send.bounce", "3.0", "2.1", (1, 2, 3)),      # C1 is a dead end
        ("send.lock", "2.1", "2.0", (1, 2, 3)),
        ("send.return", "2.0", "1.1", (1, 2, 3)),
        ("send.lock", "1.1", "1.0", (1, 2, 3)),        # back at A1
    ]
    verdict(7, "wandering TP", got == want, f"{len(got)} sends, expected sequence of {len(want)} "
            f"{'reproduced' if got == want else 'differs'}")


# -- 8 ---------------------------------------------------------------------------

def test_case1():
    net = run_fixture("case1")
    b44, s33 = net.resolve("44.44.44"), net.resolve("33.33.33")
    link = net.links[frozenset((b44, s33))].as_rem()
    wrong = []
    for addr, eng in net.engines.items():
        if addr.components[2] != 44:
            continue
        got = eng.maps.best(2, 33)
        if addr == b44:
            want = link
        elif addr.components[1] == 44:
            want = rem_compose(eng.maps.best(0, b44.components[0]).rem, link)
        else:
            want = rem_compose(eng.maps.best(1, 44).rem, link)
        if got is None or got.rem != want:
            wrong.append(f"{addr}: {got and got.rem} != {want}")
    at33 = [ev for ev in events(net, since=20000) if ev.dst == s33 and ev.src == b44]
    last = at33[-1]
    reflected_dropped = (last.kind == "drop.stale" and last.pkt.traversed == (44,))
    after = net.trace[net.trace.index(last) + 1:]
    quiet_after = not [ev for ev in after if ev.kind.startswith("send.") and ev.src == s33]
    ok = not wrong and reflected_dropped and quiet_after
    verdict(8, "case 1", ok, f"REM(.->33) composed via 44.44.44 at all 4 nodes of 44: {not wrong}; "
            f"last reflected CTP dropped at 33.33.33: {reflected_dropped and quiet_after}")


# -- 9 ---------------------------------------------------------------------------

RULE1 = """levels=3 group_size=4
node 0.0.0
node 0.1.0
node 1.0.0
link 0.0.0 1.0.0 rtt=10 bw=50
"""

DELTA = """levels=5 group_size=4
node 0.0.0.0.1
node 0.0.0.0.2
node 0.0.0.1.1
node 0.0.0.2.1
node 1.0.0.0.1
node 2.0.0.0.1
link 0.0.0.0.1 0.0.0.0.2 rtt=100 bw=50
link 0.0.0.0.1 0.0.0.1.1 rtt=10 bw=50
link 0.0.0.0.2 0.0.0.2.1 rtt=10 bw=50
link 0.0.0.0.1 1.0.0.0.1 rtt=10 bw=50
link 0.0.0.0.2 2.0.0.0.1 rtt=10 bw=50
"""


def test_rule1_and_delta():
    # 0.0.0 greets 1.0.0 at the top level before it has anything to say at
    # the level below; its level-1 peer 0.1.0 only appears at t=2000.
    net = run_text(RULE1, "2000 add_link 0.0.0 0.1.0 rtt=5 bw=50")
    z = net.resolve("0.0.0")
    mine = [ev for ev in net.trace if ev.src == z]
    kinds = [(ev.kind, ev.detail) for ev in mine]
    i_queue = next(i for i, ev in enumerate(mine) if ev.kind == "queue" and ev.pkt.level == 2)
    i_expl = next(i for i, ev in enumerate(mine) if ev.kind == "explored" and ev.detail.startswith("L1"))
    i_rel = next(i for i, ev in enumerate(mine) if ev.kind == "release" and ev.pkt.level == 2)
    i_send = next(i for i, ev in enumerate(mine) if ev.kind.startswith("send.") and ev.pkt.level == 2)
    ordered = i_queue < i_expl < i_rel < i_send and kinds[i_expl][1] == "L1 sent"

    net = run_text(DELTA, "30000 set_link 0.0.0.0.1 0.0.0.0.2 rtt=130 bw=50")
    late = [ev for ev in events(net, since=30000) if ev.kind.startswith("send.")]
    fired = {ev.pkt.level for ev in late}
    ok = ordered and 1 in fired and 4 not in fired
    verdict(9, "rule 1 and delta", ok, f"queue<explored L1<release<send: {ordered}; "
            f"+30 rtt triggers CTPs at levels {sorted(fired)} (want 1, not 4)")


# -- 10 ----------------------------------------------------------------------------

def test_determinism():
    same = []
    for name in FIXTURES:
        a = run_fixture(name, seed=7).render_trace()
        b = run_fixture(name, seed=7).render_trace()
        same.append(a == b)
    joins = [run_text(CHAIN, "10000 add_node B 0.0:rtt=3 0.2:rtt=4", seed=3).render_trace() for _ in range(2)]
    same.append(joins[0] == joins[1])
    verdict(10, "determinism", all(same), f"{sum(same)}/{len(same)} scenarios byte-identical across two runs")
