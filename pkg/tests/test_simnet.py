import networkx as nx
import pytest
from hypothesis import given, settings, strategies as st
from conftest import SCENARIOS, events, run_fixture, run_text

from qspn.addressing import TopologyParams
from qspn.engine import EngineConfig
from qspn.maps import NoRoute
from qspn.simnet import (NonQuiescent, ScenarioError, SimNetwork, TopologyError, dump_maps,
                         generate_topology, load_scenario, load_topology, parse_fanout, parse_scenario,
                         parse_topology, probe_route)

LINE = """levels=2 group_size=4
node 0.0
node 0.1
node 0.2
link 0.0 0.1 rtt=10 bw=50
link 0.1 0.2 rtt=10 bw=50
"""


def graph(topo):
    g = nx.Graph()
    g.add_nodes_from(topo.nodes)
    g.add_edges_from(tuple(k) for k in topo.links)
    return g


def test_load_line():
    net = SimNetwork.from_topology(parse_topology(LINE))
    assert len(net.engines) == 3 and len(net.links) == 2


def test_load_wandering_fixture():
    topo = load_topology(SCENARIOS / "wandering.topo")
    assert [str(a) for a in topo.nodes] == ["1.0", "1.1", "2.0", "2.1", "3.0"]
    assert nx.is_connected(graph(topo))


@pytest.mark.parametrize("text, msg", [
    ("node 0.0\n", "key=value"),
    ("levels=2 group_size=4\nnode 0.9\n", "range"),
    ("levels=2 group_size=4\nnode 0.0\nlink 0.0 0.1 rtt=1 bw=1\n", "0.1"),
    ("levels=2 group_size=4\nnode 0.0\nnode 0.1\nlink 0.0 0.1 rtt=-1 bw=1\n", "rtt"),
    ("levels=2 group_size=4\nnode 0.0\nfrob\n", "frob"),
])
def test_topology_errors(text, msg):
    with pytest.raises(TopologyError, match=msg):
        parse_topology(text)


def test_scenario_errors():
    with pytest.raises(ScenarioError):
        parse_scenario("10 explode 0.0")
    with pytest.raises(ScenarioError):
        parse_scenario("20 kill 0.0\n10 kill 0.1")
    steps = parse_scenario("# comment\n10 kill 0.0  # trailing\n")
    assert [(s.at, s.action, s.args) for s in steps] == [(10.0, "kill", ("0.0",))]


def test_scenario_unknown_node():
    net = SimNetwork.from_topology(parse_topology(LINE))
    net.schedule(parse_scenario("100 kill 0.3"))
    with pytest.raises(ScenarioError):
        net.run_until_quiescent()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_generator_connected(seed):
    topo = generate_topology(TopologyParams(3, 4), (4, 4, 4), seed)
    assert nx.is_connected(graph(topo))
    assert parse_topology(topo.to_text()).links == topo.links


def test_generator_gnodes_internally_connected():
    p = TopologyParams(3, 4)
    topo = generate_topology(p, (4, 4, 4), 11, full=True)
    assert len(topo.nodes) == 64
    g = graph(topo)
    for level in (1, 2):
        groups = {}
        for a in topo.nodes:
            groups.setdefault(a.components[level:], []).append(a)
        assert all(nx.is_connected(g.subgraph(m)) for m in groups.values())


def test_generator_rejects_bad_shape():
    with pytest.raises(ValueError):
        generate_topology(TopologyParams(3, 4), (4, 4), 1)
    with pytest.raises(ValueError):
        generate_topology(TopologyParams(3, 4), (5, 4, 4), 1)
    with pytest.raises(ValueError):
        parse_fanout("4;4")


def test_empty_network_is_quiet():
    net = SimNetwork(TopologyParams(2, 4))
    rep = net.run_until_quiescent()
    assert rep.messages == 0 and not rep.violations


def test_trace_time_ordered():
    net = run_fixture("case1")
    times = [ev.time for ev in net.trace]
    assert times == sorted(times)


def test_three_bnodes_budget():
    assert run_fixture("three_bnodes").messages < 100
    net = SimNetwork.from_topology(load_topology(SCENARIOS / "three_bnodes.topo"),
                                   EngineConfig(loop_check=False), max_messages=5000)
    net.schedule(load_scenario(SCENARIOS / "three_bnodes.scn"))
    with pytest.raises(NonQuiescent):
        net.run_until_quiescent()


def test_message_lost_when_link_cut_in_flight():
    net = run_text(LINE, "1002 cut_link 0.0 0.1")
    lost = [ev for ev in net.trace if ev.kind == "drop.lost"]
    assert lost and all(frozenset((ev.src, ev.dst)) == frozenset(net.resolve(x) for x in ("0.0", "0.1"))
                        for ev in lost)


def test_probe_single_hop():
    net = run_text(LINE)
    a, b = net.resolve("0.0"), net.resolve("0.1")
    assert probe_route(net, a, b) == [a, b]


def test_probe_after_kill_on_only_path():
    net = run_text(LINE + "node 0.3\nlink 0.2 0.3 rtt=10 bw=50\n", "30000 kill 0.2")
    with pytest.raises(NoRoute):
        probe_route(net, net.resolve("0.0"), net.resolve("0.3"))
    claims = [ev for ev in events(net, 30000) if ev.kind.startswith("send.") and ev.pkt.hops[0].dead]
    assert [(str(ev.src), [str(h) for h in ev.pkt.hops]) for ev in claims] == [("0.1", ["+0.2", "0.1"])]


def test_probe_step_logs_result():
    net = run_text(LINE, "20000 probe 0.0 0.2")
    assert [ev.detail for ev in net.trace if ev.kind == "probe"] == ["0.0>0.1>0.2"]


def test_dump_maps_format():
    net = run_text(LINE)
    lines = dump_maps(net.engines[net.resolve("0.0")])
    assert lines == ["0.0 L0 target=1 gw=0.1 rtt=10 bw=50 alive=1",
                     "0.0 L0 target=2 gw=0.1 rtt=20 bw=50 alive=1"]


def test_report_text():
    net = SimNetwork.from_topology(parse_topology(LINE))
    text = net.run_until_quiescent().to_text()
    assert text.startswith("quiescence_time=") and "\nmessages=" in text and "count CTP/L0" in text


def test_add_node_labels():
    net = run_text(LINE, "10000 add_node X 0.2:rtt=3:bw=20\n20000 probe X 0.0")
    x = net.labels["X"]
    assert net.links[frozenset((x, net.resolve("0.2")))].bandwidth == 20
    assert [ev.detail for ev in net.trace if ev.kind == "probe"] == [f"{x}>0.2>0.1>0.0"]
