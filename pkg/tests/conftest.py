from pathlib import Path

import pytest

from qspn.engine import EngineConfig
from qspn.simnet import SimNetwork, load_scenario, load_topology, parse_scenario, parse_topology

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"

# Acceptance verdict lines, printed in the terminal summary so they survive
# output capture.
VERDICTS: list[str] = []


def run_fixture(name, config=None, seed=0, **kw):
    """Load scenarios/<name>.topo (+ .scn if present) and run to quiescence."""
    net = SimNetwork.from_topology(load_topology(SCENARIOS / f"{name}.topo"), config, seed=seed, **kw)
    scn = SCENARIOS / f"{name}.scn"
    if scn.exists():
        net.schedule(load_scenario(scn))
    net.run_until_quiescent()
    return net


def run_text(topo_text, scenario_text="", config=None, seed=0, **kw):
    net = SimNetwork.from_topology(parse_topology(topo_text), config, seed=seed, **kw)
    net.schedule(parse_scenario(scenario_text))
    net.run_until_quiescent()
    return net


def events(net, since=0.0, kinds=None):
    out = [ev for ev in net.trace if ev.time >= since and ev.kind != "recv"]
    if kinds:
        out = [ev for ev in out if ev.kind.split(".")[0] in kinds or ev.kind in kinds]
    return out


@pytest.fixture
def no_loop_check():
    return EngineConfig(loop_check=False)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
