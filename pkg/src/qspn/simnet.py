"""Deterministic discrete-event network simulator.

Events live in a heap ordered by (time, sequence).  A message sent over a
link is delivered rtt/2 later, and only if the link and both end points
still exist at that moment.  Radar rounds run every radar_period and are
suspended once three consecutive rounds saw no other activity.
"""

from __future__ import annotations

import heapq
import logging
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from .addressing import Address, AddressError, TopologyParams, parse_address
from .engine import EngineConfig, NodeEngine
from .maps import NoRoute, best_gateway
from .rem import LinkQuality
from .tracer import TracerPacket, encode

log = logging.getLogger(__name__)

DEFAULT_MAX_MESSAGES = 100_000
QUIET_ROUNDS = 3


class SimError(Exception):
    pass


class TopologyError(SimError, ValueError):
    pass


class ScenarioError(SimError, ValueError):
    pass


class NonQuiescent(SimError):
    pass


class ForwardingLoop(SimError):
    pass


# -- topology files ------------------------------------------------------------

@dataclass
class Topology:
    params: TopologyParams
    nodes: list[Address] = field(default_factory=list)
    links: dict[frozenset, LinkQuality] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"levels={self.params.levels} group_size={self.params.group_size}"]
        lines += [f"node {a}" for a in self.nodes]
        for key, q in sorted(self.links.items(), key=lambda kv: sorted(a.sort_key() for a in kv[0])):
            a, b = sorted(key)
            lines.append(f"link {a} {b} rtt={q.rtt:g} bw={q.bandwidth:g}")
        return "\n".join(lines) + "\n"


def _kv(tokens, line_no, err=TopologyError) -> dict:
    out = {}
    for tok in tokens:
        k, sep, v = tok.partition("=")
        if not sep:
            raise err(f"line {line_no}: expected key=value, got {tok!r}")
        out[k] = v
    return out


def _quality(kv: dict, line_no, err=TopologyError) -> LinkQuality:
    try:
        return LinkQuality(float(kv["rtt"]), float(kv.get("bw", "100")))
    except KeyError:
        raise err(f"line {line_no}: link needs rtt=") from None
    except ValueError as e:
        raise err(f"line {line_no}: {e}") from None


def parse_topology(text: str) -> Topology:
    topo = None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        if topo is None:
            kv = _kv(toks, no)
            try:
                params = TopologyParams(int(kv["levels"]), int(kv.get("group_size", 256)))
            except (KeyError, ValueError) as e:
                raise TopologyError(f"line {no}: bad header {line!r} ({e})") from None
            topo = Topology(params)
            continue
        try:
            if toks[0] == "node" and len(toks) == 2:
                addr = parse_address(toks[1], topo.params)
                if addr in topo.nodes:
                    raise TopologyError(f"line {no}: duplicate address {addr}")
                topo.nodes.append(addr)
            elif toks[0] == "link" and len(toks) >= 3:
                a, b = (parse_address(t, topo.params) for t in toks[1:3])
                for x in (a, b):
                    if x not in topo.nodes:
                        raise TopologyError(f"line {no}: link references unknown node {x}")
                if a == b:
                    raise TopologyError(f"line {no}: self link")
                topo.links[frozenset((a, b))] = _quality(_kv(toks[3:], no), no)
            else:
                raise TopologyError(f"line {no}: cannot parse {line!r}")
        except AddressError as e:
            raise TopologyError(f"line {no}: {e}") from None
    if topo is None:
        raise TopologyError("empty topology file (missing header)")
    return topo


def load_topology(path) -> Topology:
    with open(path) as fh:
        return parse_topology(fh.read())


# -- scenarios -----------------------------------------------------------------

ACTIONS = ("add_node", "kill", "set_link", "cut_link", "add_link", "probe", "tp")


@dataclass(frozen=True)
class ScenarioStep:
    at: float
    action: str
    args: tuple = ()


def parse_scenario(text: str) -> list[ScenarioStep]:
    steps = []
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        if len(toks) < 2:
            raise ScenarioError(f"line {no}: expected '<time_ms> <action> <args...>'")
        try:
            at = float(toks[0])
        except ValueError:
            raise ScenarioError(f"line {no}: bad time {toks[0]!r}") from None
        action = toks[1]
        if action not in ACTIONS:
            raise ScenarioError(f"line {no}: unknown action {action!r}")
        steps.append(ScenarioStep(at, action, tuple(toks[2:])))
    if any(b.at < a.at for a, b in zip(steps, steps[1:])):
        raise ScenarioError("scenario steps must be sorted by time")
    return steps


def load_scenario(path) -> list[ScenarioStep]:
    with open(path) as fh:
        return parse_scenario(fh.read())


# -- trace ---------------------------------------------------------------------

@dataclass(frozen=True)
class TraceEvent:
    time: float
    kind: str
    src: Optional[Address] = None
    dst: Optional[Address] = None
    pkt: Optional[TracerPacket] = None
    detail: str = ""

    def render(self, params: TopologyParams) -> str:
        tail = encode(self.pkt, params).hex() if self.pkt is not None else (self.detail or "-")
        src = "-" if self.src is None else str(self.src)
        dst = "-" if self.dst is None else str(self.dst)
        return f"{self.time:.1f} {self.kind} {src} {dst} {tail}"


@dataclass
class RunReport:
    quiescence_time: float
    messages: int
    by_kind: dict[str, int]
    snapshots: dict[str, list[str]]
    violations: list[str]

    def to_text(self) -> str:
        lines = [f"quiescence_time={self.quiescence_time:.1f}", f"messages={self.messages}"]
        lines += [f"count {k} {v}" for k, v in sorted(self.by_kind.items())]
        lines += [f"violation {v}" for v in self.violations]
        for node in sorted(self.snapshots):
            lines += self.snapshots[node]
        return "\n".join(lines) + "\n"


def dump_maps(engine: NodeEngine) -> list[str]:
    out = []
    for level, targets in engine.maps.routes.items():
        for tid in sorted(targets):
            tr = targets[tid]
            if not tr.entries:
                out.append(f"{engine.addr} L{level} target={tid} gw=- rtt=- bw=- alive=0")
            for e in tr.entries:
                bw = "inf" if e.rem.bottleneck_bw == float("inf") else f"{e.rem.bottleneck_bw:g}"
                out.append(f"{engine.addr} L{level} target={tid} gw={e.gateway} "
                           f"rtt={e.rem.total_rtt:g} bw={bw} alive={int(tr.alive)}")
    return out


# -- the network ---------------------------------------------------------------

class SimNetwork:
    def __init__(self, params: TopologyParams, config: Optional[EngineConfig] = None,
                 seed: int = 0, max_messages: int = DEFAULT_MAX_MESSAGES):
        self.params = params
        self.config = config or EngineConfig()
        self.seed = seed
        self.rng = random.Random(seed)
        self.max_messages = max_messages
        self.engines: dict[Address, NodeEngine] = {}
        self.links: dict[frozenset, LinkQuality] = {}
        self.labels: dict[str, Address] = {}
        self.clock = 0.0
        self.trace: list[TraceEvent] = []
        self.violations: list[str] = []
        self.messages = 0
        self.by_kind: Counter = Counter()
        self.received: dict[Address, list[TracerPacket]] = {}
        self.max_targets = 0
        self._queue: list = []
        self._seq = 0
        self._radar_on = False
        self._quiet = 0
        self._activity = False

    @classmethod
    def from_topology(cls, topo: Topology, config: Optional[EngineConfig] = None, seed: int = 0,
                      **kw) -> SimNetwork:
        net = cls(topo.params, config, seed, **kw)
        for a in topo.nodes:
            net.engines[a] = NodeEngine(a, topo.params, net.config)
        net.links = dict(topo.links)
        return net

    # -- plumbing ------------------------------------------------------------

    def _push(self, t: float, kind: str, payload):
        self._seq += 1
        heapq.heappush(self._queue, (t, self._seq, kind, payload))

    def log(self, kind, src=None, dst=None, pkt=None, detail=""):
        self.trace.append(TraceEvent(self.clock, kind, src, dst, pkt, detail))

    def neighbors(self, a: Address) -> dict[Address, LinkQuality]:
        out = {}
        for key, q in self.links.items():
            if a in key:
                (b,) = key - {a}
                if b in self.engines:
                    out[b] = q
        return out

    def resolve(self, ref: str) -> Address:
        if ref in self.labels:
            return self.labels[ref]
        try:
            return parse_address(ref, self.params)
        except AddressError:
            raise ScenarioError(f"unknown node {ref!r}") from None

    def _collect(self, eng: NodeEngine, msgs):
        for t, token in eng.timers:
            self._push(t, "timer", (eng.addr, token))
        eng.timers.clear()
        now = self.clock
        for (_t, kind, peer, detail, pkt) in eng.records:
            if kind == "drop":
                self.log(f"drop.{detail}", peer, eng.addr, pkt)
            else:
                self.log(kind, eng.addr, peer, pkt, detail)
        eng.records.clear()
        for m in msgs:
            q = self.links.get(frozenset((eng.addr, m.dest)))
            if q is None:
                self.log("drop.nolink", eng.addr, m.dest, m.pkt)
                continue
            self.messages += 1
            kind = ("TP" if m.pkt.forced else m.pkt.kind.name) + f"/L{m.pkt.level}"
            self.by_kind[kind] += 1
            self.log(f"send.{m.reason}", eng.addr, m.dest, m.pkt)
            self._push(now + q.rtt / 2, "deliver", (eng.addr, m.dest, m.pkt))
        if msgs:
            self._activity = True
        if self.messages > self.max_messages:
            raise NonQuiescent(f"message budget {self.max_messages} exceeded at t={now:.1f}")

    def _check_node(self, eng: NodeEngine):
        count = eng.maps.target_count()
        self.max_targets = max(self.max_targets, count)
        if count > self.params.map_bound:
            self.violations.append(f"{self.clock:.1f} {eng.addr} memory bound {count}")
        for level, tid, gw in eng.maps.gateways():
            if gw not in eng.rnodes:
                self.violations.append(f"{self.clock:.1f} {eng.addr} stale gateway {gw} L{level}/{tid}")
                break

    def _start_radar(self):
        if not self._radar_on:
            self._radar_on = True
            self._quiet = 0
            period = self.config.radar_period
            nxt = (int(self.clock // period) + 1) * period if self.clock else 0.0
            self._push(nxt, "radar", None)

    # -- running -------------------------------------------------------------

    def schedule(self, steps):
        for s in steps:
            self._push(s.at, "step", s)

    def run_until_quiescent(self, max_time: float = 600_000.0) -> RunReport:
        self._start_radar()
        while self._queue:
            t, _seq, kind, payload = heapq.heappop(self._queue)
            if t > max_time:
                raise NonQuiescent(f"not quiescent by t={max_time:.1f}")
            self.clock = t
            if kind == "radar":
                self._radar_round()
            elif kind == "deliver":
                self._deliver(*payload)
            elif kind == "timer":
                addr, token = payload
                eng = self.engines.get(addr)
                if eng is not None and eng.alive:
                    self._activity = True
                    eng.now = t
                    self._collect(eng, eng.on_timer(token))
                    self._check_node(eng)
            elif kind == "step":
                self._activity = True
                self.apply_step(payload)
                self._start_radar()
        return self.report()

    def _radar_round(self):
        if self._activity:
            self._quiet = 0
        else:
            self._quiet += 1
        self._activity = False
        if self._quiet >= QUIET_ROUNDS:
            self._radar_on = False
            return
        for addr in sorted(self.engines):
            eng = self.engines[addr]
            eng.now = self.clock
            before = len(eng.timers)
            self._collect(eng, eng.on_radar_round(self.neighbors(addr)))
            if len(eng.timers) != before:
                self._activity = True
        self._push(self.clock + self.config.radar_period, "radar", None)

    def _deliver(self, src: Address, dst: Address, pkt: TracerPacket):
        self._activity = True
        q = self.links.get(frozenset((src, dst)))
        eng = self.engines.get(dst)
        if q is None or eng is None or src not in self.engines:
            self.log("drop.lost", src, dst, pkt)
            return
        self.log("recv", src, dst, pkt)
        self.received.setdefault(dst, []).append(pkt)
        eng.now = self.clock
        self._collect(eng, eng.receive(pkt, src, q))
        self._check_node(eng)

    def report(self) -> RunReport:
        snaps = {str(a): dump_maps(e) for a, e in sorted(self.engines.items())}
        viol = list(self.violations)
        for a, e in sorted(self.engines.items()):
            if e.rule1_violations:
                viol.append(f"{a} rule-1 order violated {e.rule1_violations}x")
            for key, n in e.forward_events.items():
                if n > 1:
                    viol.append(f"{a} forwarded {key[1]} {n}x")
        return RunReport(self.clock, self.messages, dict(self.by_kind), snaps, viol)

    def render_trace(self) -> str:
        return "".join(ev.render(self.params) + "\n" for ev in self.trace)

    # -- scenario actions ----------------------------------------------------

    def apply_step(self, step: ScenarioStep):
        a = step.args
        try:
            if step.action == "add_node":
                self.add_node(a[0], [self._edge(e) for e in a[1:]])
            elif step.action == "kill":
                self.kill_node(self.resolve(a[0]))
            elif step.action in ("set_link", "add_link"):
                x, y = self.resolve(a[0]), self.resolve(a[1])
                kv = _kv(a[2:], step.at, ScenarioError)
                self.set_link(x, y, _quality(kv, step.at, ScenarioError), create=step.action == "add_link")
            elif step.action == "cut_link":
                self.cut_link(self.resolve(a[0]), self.resolve(a[1]))
            elif step.action == "probe":
                src, dst = self.resolve(a[0]), self.resolve(a[1])
                try:
                    hops = probe_route(self, src, dst)
                    self.log("probe", src, dst, detail=">".join(str(h) for h in hops))
                except (NoRoute, ForwardingLoop) as e:
                    self.log("probe", src, dst, detail=type(e).__name__)
            elif step.action == "tp":
                self.inject_tp(self.resolve(a[0]), int(a[1]))
        except IndexError:
            raise ScenarioError(f"t={step.at:g}: missing arguments for {step.action}") from None

    def _edge(self, text: str):
        ref, *rest = text.split(":")
        kv = _kv(rest, 0, ScenarioError)
        return self.resolve(ref), _quality(kv, 0, ScenarioError)

    def add_node(self, label: str, edges) -> NodeEngine:
        eng = NodeEngine(None, self.params, self.config)
        eng.now = self.clock
        nbrs = [(self.engines[a], q) for a, q in edges]
        outcome = eng.hook(nbrs, self.rng)
        if outcome.address in self.engines:
            raise SimError(f"hooking produced a taken address {outcome.address}")
        self.engines[outcome.address] = eng
        self.labels[label] = outcome.address
        for a, q in edges:
            self.links[frozenset((a, outcome.address))] = q
        self.log("join", outcome.address, outcome.gateway, detail=label)
        for a, q in edges:
            n = self.engines[a]
            n.now = self.clock
            self._collect(n, n.on_node_join_neighbor(outcome.address, q))
        self._collect(eng, eng.exports_after_hook())
        return eng

    def kill_node(self, addr: Address):
        eng = self.engines.pop(addr, None)
        if eng is None:
            raise ScenarioError(f"kill: no node {addr}")
        eng.alive = False
        for key in [k for k in self.links if addr in k]:
            del self.links[key]
        self.log("kill", addr)

    def set_link(self, a: Address, b: Address, q: LinkQuality, create: bool = False):
        key = frozenset((a, b))
        if key not in self.links and not create:
            raise ScenarioError(f"set_link: no link {a} {b}")
        for x in (a, b):
            if x not in self.engines:
                raise ScenarioError(f"no node {x}")
        self.links[key] = q
        self.log("link", a, b, detail=f"rtt={q.rtt:g} bw={q.bandwidth:g}")

    def cut_link(self, a: Address, b: Address):
        if self.links.pop(frozenset((a, b)), None) is None:
            raise ScenarioError(f"cut_link: no link {a} {b}")
        self.log("cut", a, b)

    def inject_tp(self, src: Address, level: int):
        eng = self.engines[src]
        eng.now = self.clock
        self.log("inject", src, detail=f"L{level}")
        self._collect(eng, eng.originate_tp(level))

    # -- queries -------------------------------------------------------------

    def pairs(self):
        nodes = sorted(self.engines)
        return [(a, b) for a in nodes for b in nodes if a != b]


def probe_route(net: SimNetwork, src: Address, dst: Address) -> list[Address]:
    """Hop-by-hop forwarding from src to dst using each node's best gateway."""
    if src not in net.engines or dst not in net.engines:
        raise NoRoute(f"{src} or {dst} is not in the network")
    path = [src]
    cur = src
    while cur != dst:
        gw = best_gateway(net.engines[cur].maps, dst)
        if frozenset((cur, gw)) not in net.links or gw not in net.engines:
            raise NoRoute(f"{cur}: gateway {gw} toward {dst} is not linked")
        if gw in path:
            raise ForwardingLoop(" > ".join(str(h) for h in path + [gw]))
        path.append(gw)
        cur = gw
    return path


# -- generator -----------------------------------------------------------------

def generate_topology(params: TopologyParams, fanout, seed: int = 0, extra: float = 0.3,
                      full: bool = False) -> Topology:
    """Random topology, internally connected at every level.

    fanout[l] bounds the number of children of each level-(l+1) gnode; with
    full=True every gnode has exactly that many.  Child IDs are random.
    """
    if len(fanout) != params.levels:
        raise ValueError(f"fanout needs {params.levels} values")
    if any(not 1 <= f <= params.group_size for f in fanout):
        raise ValueError(f"fanout values must be in [1, {params.group_size}]")
    rng = random.Random(seed)
    topo = Topology(params)
    nodes = []

    def build(level: int, prefix: tuple) -> list[list[Address]]:
        """Return the child groups of the gnode `prefix` (components level..n-1)."""
        k = fanout[level] if full else rng.randint(1, fanout[level])
        ids = sorted(rng.sample(range(params.group_size), k))
        groups = []
        for i in ids:
            if level == 0:
                nodes.append(Address((i,) + prefix, params))
                groups.append([nodes[-1]])
            else:
                members = [a for g in build(level - 1, (i,) + prefix) for a in g]
                groups.append(members)
        link_groups(groups, level)
        return groups

    def link_groups(groups, level):
        rtt_lo, rtt_hi = (1, 20) if level == 0 else (5, 50)
        order = list(range(len(groups)))
        rng.shuffle(order)
        edges = set()
        for j in range(1, len(order)):
            edges.add((order[rng.randrange(j)], order[j]))
        for x in range(len(groups)):
            for y in range(x + 1, len(groups)):
                if (x, y) not in edges and (y, x) not in edges and rng.random() < extra:
                    edges.add((x, y))
        for x, y in sorted(edges):
            a, b = rng.choice(groups[x]), rng.choice(groups[y])
            topo.links[frozenset((a, b))] = LinkQuality(rng.randint(rtt_lo, rtt_hi), rng.randint(10, 100))

    build(params.levels - 1, ())
    topo.nodes = sorted(nodes)
    return topo


def parse_fanout(text: str) -> tuple[int, ...]:
    if not re.fullmatch(r"\d+(,\d+)*", text):
        raise ValueError(f"bad fanout {text!r}, expected e.g. 4,4,4")
    return tuple(int(x) for x in text.split(","))
