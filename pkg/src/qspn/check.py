"""Invariant checks over a finished simulation run.

Each check returns a Verdict; `run_checks` runs the whole suite.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .addressing import divergence_level
from .maps import NoRoute
from .simnet import ForwardingLoop, SimNetwork, probe_route
from .tracer import Kind


@dataclass
class Verdict:
    name: str
    ok: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: {self.detail}"


def connected_pairs(net: SimNetwork) -> set:
    """Ordered pairs joined by some path in the current link graph (BFS)."""
    adj = {a: [] for a in net.engines}
    for key in net.links:
        a, b = tuple(key)
        if a in adj and b in adj:
            adj[a].append(b)
            adj[b].append(a)
    out = set()
    for src in adj:
        seen = {src}
        todo = deque([src])
        while todo:
            cur = todo.popleft()
            for nxt in adj[cur]:
                if nxt not in seen:
                    seen.add(nxt)
                    todo.append(nxt)
        out.update((src, d) for d in seen if d != src)
    return out


def probe_all(net: SimNetwork) -> dict:
    """(src, dst) -> "ok" | "noroute" | "loop" for every ordered pair."""
    out = {}
    for a, b in net.pairs():
        try:
            probe_route(net, a, b)
            out[(a, b)] = "ok"
        except ForwardingLoop:
            out[(a, b)] = "loop"
        except NoRoute:
            out[(a, b)] = "noroute"
    return out


def check_memory_bound(net: SimNetwork) -> Verdict:
    bound = net.params.map_bound
    worst = max((e.maps.target_count() for e in net.engines.values()), default=0)
    worst = max(worst, net.max_targets)
    return Verdict("memory-bound", worst <= bound, f"max={worst} bound={bound}")


def check_loop_freedom(net: SimNetwork, probes=None) -> Verdict:
    probes = probe_all(net) if probes is None else probes
    loops = sorted((a, b) for (a, b), r in probes.items() if r == "loop")
    detail = f"loops={len(loops)}"
    if loops:
        detail += f" first={loops[0][0]}>{loops[0][1]}"
    return Verdict("loop-freedom", not loops, detail)


def check_reachability(net: SimNetwork, probes=None) -> Verdict:
    probes = probe_all(net) if probes is None else probes
    want = connected_pairs(net)
    missing = sorted(p for p in want if probes.get(p) != "ok")
    detail = f"pairs={len(want)} unreachable={len(missing)}"
    if missing:
        detail += f" first={missing[0][0]}>{missing[0][1]}"
    return Verdict("reachability", not missing, detail)


def check_flood_once(net: SimNetwork) -> Verdict:
    """At most one forward per (node, generation, route key), plus coverage.

    Coverage: every member of the gnode a flood was started or locked in
    either received that generation or already holds a live route to each
    gnode on the packet's path.
    """
    dups = [(a, k, n) for a, e in sorted(net.engines.items())
            for k, n in e.forward_events.items() if n > 1]
    got = {}
    for dst, pkts in net.received.items():
        got[dst] = {p.epoch for p in pkts}
    uncovered = []
    seen = set()
    for ev in net.trace:
        if ev.pkt is None or not ev.kind.startswith("send.") or ev.pkt.dead_hops:
            continue
        pkt, origin = ev.pkt, ev.src
        if pkt.level == 0 and ev.kind != "send.orig":
            continue
        if pkt.level > 0 and (pkt.kind != Kind.LTP or ev.kind != "send.lock"):
            continue
        key = (origin, pkt.epoch, pkt.level)
        if key in seen or origin not in net.engines:
            continue
        seen.add(key)
        scope = max(pkt.level, 1)
        for m, eng in net.engines.items():
            if m == origin or divergence_level(m, origin) >= scope:
                continue
            if pkt.epoch in got.get(m, ()):
                continue
            if not _knows_path(eng, pkt):
                uncovered.append((m, pkt.summary()))
    ok = not dups and not uncovered
    detail = f"duplicate_forwards={len(dups)} uncovered={len(uncovered)}"
    if dups:
        detail += f" first={dups[0][0]} x{dups[0][2]}"
    elif uncovered:
        detail += f" first={uncovered[0][0]} {uncovered[0][1]}"
    return Verdict("flood-once", ok, detail)


def _knows_path(eng, pkt) -> bool:
    level = pkt.level
    for hid in pkt.traversed:
        if level == 0:
            if hid == eng.addr or divergence_level(hid, eng.addr) != 0:
                continue
            tid = hid.components[0]
        else:
            tid = hid
            if tid == eng.addr.components[level]:
                continue
        tr = eng.maps.routes[level].get(tid)
        if tr is None or not tr.alive:
            return False
    return True


def check_rule1(net: SimNetwork) -> Verdict:
    """Each engine's first level-k send follows its level-(k-1) exploration."""
    explored = {}
    first_send = {}
    for ev in net.trace:
        if ev.kind == "explored":
            level = int(ev.detail.split()[0][1:])
            explored.setdefault((ev.src, level), ev.time)
        elif ev.kind.startswith("send.") and ev.pkt is not None and ev.pkt.level >= 1:
            first_send.setdefault((ev.src, ev.pkt.level), ev.time)
    bad = sorted((str(a), k) for (a, k), t in first_send.items()
                 if explored.get((a, k - 1), float("inf")) > t)
    counted = sum(e.rule1_violations for e in net.engines.values())
    ok = not bad and not counted
    detail = f"late_sends={len(bad)} engine_count={counted}"
    if bad:
        detail += f" first={bad[0][0]} L{bad[0][1]}"
    return Verdict("rule-1-ordering", ok, detail)


def run_checks(net: SimNetwork) -> list[Verdict]:
    probes = probe_all(net)
    return [
        check_flood_once(net),
        check_loop_freedom(net, probes),
        check_memory_bound(net),
        check_reachability(net, probes),
        check_rule1(net),
    ]
