"""Per-node protocol engine.

A NodeEngine is a single-threaded state machine.  The simulator sets
`engine.now`, delivers one event (radar reply, packet, timer) and collects
the returned OutgoingMessages plus any timers and log records the engine
queued meanwhile.

Level 0 is a tracer-packet flood confined to the level-1 gnode.  Levels
n >= 1 follow the flat-level rules: an ingress bnode locks an incoming CTP
into an LTP and floods it inside its level-n gnode, egress bnodes unlock it
again, append their gnode ID and pass it on.
"""

from __future__ import annotations

import copy
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .addressing import Address, TopologyParams, divergence_level
from .maps import (
    BnodeFact, GnodeFull, LinkLossFact, NodeDeathFact, NodeMaps, ReachEntry, ReachFact,
    RouteFact, apply_fact, free_nodes,
)
from .rem import DEFAULT_POLICY, IDENTITY, LinkQuality, Rem, RemPolicy, delta_exceeds, rem_compose
from .tracer import Hop, Kind, TracerPacket, append_hop, dedup_key, lock, replace, unlock

log = logging.getLogger(__name__)


class HookError(RuntimeError):
    pass


class AllRnodesRejected(HookError):
    pass


class ProtocolViolation(ValueError):
    pass


@dataclass
class EngineConfig:
    policy: RemPolicy = DEFAULT_POLICY
    max_routes: int = 3
    radar_period: float = 500.0
    # Delay before a detected change is acted upon; None means 2 radar periods.
    change_delay: Optional[float] = None
    # Fallback release of rule-1 queues when the level below never shows traffic.
    rule1_timeout: float = 4000.0
    tombstone_interval: float = 20000.0
    epoch_lifetime: float = 20000.0
    loop_check: bool = True
    # Test hook: forward the first forwarded packet twice.
    fault_duplicate_forward: bool = False

    @property
    def delay(self) -> float:
        return 2 * self.radar_period if self.change_delay is None else self.change_delay


@dataclass(frozen=True)
class OutgoingMessage:
    dest: Address
    pkt: TracerPacket
    send_time: float
    reason: str = "fwd"


@dataclass
class HookOutcome:
    address: Address
    steps: list[str] = field(default_factory=list)
    created_gnode: bool = False
    rejected_by: list[Address] = field(default_factory=list)
    gateway: Optional[Address] = None


class NodeEngine:
    def __init__(self, addr: Optional[Address], params: TopologyParams,
                 config: Optional[EngineConfig] = None):
        self.params = params
        self.cfg = config or EngineConfig()
        self.addr = addr
        self.maps = NodeMaps(addr, self.cfg.policy, self.cfg.max_routes) if addr is not None else None
        self.rnodes: dict[Address, LinkQuality] = {}
        self.applied_link: dict[Address, Rem] = {}
        self.announced_link: dict[Address, LinkQuality] = {}
        self.greeted: set[Address] = set()
        self.explored = [False] * params.levels
        self.ctp_queue: dict[int, deque] = {lv: deque() for lv in range(params.levels)}
        self.seen_keys: dict[tuple, set] = {}
        self.pending_ltps: list[TracerPacket] = []
        self.announced_peer: dict[tuple[int, Address], Rem] = {}
        self.now = 0.0
        self.alive = True
        self._seq = 0
        self._armed: set[tuple] = set()
        self._last_replies: dict[Address, LinkQuality] = {}
        self.timers: list[tuple[float, tuple]] = []
        self.records: list[tuple] = []
        self.forward_events: dict[tuple, int] = {}
        self.rule1_violations = 0
        self._faulted = False
        # In-gnode neighbors we hooked next to whose greeting is still due.
        self.fresh: set[Address] = set()
        self._claimed: set[Address] = set()
        # Higher-level rnodes whose first CTP we answer with a reflection.
        self.awaiting: set[Address] = set()

    def __repr__(self):
        return f"NodeEngine({self.addr})"

    # -- helpers -------------------------------------------------------------

    def div(self, other: Address) -> int:
        return divergence_level(self.addr, other)

    def gid(self, level: int) -> int:
        return self.addr.components[level]

    def scope_rnodes(self, level: int) -> list[Address]:
        """Rnodes inside the own gnode of `level` (level 0 means level-1 gnode)."""
        bound = max(level, 1)
        return sorted(r for r in self.rnodes if self.div(r) < bound)

    def external_rnodes(self, level: int) -> list[Address]:
        return sorted(r for r in self.rnodes if self.div(r) == level)

    def is_bnode(self, level: int) -> bool:
        return bool(self.external_rnodes(level))

    def link_rem(self, r: Address) -> Rem:
        return self.rnodes[r].as_rem()

    def new_epoch(self) -> tuple:
        self._seq += 1
        return (self.now, self.addr.sort_key(), self._seq)

    def record(self, kind: str, peer=None, detail: str = "", pkt: Optional[TracerPacket] = None):
        self.records.append((self.now, kind, peer, detail, pkt))

    def arm(self, token: tuple, delay: float):
        if token in self._armed:
            return
        self._armed.add(token)
        self.timers.append((self.now + delay, token))

    def _explored(self, level: int) -> bool:
        if level < 0 or self.explored[level]:
            return True
        if level == 0 and not self.scope_rnodes(0):
            self._note_explored(0, "vacuous")
            return True
        return False

    def _seen(self, pkt: TracerPacket) -> bool:
        if pkt.forced and not self.cfg.loop_check:
            # Debug mode: a plain TP is protected by nothing but the loop check.
            return False
        return dedup_key(pkt) in self.seen_keys.get(pkt.epoch, ())

    def _mark_seen(self, pkt: TracerPacket):
        horizon = self.now - self.cfg.epoch_lifetime
        if len(self.seen_keys) > 64:
            for ep in [e for e in self.seen_keys if e and e[0] < horizon]:
                del self.seen_keys[ep]
        self.seen_keys.setdefault(pkt.epoch, set()).add(dedup_key(pkt))

    def _send(self, pkt: TracerPacket, dests, reason: str) -> list[OutgoingMessage]:
        dests = list(dests)
        if not dests:
            return []
        if pkt.level >= 1 and not self._explored(pkt.level - 1):
            self.rule1_violations += 1
        self._note_explored(pkt.level, "sent")
        return [OutgoingMessage(d, pkt, self.now, reason) for d in dests]

    def _note_explored(self, level: int, how: str):
        """Level-`level` exploration has reached this node (it sent or received such a packet)."""
        if self.explored[level]:
            return
        self.explored[level] = True
        self.record("explored", detail=f"L{level} {how}")
        if level + 1 < self.params.levels and self.ctp_queue[level + 1]:
            self.timers.append((self.now, ("release", level + 1)))

    def _count_forward(self, pkt: TracerPacket):
        k = (pkt.epoch, dedup_key(pkt))
        self.forward_events[k] = self.forward_events.get(k, 0) + 1

    def _gated(self, pkt: TracerPacket, sender, targets=None) -> bool:
        """Rule 1: queue a level-n packet until level n-1 has been explored."""
        if pkt.level == 0 or self._explored(pkt.level - 1):
            if sender is not None:
                self._note_explored(pkt.level, "received")
            return False
        self.ctp_queue[pkt.level].append((pkt, sender, targets))
        self.record("queue", sender, f"L{pkt.level}", pkt)
        self.arm(("rule1", pkt.level), self.cfg.rule1_timeout)
        return True

    # -- radar ---------------------------------------------------------------

    def on_radar_round(self, replies: dict[Address, LinkQuality]) -> list[OutgoingMessage]:
        self._last_replies = dict(replies)
        out = []
        for n in sorted(replies):
            out += self.on_radar_reply(n, replies[n])
        for r in sorted(self.rnodes):
            if r not in replies:
                self.arm(("lost", r), self.cfg.delay)
        return out

    def on_radar_reply(self, neighbor: Address, quality: LinkQuality) -> list[OutgoingMessage]:
        self._last_replies[neighbor] = quality
        if neighbor not in self.rnodes:
            self.arm(("join", neighbor), self.cfg.delay)
        elif self.rnodes[neighbor] != quality:
            self.rnodes[neighbor] = quality
            self.arm(("quality", neighbor), self.cfg.delay)
        return []

    def _confirm(self, n: Address, q: LinkQuality):
        self.rnodes[n] = q
        self.applied_link.setdefault(n, q.as_rem())
        self.announced_link.setdefault(n, q)

    def on_timer(self, token: tuple) -> list[OutgoingMessage]:
        self._armed.discard(token)
        kind = token[0]
        if kind == "join":
            n = token[1]
            if n not in self._last_replies:
                return []
            if n not in self.rnodes:
                self._confirm(n, self._last_replies[n])
                self.record("join", n)
            if n in self.greeted or n in self.awaiting:
                return []
            return self._greet(n, initiate=self.addr < n) + self._export(n)
        if kind == "lost":
            n = token[1]
            if n in self._last_replies or n not in self.rnodes:
                return []
            return self.on_node_death(n)
        if kind == "quality":
            return self._quality_timer(token[1])
        if kind == "release":
            return self._release(token[1])
        if kind == "rule1":
            level = token[1]
            if self.ctp_queue[level] and not self._explored(level - 1):
                self.explored[level - 1] = True
                self.record("explored", detail=f"L{level - 1} timeout")
            return self._release(level)
        if kind == "death":
            return self._death_timer(token[1])
        if kind == "rule6":
            return self._rule6_fire(token[1], token[2])
        raise ValueError(f"unknown timer {token!r}")

    def _greet(self, n: Address, initiate: bool) -> list[OutgoingMessage]:
        """First CTP toward a new rnode: level 0 inside the gnode, level n across."""
        level = self.div(n)
        if level > 0 and not initiate:
            # Our CTP toward n is the reflection of n's first one.
            self.awaiting.add(n)
            return []
        self.greeted.add(n)
        if level == 0:
            pkt = TracerPacket(0, Kind.CTP, (Hop(self.addr, 0),), epoch=self.new_epoch())
            return self._send(pkt, [n], "orig")
        pkt = TracerPacket(level, Kind.CTP, (Hop(self.gid(level), level),), epoch=self.new_epoch())
        if self._gated(pkt, None, [n]):
            return []
        return self._send(pkt, [n], "orig")

    def _quality_timer(self, n: Address) -> list[OutgoingMessage]:
        if n not in self.rnodes:
            return []
        cur = self.rnodes[n]
        old = self.announced_link.get(n, cur)
        level = self.div(n)
        if not delta_exceeds(old.as_rem(), cur.as_rem(), level, self.cfg.policy):
            return []
        self.announced_link[n] = cur
        self.record("link-change", n, f"rtt {old.rtt:g}->{cur.rtt:g}")
        if level == 0:
            pkt = TracerPacket(0, Kind.CTP, (Hop(self.addr, 0),), epoch=self.new_epoch())
        else:
            pkt = TracerPacket(level, Kind.CTP, (Hop(self.gid(level), level),), epoch=self.new_epoch())
        return self._send(pkt, [n], "orig")

    def on_node_join_neighbor(self, n: Address, quality: LinkQuality) -> list[OutgoingMessage]:
        """`n` finished hooking next to us: send it exactly one directed CTP."""
        self._confirm(n, quality)
        self._last_replies[n] = quality
        self.greeted.add(n)
        level = self.div(n)
        if level == 0:
            pkt = TracerPacket(0, Kind.CTP, (Hop(self.addr, 0),), epoch=self.new_epoch())
        else:
            pkt = TracerPacket(level, Kind.CTP, (Hop(self.gid(level), level),), epoch=self.new_epoch())
            if self._gated(pkt, None, [n]):
                return self._export(n)
            return self._send(pkt, [n], "orig") + self._export(n)
        return self._send(pkt, [n], "orig")

    def _release(self, level: int) -> list[OutgoingMessage]:
        out = []
        q = self.ctp_queue[level]
        while q and self._explored(level - 1):
            pkt, sender, targets = q.popleft()
            self.record("release", sender, f"L{level}", pkt)
            if targets is not None:
                out += self._send(pkt, [t for t in targets if t in self.rnodes], "orig")
            elif sender in self.rnodes:
                out += self.receive(pkt, sender)
        return out

    # -- receiving -----------------------------------------------------------

    def receive(self, pkt: TracerPacket, sender: Address,
                quality: Optional[LinkQuality] = None) -> list[OutgoingMessage]:
        if not self.alive:
            return []
        if sender not in self.rnodes:
            q = quality or self._last_replies.get(sender)
            if q is None:
                self.record("drop", sender, "unknown-sender", pkt)
                return []
            # Heard from a neighbor before our own radar confirmed it.
            self._confirm(sender, q)
            self._last_replies[sender] = q
            self.record("join", sender, "implicit")
        level_s = self.div(sender)
        if _is_border_notice(pkt):
            return self.on_border_notice(pkt, sender)
        if pkt.kind == Kind.LTP:
            if level_s >= pkt.level:
                return self._violation(pkt, sender, "LTP from outside the gnode")
            return self.on_receive_ltp(pkt, sender)
        if pkt.level == 0:
            if level_s != 0:
                return self._violation(pkt, sender, "level-0 CTP across a gnode border")
            return self.on_receive_level0(pkt, sender)
        if level_s != pkt.level:
            return self._violation(pkt, sender, f"level-{pkt.level} CTP over a level-{level_s} link")
        return self.on_receive_ctp_high(pkt, sender)

    def _violation(self, pkt, sender, why):
        log.warning("%s: %s from %s", self.addr, why, sender)
        self.record("drop", sender, "violation", pkt)
        return []

    def _drop(self, pkt, sender, why) -> list[OutgoingMessage]:
        self.record("drop", sender, why, pkt)
        return []

    def _forward(self, new_pkt: TracerPacket, targets, received: TracerPacket, reason="fwd"):
        self._count_forward(received)
        out = self._send(new_pkt, targets, reason)
        if out and self.cfg.fault_duplicate_forward and not self._faulted:
            self._faulted = True
            self._count_forward(received)
            out += self._send(new_pkt, targets, reason)
        return out

    def on_receive_level0(self, pkt: TracerPacket, sender: Address) -> list[OutgoingMessage]:
        self._note_explored(0, "received")
        if self.cfg.loop_check and self.addr in pkt.traversed:
            return self._drop(pkt, sender, "loop")
        if self._seen(pkt):
            return self._drop(pkt, sender, "dup")
        t = pkt.epoch[0] if pkt.epoch else self.now
        facts = []
        if pkt.hops and pkt.hops[0].dead:
            dead = pkt.hops[0].id
            if len(pkt.hops) > 1:
                self.maps.drop_paths_over(dead, pkt.hops[1].id)
            if dead == self.addr or (dead in self.rnodes and dead in self._last_replies):
                self._mark_seen(pkt)
                return self._refute(dead, pkt, sender) + self._after_change()
            facts.append(NodeDeathFact(dead, at=t, forget=False))
            self.arm(("death", dead), self.cfg.delay)
        q = self.link_rem(sender)
        shifted = False
        old = self.applied_link.get(sender)
        if old is not None and old != q:
            self.maps.shift_gateway(sender, old, q)
            shifted = True
        self.applied_link[sender] = q
        live = [h for h in pkt.hops if not h.dead]
        cum = q
        for i in range(len(live) - 1, -1, -1):
            h = live[i]
            if h.id != self.addr and self.div(h.id) == 0:
                facts.append(RouteFact(0, h.id.components[0], sender, cum, at=t,
                                       replace=(i == len(live) - 1),
                                       path=tuple(x.id for x in live[i:])))
            cum = rem_compose(cum, h.link_rem)
        changed = [apply_fact(self.maps, f) for f in facts]
        self._mark_seen(pkt)
        # A joiner copied its maps, so a neighbor's greeting teaches it nothing,
        # but the rest of the gnode still has to hear about the joiner.
        greeting = sender in self.fresh and live and live[0].id == sender
        self.fresh.discard(sender)
        # Every death claim is flooded once: it re-explores around the hole.
        claim = bool(pkt.hops) and pkt.hops[0].dead
        if not (shifted or any(changed) or pkt.forced or greeting or claim):
            return self._drop(pkt, sender, "stale")
        fwd = _append(pkt, Hop(self.addr, 0, q), self.cfg.loop_check)
        targets = [r for r in self.scope_rnodes(0) if r != sender and r not in pkt.traversed]
        out = self._forward(fwd, targets, pkt)
        if greeting and not targets:
            # Dead end: hand the same flood generation back, carrying ourselves.
            refl = TracerPacket(0, Kind.CTP, (Hop(self.addr, 0),), epoch=pkt.epoch)
            out += self._send(refl, [sender], "reflect")
        return out + self._after_change()

    def _refute(self, dead: Address, pkt, sender) -> list[OutgoingMessage]:
        """A death claim about a node we still see: announce it is alive."""
        if dead == self.addr:
            self.record("drop", sender, "self-death", pkt)
            return []
        self.record("refute", dead, "", pkt)
        hops = (Hop(dead, 0), Hop(self.addr, 0, self.link_rem(dead)))
        ref = TracerPacket(0, Kind.CTP, hops, epoch=self.new_epoch())
        self._mark_seen(ref)
        return self._send(ref, [r for r in self.scope_rnodes(0) if r != dead], "orig")

    def _high_facts(self, pkt: TracerPacket, bnode: Address, crossing: Rem,
                    ext_gateway, source) -> list:
        level = pkt.level
        own = self.gid(level)
        facts = []
        live = [h for h in pkt.hops if not h.dead and h.level == level]
        if pkt.hops and pkt.hops[0].dead and live:
            facts.append(LinkLossFact(level, pkt.hops[0].id, live[0].id))
        if not live:
            return facts
        facts.append(BnodeFact(level, bnode, live[-1].id, crossing))
        ids = [h.id for h in live]
        cum = crossing
        done = {own}
        # Walk back from the newest hop; only the nearest occurrence of a
        # gnode matters (IDs repeat only with the loop check disabled).
        for i in range(len(live) - 1, -1, -1):
            if ids[i] not in done:
                done.add(ids[i])
                entry = ReachEntry(cum, tuple(ids[i:]), ext_gateway, source)
                facts.append(ReachFact(level, ids[i], bnode, entry))
            cum = rem_compose(cum, live[i].link_rem)
        return facts

    def on_receive_ctp_high(self, pkt: TracerPacket, sender: Address) -> list[OutgoingMessage]:
        """Ingress side: a level-n CTP entering our level-n gnode."""
        level = pkt.level
        if self._gated(pkt, sender):
            return []
        own = self.gid(level)
        if pkt.bounced:
            return self._on_return(lock(pkt, self.addr, self.link_rem(sender)), sender, flood=True)
        out = []
        first = sender in self.awaiting
        if first:
            # First CTP over a new link: answer with our own, dead end or not.
            self.awaiting.discard(sender)
            self.greeted.add(sender)
            out += self._reflect(level, sender)
        if self.cfg.loop_check and own in pkt.traversed:
            return out + self._drop(pkt, sender, "loop")
        if self._seen(pkt):
            return out + self._drop(pkt, sender, "dup")
        crossing = self.link_rem(sender)
        ltp = lock(pkt, self.addr, crossing)
        facts = self._high_facts(pkt, self.addr, crossing, sender, ltp)
        changed = [apply_fact(self.maps, f) for f in facts]
        self._mark_seen(pkt)
        if not (any(changed) or pkt.forced):
            return out + self._drop(pkt, sender, "stale")
        if any(changed):
            out += self._after_change()
        out += self._forward(ltp, self.scope_rnodes(level), pkt, "lock")
        out += self._egress(ltp)
        if not pkt.dead_hops and not self._untraversed_border(pkt):
            if pkt.forced:
                back = _replace(_append(pkt, Hop(own, level, crossing), self.cfg.loop_check), bounced=True)
                out += self._send(back, [sender], "bounce")
            elif not first:
                out += self._reflect(level, sender)
        return out

    def _reflect(self, level: int, sender: Address) -> list[OutgoingMessage]:
        refl = TracerPacket(level, Kind.CTP, (Hop(self.gid(level), level),), epoch=self.new_epoch())
        return self._send(refl, [sender], "reflect")

    def _on_return(self, ltp: TracerPacket, sender: Address, flood: bool) -> list[OutgoingMessage]:
        """A bounced TP retracing its path: flood the gnode, then step one gnode back."""
        key_pkt = ltp
        if self._seen(key_pkt):
            return self._drop(ltp, sender, "dup")
        self._mark_seen(key_pkt)
        level = ltp.level
        targets = [r for r in self.scope_rnodes(level) if r != sender and r != ltp.lock_ip]
        out = self._forward(ltp, targets, ltp, "lock" if flood else "fwd")
        trav = ltp.traversed
        own = self.gid(level)
        if own not in trav or trav.index(own) == 0:
            return out
        prev = trav[trav.index(own) - 1]
        back = [r for r in self.external_rnodes(level) if r.components[level] == prev]
        if back:
            ctp = _replace(ltp, kind=Kind.CTP, lock_ip=None, lock_rem=IDENTITY)
            out += self._send(ctp, back[:1], "return")
        return out

    def on_receive_ltp(self, pkt: TracerPacket, sender: Address) -> list[OutgoingMessage]:
        level = pkt.level
        if self._gated(pkt, sender):
            return []
        if pkt.bounced:
            return self._on_return(pkt, sender, flood=False)
        if self.cfg.loop_check and self.gid(level) in pkt.traversed:
            return self._drop(pkt, sender, "loop")
        if self._seen(pkt):
            return self._drop(pkt, sender, "dup")
        b = pkt.lock_ip
        self._mark_seen(pkt)
        if b == self.addr:
            return self._drop(pkt, sender, "own")
        facts = self._high_facts(pkt, b, pkt.lock_rem, None, pkt)
        changed = [apply_fact(self.maps, f) for f in facts]
        if not (any(changed) or pkt.forced):
            return self._drop(pkt, sender, "stale")
        out = self._after_change() if any(changed) else []
        targets = [r for r in self.scope_rnodes(level) if r != sender and r != b]
        out += self._forward(pkt, targets, pkt)
        return out + self._egress(pkt)

    def _egress(self, ltp: TracerPacket, only: Optional[Address] = None) -> list[OutgoingMessage]:
        level = ltp.level
        trav = ltp.traversed
        ext = [r for r in self.external_rnodes(level) if only is None or r == only]
        targets = [r for r in ext if not (self.cfg.loop_check and r.components[level] in trav)]
        # A neighbor gnode already on the path still gets the part of the
        # path after it: a real route that avoids it.
        pruned: dict[int, list[Address]] = {}
        if self.cfg.loop_check and not ltp.forced and not ltp.dead_hops:
            for r in ext:
                x = r.components[level]
                if x in trav:
                    i = len(trav) - 1 - trav[::-1].index(x)
                    if i + 1 < len(ltp.hops):
                        pruned.setdefault(i + 1, []).append(r)
        if not targets and not pruned:
            return []
        base = self.maps.rem_to_bnode(ltp.lock_ip)
        if base is None:
            if all(dedup_key(p) != dedup_key(ltp) or p.epoch != ltp.epoch for p in self.pending_ltps):
                self.pending_ltps.append(ltp)
                self.record("pending", ltp.lock_ip, "", ltp)
            return []
        across = rem_compose(base.rem, ltp.lock_rem)
        ctp = unlock(ltp, self.addr, self.gid(level), across, allow_repeat=not self.cfg.loop_check)
        if ltp.lock_ip != self.addr:
            self.announced_peer[(level, ltp.lock_ip)] = base.rem
        out = []
        if targets and not self._gated(ctp, None, targets):
            out += self._send(ctp, targets, "export" if only is not None else "unlock")
        for start, group in sorted(pruned.items()):
            part = unlock(replace(ltp, hops=ltp.hops[start:]), self.addr, self.gid(level), across)
            if not self._gated(part, None, group):
                out += self._send(part, group, "prune")
        return out

    def _sources(self, level: int, peer: Optional[Address] = None) -> list[TracerPacket]:
        """Stored LTPs behind the reach table of `level`, optionally of one bnode."""
        out, keys = [], set()
        for per_b in self.maps.reach[level].values():
            for b, entries in per_b.items():
                if peer is not None and b != peer:
                    continue
                for e in entries:
                    if e.source is not None and dedup_key(e.source) not in keys:
                        keys.add(dedup_key(e.source))
                        out.append(e.source)
        return out

    def _export(self, n: Address) -> list[OutgoingMessage]:
        """New external link: egress every stored LTP toward the new rnode."""
        level = self.div(n)
        out = []
        if level < 1:
            return out
        for src in self._sources(level):
            out += self._egress(replace(src, epoch=self.new_epoch()), only=n)
        return out

    def exports_after_hook(self) -> list[OutgoingMessage]:
        out = []
        for n in sorted(self.rnodes):
            if self.div(n) >= 1:
                out += self._export(n)
        return out

    def _untraversed_border(self, pkt: TracerPacket) -> bool:
        level = pkt.level
        done = set(pkt.traversed) | {self.gid(level)}
        if any(r.components[level] not in done for r in self.external_rnodes(level)):
            return True
        return any(h not in done for bs in self.maps.bnodes[level].values() for h in bs)

    def originate_tp(self, level: int) -> list[OutgoingMessage]:
        """Start a plain exploration TP at `level` from this node."""
        pkt = TracerPacket(level, Kind.LTP, (), lock_ip=self.addr, forced=True, epoch=self.new_epoch())
        if level == 0:
            pkt = TracerPacket(0, Kind.CTP, (Hop(self.addr, 0),), forced=True, epoch=self.new_epoch())
            return self._send(pkt, self.scope_rnodes(0), "orig")
        self._mark_seen(pkt)
        out = self._send(pkt, self.scope_rnodes(level), "orig")
        return out + self._egress(pkt)

    # -- map maintenance -----------------------------------------------------

    def _after_change(self) -> list[OutgoingMessage]:
        self.maps.rebuild_external(self.rnodes, self.now)
        self.maps.purge_tombstones(self.now, self.cfg.tombstone_interval)
        out = self._retry_pending()
        self._check_rule6()
        return out

    def _retry_pending(self) -> list[OutgoingMessage]:
        out = []
        horizon = self.now - self.cfg.epoch_lifetime
        waiting, self.pending_ltps = self.pending_ltps, []
        for p in waiting:
            if p.epoch and p.epoch[0] < horizon:
                continue
            if self.maps.rem_to_bnode(p.lock_ip) is None:
                self.pending_ltps.append(p)
            else:
                out += self._egress(p)
        return out

    def _check_rule6(self):
        for (level, peer), old in list(self.announced_peer.items()):
            cur = self.maps.rem_to_bnode(peer)
            if cur is not None and delta_exceeds(old, cur.rem, level, self.cfg.policy):
                self.arm(("rule6", level, peer), self.cfg.delay)

    def on_rem_change(self, level: int, peer: Address) -> list[OutgoingMessage]:
        """Re-check rule 6 for one peer bnode right away."""
        return self._rule6_fire(level, peer)

    def _rule6_fire(self, level: int, peer: Address) -> list[OutgoingMessage]:
        cur = self.maps.rem_to_bnode(peer)
        old = self.announced_peer.get((level, peer))
        if cur is None or old is None or not delta_exceeds(old, cur.rem, level, self.cfg.policy):
            return []
        self.announced_peer[(level, peer)] = cur.rem
        self.record("rem-change", peer, f"L{level} rtt {old.total_rtt:g}->{cur.rem.total_rtt:g}")
        out = []
        for src in self._sources(level, peer):
            out += self._egress(_replace(src, epoch=self.new_epoch()))
        return out

    # -- deaths and border loss ---------------------------------------------

    def _borders_of(self, node: Address) -> list[tuple[int, int]]:
        return [(lv, h) for lv in range(1, self.params.levels)
                for h in sorted(self.maps.bnodes[lv].get(node, {}))]

    def on_node_death(self, dead: Address) -> list[OutgoingMessage]:
        """`dead` stopped answering the radar."""
        if dead not in self.rnodes:
            return []
        level = self.div(dead)
        del self.rnodes[dead]
        for d in (self.applied_link, self.announced_link, self._last_replies):
            d.pop(dead, None)
        self.greeted.discard(dead)
        self.awaiting.discard(dead)
        self.record("lost", dead, f"L{level}")
        self.maps.remove_gateway(dead, at=self.now)
        out = []
        if level == 0:
            apply_fact(self.maps, NodeDeathFact(dead, at=self.now, forget=False))
            pkt = TracerPacket(0, Kind.CTP, (Hop(dead, 0, dead=True), Hop(self.addr, 0)),
                               epoch=self.new_epoch())
            self._mark_seen(pkt)
            out += self._send(pkt, self.scope_rnodes(0), "orig")
            self._claimed.add(dead)
            self.arm(("death", dead), self.cfg.delay)
        else:
            self.maps.drop_reach_via(self.addr, dead)
            h = dead.components[level]
            if not any(r.components[level] == h for r in self.external_rnodes(level)):
                out += self.on_border_loss(level, h)
        return out + self._after_change()

    def _death_timer(self, dead: Address) -> list[OutgoingMessage]:
        """The death claim stood unrefuted: drop what `dead` bordered on."""
        claimed = dead in self._claimed
        self._claimed.discard(dead)
        tr = self.maps.routes[0].get(dead.components[0])
        if dead in self.rnodes or (tr is not None and tr.alive):
            return []
        borders = self._borders_of(dead)
        apply_fact(self.maps, NodeDeathFact(dead, at=self.now))
        out = []
        for lv, h in borders:
            if claimed and lv >= 2:
                out += self._border_notice(lv, h, dead)
            if self.is_bnode(lv):
                out += self._maybe_broken_link(lv, h)
        return out + self._after_change()

    def on_border_loss(self, level: int, border: int) -> list[OutgoingMessage]:
        """This node lost its last link into gnode `border` of `level`."""
        apply_fact(self.maps, BnodeFact(level, self.addr, border, dead=True))
        out = self._border_notice(level, border, self.addr)
        return out + self._maybe_broken_link(level, border)

    def _border_notice(self, level: int, border: int, bnode: Address) -> list[OutgoingMessage]:
        hops = (Hop(border, level, dead=True), Hop(bnode, 0))
        pkt = TracerPacket(level - 1, Kind.CTP, hops, epoch=self.new_epoch())
        self._mark_seen(pkt)
        return self._send(pkt, self.scope_rnodes(level), "orig")

    def on_border_notice(self, pkt: TracerPacket, sender: Address) -> list[OutgoingMessage]:
        self._note_explored(pkt.level, "received")
        level = pkt.hops[0].level
        border, bnode = pkt.hops[0].id, pkt.hops[1].id
        if self._seen(pkt):
            return self._drop(pkt, sender, "dup")
        self._mark_seen(pkt)
        if bnode == self.addr:
            return self._drop(pkt, sender, "own")
        if not apply_fact(self.maps, BnodeFact(level, bnode, border, dead=True)):
            return self._drop(pkt, sender, "stale")
        out = self._forward(pkt, [r for r in self.scope_rnodes(level) if r != sender], pkt)
        if self.is_bnode(level):
            out += self._maybe_broken_link(level, border)
        return out + self._after_change()

    def _maybe_broken_link(self, level: int, border: int) -> list[OutgoingMessage]:
        """No bnode of our gnode borders `border` any more: tell the other neighbors."""
        if self.maps.borders_of_gnode(level, border):
            return []
        if any(r.components[level] == border for r in self.external_rnodes(level)):
            return []
        own = self.gid(level)
        apply_fact(self.maps, LinkLossFact(level, border, own))
        targets = [r for r in self.external_rnodes(level) if r.components[level] != border]
        if not targets:
            return []
        hops = (Hop(border, level, dead=True), Hop(own, level))
        pkt = TracerPacket(level, Kind.CTP, hops, epoch=self.new_epoch())
        self._mark_seen(pkt)
        self.record("link-loss", None, f"L{level} {border}<->{own}")
        return self._send(pkt, targets, "orig")

    # -- hooking -------------------------------------------------------------

    def hook(self, neighbors, rng) -> HookOutcome:
        """Join the network.  `neighbors` is a list of (NodeEngine, LinkQuality)."""
        steps = ["1: bootstrap tag, radar scan"]
        levels, size = self.params.levels, self.params.group_size
        if not neighbors:
            addr = Address(tuple(rng.randrange(size) for _ in range(levels)), self.params)
            self._install(addr)
            self._mark_hooked()
            steps.append(f"2: no rnodes, new gnode {addr}")
            return HookOutcome(addr, steps, created_gnode=True)
        order = sorted(neighbors, key=lambda nq: (nq[1].rtt, nq[0].addr.sort_key()))
        rejected = []
        chosen = None
        for eng, q in order:
            try:
                free = free_nodes(eng.maps)
            except GnodeFull:
                rejected.append(eng.addr)
                steps.append(f"3: {eng.addr} reports a full gnode")
                continue
            chosen = (eng, q, free)
            break
        if chosen is None:
            raise AllRnodesRejected(f"all {len(neighbors)} rnodes rejected the join")
        eng, q, free = chosen
        steps.append(f"3: {eng.addr} offers {len(free)} free IDs")
        addr = eng.addr.replace(0, free[0])
        self._install(addr)
        steps.append(f"4: picked {addr}")
        self.maps.bnodes = copy.deepcopy(eng.maps.bnodes)
        self.maps.reach = copy.deepcopy(eng.maps.reach)
        steps.append("5: copied bnode map and reach table, gnode kept")
        link = q.as_rem()
        self.maps.update(RouteFact(0, eng.addr.components[0], eng.addr, link, at=self.now, replace=True))
        for tid, tr in sorted(eng.maps.internal.items()):
            if tid != addr.components[0] and tr.alive and tr.entries:
                self.maps.update(RouteFact(0, tid, eng.addr, rem_compose(link, tr.entries[0].rem),
                                           at=self.now))
        steps.append("6: internal map through the chosen rnode")
        for n, nq in neighbors:
            self._confirm(n.addr, nq)
            self._last_replies[n.addr] = nq
            self.greeted.add(n.addr)
            if divergence_level(addr, n.addr) == 0:
                self.fresh.add(n.addr)
        self._mark_hooked()
        self.maps.rebuild_external(self.rnodes, self.now)
        steps.append(f"7: {len(neighbors)} rnodes registered")
        return HookOutcome(addr, steps, rejected_by=rejected, gateway=eng.addr)

    def _mark_hooked(self):
        """A hooked node inherits the exploration already done around it."""
        for level in range(self.params.levels):
            self._note_explored(level, "hook")

    def _install(self, addr: Address):
        self.addr = addr
        self.maps = NodeMaps(addr, self.cfg.policy, self.cfg.max_routes)


def _is_border_notice(pkt: TracerPacket) -> bool:
    return (len(pkt.hops) == 2 and pkt.hops[0].dead and pkt.hops[0].level == pkt.level + 1
            and isinstance(pkt.hops[1].id, Address))


def _append(pkt: TracerPacket, hop: Hop, loop_check: bool) -> TracerPacket:
    return append_hop(pkt, hop, allow_repeat=not loop_check)


def _replace(pkt: TracerPacket, **kw) -> TracerPacket:
    return replace(pkt, **kw)
