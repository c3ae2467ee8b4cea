"""Per-node maps: internal map, external map, bnode map and reach table.

The internal map (level 0) holds routes to the nodes of the owner's level-1
gnode, keyed by level-0 ID.  The external map holds, for each level l >= 1,
routes to the sibling gnodes of the owner's level-l gnode.  The bnode map
records which bnodes of the owner's gnodes border which foreign gnodes, and
the reach table records, per bnode, the cost of the known routes from that
bnode to each foreign gnode.  External routes are derived from the reach
table plus the owner's lower-level routes (see NodeMaps.rebuild_external).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Optional

from .addressing import SAME_NODE, Address, divergence_level, gnode_id_at
from .rem import DEFAULT_POLICY, IDENTITY, Rem, RemPolicy, rem_compose

DEFAULT_MAX_ROUTES = 3


class MapError(ValueError):
    pass


class NoRoute(LookupError):
    pass


class GnodeFull(LookupError):
    pass


class Change(enum.Enum):
    NONE = "none"
    NEW = "new"
    NEW_BNODE = "new-bnode"
    NEW_BORDER = "new-border"
    IMPROVED = "improved"
    UPDATED = "updated"
    DIED = "died"

    def __bool__(self):
        return self is not Change.NONE


@dataclass(frozen=True)
class RouteEntry:
    gateway: Address
    rem: Rem
    learned_at: float = 0.0
    # Nodes the route was learned along (target first), when known.
    path: tuple = ()


@dataclass
class TargetRoutes:
    entries: list[RouteEntry] = field(default_factory=list)
    alive: bool = True
    died_at: Optional[float] = None


@dataclass(frozen=True)
class RouteFact:
    """A learned route: `target` at `level`, reachable through `gateway`.

    With alive=False the fact announces the target's death.  replace=True
    means the rem is authoritative for that gateway (a direct-link measure)
    rather than one more candidate.
    """

    level: int
    target: int
    gateway: Optional[Address] = None
    rem: Optional[Rem] = None
    alive: bool = True
    at: float = 0.0
    replace: bool = False
    # A fact along the same path as the stored entry also replaces it.
    path: tuple = ()


@dataclass(frozen=True)
class ReachEntry:
    """Cost from a bnode to a foreign gnode along one gnode-level route.

    hops is the gnode-ID sequence of the route (oldest first, the gnode
    adjacent to the bnode last).  ext_gateway is the external rnode used when
    the bnode is the map owner itself.  source keeps the packet the fact was
    learned from so the route can be re-announced.
    """

    tail: Rem
    hops: tuple[int, ...]
    ext_gateway: Optional[Address] = None
    source: Any = None

    def crosses(self, a: int, b: int, after: Optional[int] = None) -> bool:
        seq = self.hops + ((after,) if after is not None else ())
        return any({x, y} == {a, b} for x, y in zip(seq, seq[1:]))


@dataclass
class BnodeReport:
    change: Change
    affected: tuple[int, ...] = ()

    def __bool__(self):
        return bool(self.change) or bool(self.affected)


class NodeMaps:
    def __init__(self, owner: Address, policy: RemPolicy = DEFAULT_POLICY,
                 max_routes: int = DEFAULT_MAX_ROUTES):
        self.owner = owner
        self.params = owner.params
        self.policy = policy
        self.max_routes = max_routes
        n = self.params.levels
        self.routes: dict[int, dict[int, TargetRoutes]] = {lv: {} for lv in range(n)}
        self.bnodes: dict[int, dict[Address, dict[int, Rem]]] = {lv: {} for lv in range(n)}
        self.reach: dict[int, dict[int, dict[Address, list[ReachEntry]]]] = {
            lv: {} for lv in range(1, n)}

    @property
    def internal(self) -> dict[int, TargetRoutes]:
        return self.routes[0]

    @property
    def external(self) -> dict[int, dict[int, TargetRoutes]]:
        return {lv: self.routes[lv] for lv in range(1, self.params.levels)}

    def _check(self, level: int, target: int):
        if not 0 <= level < self.params.levels:
            raise MapError(f"level {level} out of range")
        if target == gnode_id_at(self.owner, level):
            raise MapError(f"target {target} is the owner's own gnode at level {level}")

    def best(self, level: int, target: int) -> Optional[RouteEntry]:
        tr = self.routes[level].get(target)
        if tr is None or not tr.alive or not tr.entries:
            return None
        return tr.entries[0]

    def route_toward(self, addr: Address) -> Optional[RouteEntry]:
        """Best live route toward `addr` (CIDR lookup), None if unknown."""
        level = divergence_level(self.owner, addr)
        if level == SAME_NODE:
            return None
        return self.best(level, gnode_id_at(addr, level))

    def target_count(self) -> int:
        return sum(len(t) for t in self.routes.values())

    def gateways(self):
        for level, targets in self.routes.items():
            for tid, tr in targets.items():
                for e in tr.entries:
                    yield level, tid, e.gateway

    def _sort(self, entries: list[RouteEntry]) -> list[RouteEntry]:
        return sorted(entries, key=lambda e: (self.policy.sort_key(e.rem), e.gateway.sort_key()))

    def update(self, fact: RouteFact, commit: bool = True) -> Change:
        self._check(fact.level, fact.target)
        targets = self.routes[fact.level]
        tr = targets.get(fact.target)
        if not fact.alive:
            if tr is None or not tr.alive:
                return Change.NONE
            if commit:
                tr.alive = False
                tr.died_at = fact.at
                tr.entries = []
            return Change.DIED
        if fact.gateway is None or fact.rem is None:
            raise MapError("a live route needs a gateway and a rem")
        entry = RouteEntry(fact.gateway, fact.rem, fact.at, fact.path)
        if tr is None or not tr.alive:
            if tr is not None and tr.died_at is not None and fact.at <= tr.died_at:
                return Change.NONE
            if commit:
                targets[fact.target] = TargetRoutes([entry])
            return Change.NEW
        old = next((e for e in tr.entries if e.gateway == fact.gateway), None)
        if old is not None:
            if old.rem == fact.rem:
                return Change.NONE
            same = bool(fact.path) and old.path == fact.path
            if not (fact.replace or same) and not self._better(fact.rem, old.rem):
                return Change.NONE
        others = [e for e in tr.entries if e.gateway != fact.gateway]
        kept = self._sort(others + [entry])[: self.max_routes]
        if entry not in kept:
            if old is None:
                return Change.NONE
            # replaced rem fell off the kept set: drop the stale entry
        old_best = tr.entries[0].rem if tr.entries else None
        if commit:
            tr.entries = kept
        if old_best is None or self._better(kept[0].rem, old_best):
            return Change.IMPROVED
        return Change.UPDATED

    def _better(self, a: Rem, b: Rem) -> bool:
        return self.policy.sort_key(a) < self.policy.sort_key(b)

    def set_routes(self, level: int, target: int, entries: list[RouteEntry], at: float = 0.0) -> Change:
        """Replace the route set of one target wholesale (derived routes)."""
        self._check(level, target)
        entries = self._sort(entries)[: self.max_routes]
        targets = self.routes[level]
        tr = targets.get(target)
        if not entries:
            if tr is None or not tr.alive:
                return Change.NONE
            tr.alive, tr.died_at, tr.entries = False, at, []
            return Change.DIED
        if tr is None or not tr.alive:
            targets[target] = TargetRoutes(entries)
            return Change.NEW
        same = [(e.gateway, e.rem) for e in tr.entries] == [(e.gateway, e.rem) for e in entries]
        if same:
            return Change.NONE
        improved = self._better(entries[0].rem, tr.entries[0].rem) if tr.entries else True
        tr.entries = entries
        return Change.IMPROVED if improved else Change.UPDATED

    def remove_gateway(self, gateway: Address, at: float = 0.0) -> list[tuple[int, int]]:
        """Drop every entry through `gateway`; returns the (level, target) pairs touched."""
        touched = []
        for level, targets in self.routes.items():
            for tid, tr in targets.items():
                kept = [e for e in tr.entries if e.gateway != gateway]
                if len(kept) != len(tr.entries):
                    tr.entries = kept
                    touched.append((level, tid))
                    if not kept and tr.alive:
                        tr.alive, tr.died_at = False, at
        return touched

    def drop_paths_over(self, a: Address, b: Address) -> list[int]:
        """Drop internal entries learned along the broken link a<->b."""
        touched = []
        for tid, tr in self.routes[0].items():
            kept = [e for e in tr.entries
                    if not any({x, y} == {a, b} for x, y in zip(e.path, e.path[1:]))]
            if len(kept) != len(tr.entries):
                tr.entries = kept
                touched.append(tid)
                if not kept:
                    # Unreachable for now, but not dead: no tombstone.
                    tr.alive = False
        return touched

    def shift_gateway(self, gateway: Address, old_link: Rem, new_link: Rem):
        """Re-base entries whose first hop is the link to `gateway`."""
        d = new_link.total_rtt - old_link.total_rtt
        for targets in self.routes.values():
            for tr in targets.values():
                changed = False
                out = []
                for e in tr.entries:
                    if e.gateway == gateway:
                        rtt = max(0.0, e.rem.total_rtt + d)
                        bw = min(e.rem.bottleneck_bw, new_link.bottleneck_bw)
                        e = RouteEntry(e.gateway, Rem(rtt, bw), e.learned_at, e.path)
                        changed = True
                    out.append(e)
                if changed:
                    tr.entries = self._sort(out)

    def purge_tombstones(self, now: float, interval: float):
        for targets in self.routes.values():
            for tid in [t for t, tr in targets.items()
                        if not tr.alive and tr.died_at is not None and now - tr.died_at >= interval]:
                del targets[tid]

    # -- bnode map ---------------------------------------------------------

    def record_bnode(self, bnode: Address, level: int, border: Optional[int], rem: Rem = IDENTITY,
                     dead: bool = False, commit: bool = True) -> BnodeReport:
        if not 0 <= level < self.params.levels:
            raise MapError(f"level {level} out of range")
        known = self.bnodes[level]
        borders = known.get(bnode)
        if dead:
            if borders is None or (border is not None and border not in borders):
                return BnodeReport(Change.NONE)
            lost = set(borders) if border is None else {border}
            affected = set()
            for tid, per_b in self.reach.get(level, {}).items():
                for e in per_b.get(bnode, ()):
                    if not e.hops or e.hops[-1] in lost or border is None:
                        affected.add(tid)
            if commit:
                for b in lost:
                    del borders[b]
                if not borders:
                    del known[bnode]
                self._drop_reach(level, bnode, lost if border is not None else None)
            return BnodeReport(Change.DIED, tuple(sorted(affected)))
        if border is None:
            raise MapError("a live bnode fact needs a border gnode")
        if borders is None:
            if commit:
                known[bnode] = {border: rem}
            return BnodeReport(Change.NEW_BNODE)
        if border not in borders:
            if commit:
                borders[border] = rem
            return BnodeReport(Change.NEW_BORDER)
        if borders[border] != rem:
            if commit:
                borders[border] = rem
            return BnodeReport(Change.UPDATED)
        return BnodeReport(Change.NONE)

    def forget_bnode(self, bnode: Address) -> list[tuple[int, int]]:
        """Remove a bnode from every level; returns affected (level, target) pairs."""
        affected = []
        for level in range(self.params.levels):
            if bnode in self.bnodes[level]:
                rep = self.record_bnode(bnode, level, None, dead=True)
                affected.extend((level, t) for t in rep.affected)
            elif level >= 1:
                for tid in self._drop_reach(level, bnode, None):
                    affected.append((level, tid))
        return affected

    def borders_of_gnode(self, level: int, border: int) -> list[Address]:
        """Known bnodes of the owner's level-`level` gnode bordering `border`."""
        return sorted(b for b, bs in self.bnodes[level].items() if border in bs)

    # -- reach table -------------------------------------------------------

    def record_reach(self, level: int, target: int, bnode: Address, entry: ReachEntry,
                     commit: bool = True) -> Change:
        self._check(level, target)
        per_target = self.reach[level].get(target)
        entries = per_target.get(bnode, []) if per_target else []
        old = next((e for e in entries if e.hops == entry.hops), None)
        if old is not None and old.tail == entry.tail and old.ext_gateway == entry.ext_gateway:
            return Change.NONE
        others = [e for e in entries if e.hops != entry.hops]
        key = lambda e: (self.policy.sort_key(e.tail), e.hops)
        kept = sorted(others + [entry], key=key)[: self.max_routes]
        if entry not in kept and old is None:
            return Change.NONE
        if commit:
            self.reach[level].setdefault(target, {})[bnode] = kept
        if per_target is None:
            return Change.NEW
        if not entries:
            return Change.NEW_BORDER
        return Change.IMPROVED if kept[0] is entry else Change.UPDATED

    def _drop_reach(self, level: int, bnode: Address, borders) -> list[int]:
        touched = []
        if level not in self.reach:
            return touched
        for tid, per_b in list(self.reach[level].items()):
            if bnode not in per_b:
                continue
            kept = [e for e in per_b[bnode] if borders is not None and e.hops and e.hops[-1] not in borders]
            if len(kept) != len(per_b[bnode]):
                touched.append(tid)
                if kept:
                    per_b[bnode] = kept
                else:
                    del per_b[bnode]
            if not per_b:
                del self.reach[level][tid]
        return touched

    def drop_reach_via(self, bnode: Address, ext_gateway: Address) -> list[tuple[int, int]]:
        """Drop entries of `bnode` that leave through `ext_gateway`."""
        touched = []
        for level, per_t in self.reach.items():
            for tid, per_b in list(per_t.items()):
                entries = per_b.get(bnode)
                if not entries:
                    continue
                kept = [e for e in entries if e.ext_gateway != ext_gateway]
                if len(kept) == len(entries):
                    continue
                touched.append((level, tid))
                if kept:
                    per_b[bnode] = kept
                else:
                    del per_b[bnode]
                if not per_b:
                    del per_t[tid]
        return touched

    def purge_reach_link(self, level: int, a: int, b: int, commit: bool = True) -> list[int]:
        """Drop reach entries whose route uses the gnode link a<->b."""
        touched = set()
        for tid, per_b in list(self.reach[level].items()):
            for bnode, entries in list(per_b.items()):
                own = gnode_id_at(bnode, level)
                kept = [e for e in entries if not e.crosses(a, b, after=own)]
                if len(kept) != len(entries):
                    touched.add(tid)
                    if commit:
                        if kept:
                            per_b[bnode] = kept
                        else:
                            del per_b[bnode]
            if commit and not per_b:
                del self.reach[level][tid]
        return sorted(touched)

    def rebuild_external(self, rnodes, at: float = 0.0) -> list[tuple[int, int, Change]]:
        """Recompute external routes from the reach table, lowest level first.

        `rnodes` is the owner's current neighbor set; entries whose gateway
        is not a current rnode are skipped.
        """
        changes = []
        for level in range(1, self.params.levels):
            targets = set(self.reach[level]) | {t for t, tr in self.routes[level].items() if tr.alive}
            for tid in sorted(targets):
                best_by_gw: dict[Address, RouteEntry] = {}
                for bnode, entries in self.reach[level].get(tid, {}).items():
                    for e in entries:
                        cand = self._via(bnode, e, rnodes, at)
                        if cand is None:
                            continue
                        cur = best_by_gw.get(cand.gateway)
                        if cur is None or self._better(cand.rem, cur.rem):
                            best_by_gw[cand.gateway] = cand
                ch = self.set_routes(level, tid, list(best_by_gw.values()), at)
                if ch:
                    changes.append((level, tid, ch))
        return changes

    def rem_to_bnode(self, bnode: Address) -> Optional[RouteEntry]:
        """Route used to reach a bnode of one of the owner's gnodes.

        A bnode in a different lower gnode is reached through the route to
        that gnode as a whole.
        """
        if bnode == self.owner:
            return RouteEntry(self.owner, IDENTITY)
        return self.route_toward(bnode)

    def _via(self, bnode: Address, e: ReachEntry, rnodes, at) -> Optional[RouteEntry]:
        if bnode == self.owner:
            if e.ext_gateway is None or e.ext_gateway not in rnodes:
                return None
            return RouteEntry(e.ext_gateway, e.tail, at)
        base = self.route_toward(bnode)
        if base is None or base.gateway not in rnodes:
            return None
        return RouteEntry(base.gateway, rem_compose(base.rem, e.tail), at)


def map_update(maps: NodeMaps, fact: RouteFact) -> Change:
    return maps.update(fact)


def bnode_record(maps: NodeMaps, bnode: Address, level: int, border: Optional[int],
                 rem: Rem = IDENTITY, dead: bool = False) -> BnodeReport:
    return maps.record_bnode(bnode, level, border, rem, dead=dead)


def best_gateway(maps: NodeMaps, dest: Address) -> Address:
    level = divergence_level(maps.owner, dest)
    if level == SAME_NODE:
        raise NoRoute(f"{dest} is the owner itself")
    e = maps.best(level, gnode_id_at(dest, level))
    if e is None:
        raise NoRoute(f"{maps.owner}: no route to {dest} (level {level})")
    return e.gateway


def free_nodes(maps: NodeMaps) -> list[int]:
    own = gnode_id_at(maps.owner, 0)
    used = {tid for tid, tr in maps.internal.items() if tr.alive and tr.entries}
    out = [i for i in range(maps.params.group_size) if i != own and i not in used]
    if not out:
        raise GnodeFull(f"gnode of {maps.owner} is full")
    return out


# -- facts carried by tracer packets -------------------------------------------
# Each fact is one piece of knowledge a received packet offers.  apply_fact()
# with commit=False is a dry run used by the interest predicate.


@dataclass(frozen=True)
class BnodeFact:
    level: int
    bnode: Address
    border: Optional[int]
    rem: Rem = IDENTITY
    dead: bool = False


@dataclass(frozen=True)
class ReachFact:
    level: int
    target: int
    bnode: Address
    entry: ReachEntry


@dataclass(frozen=True)
class LinkLossFact:
    """The gnode link a<->b at `level` is broken."""

    level: int
    a: int
    b: int


@dataclass(frozen=True)
class NodeDeathFact:
    node: Address
    at: float = 0.0
    # False: only the internal route dies, bnode knowledge is kept for now.
    forget: bool = True


def apply_fact(maps: NodeMaps, fact, commit: bool = True) -> bool:
    if isinstance(fact, RouteFact):
        return bool(maps.update(fact, commit=commit))
    if isinstance(fact, BnodeFact):
        return bool(maps.record_bnode(fact.bnode, fact.level, fact.border, fact.rem,
                                      dead=fact.dead, commit=commit))
    if isinstance(fact, ReachFact):
        return bool(maps.record_reach(fact.level, fact.target, fact.bnode, fact.entry, commit=commit))
    if isinstance(fact, LinkLossFact):
        return bool(maps.purge_reach_link(fact.level, fact.a, fact.b, commit=commit))
    if isinstance(fact, NodeDeathFact):
        return _apply_death(maps, fact, commit)
    raise TypeError(f"unknown fact {fact!r}")


def _apply_death(maps: NodeMaps, fact: NodeDeathFact, commit: bool) -> bool:
    changed = False
    if divergence_level(maps.owner, fact.node) == 0:
        changed |= bool(maps.update(RouteFact(0, gnode_id_at(fact.node, 0), alive=False, at=fact.at),
                                    commit=commit))
    if not fact.forget:
        return changed
    uses = any(fact.node in maps.bnodes[lv] for lv in range(maps.params.levels)) or any(
        fact.node in per_b for lv in maps.reach for per_b in maps.reach[lv].values())
    if uses:
        changed = True
        if commit:
            maps.forget_bnode(fact.node)
    return changed
