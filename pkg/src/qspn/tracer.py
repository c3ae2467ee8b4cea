"""Tracer packets and the pure packet-level rules.

Packets are immutable; every transformation returns a new packet.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Union

from .addressing import Address, TopologyParams, divergence_level
from .maps import NodeMaps, apply_fact
from .rem import IDENTITY, Rem


class PacketError(ValueError):
    pass


class LoopError(PacketError):
    pass


class Kind(enum.IntEnum):
    CTP = 0
    LTP = 1


# Kind byte bits: a plain exploration TP (forwarded regardless of interest),
# and a TP bounced back by a dead-end gnode, retracing its recorded path.
FORCED_BIT = 0x80
BOUNCED_BIT = 0x40
PAD = 0xFF
INF_U32 = 0xFFFFFFFF


@dataclass(frozen=True)
class Hop:
    id: Union[Address, int]
    level: int
    link_rem: Rem = IDENTITY
    dead: bool = False

    def __str__(self):
        return ("+" if self.dead else "") + str(self.id)


@dataclass(frozen=True)
class TracerPacket:
    level: int
    kind: Kind = Kind.CTP
    hops: tuple[Hop, ...] = ()
    lock_ip: Optional[Address] = None
    lock_rem: Rem = IDENTITY
    forced: bool = False
    bounced: bool = False
    # Flood generation, (origin time, origin address sort key, sequence).
    # Not part of the wire encoding or of the dedup key.
    epoch: tuple = ()

    def __post_init__(self):
        if (self.kind == Kind.LTP) != (self.lock_ip is not None):
            raise PacketError("an LTP carries lock_ip and a CTP does not")

    @cached_property
    def traversed(self) -> tuple:
        return tuple(h.id for h in self.hops if h.level == self.level and not h.dead)

    @cached_property
    def dead_hops(self) -> tuple[Hop, ...]:
        return tuple(h for h in self.hops if h.dead)

    def summary(self) -> str:
        kind = self.kind.name if not self.forced else self.kind.name.replace("CTP", "TP")
        if self.bounced:
            kind += "*"
        route = "->".join(str(h) for h in self.hops) or "-"
        lock = f" lock={self.lock_ip}" if self.lock_ip is not None else ""
        return f"{kind}/L{self.level} [{route}]{lock}"


def replace(pkt: TracerPacket, **kw) -> TracerPacket:
    """Copy of `pkt` with some fields changed (cheaper than dataclasses.replace)."""
    f = {"level": pkt.level, "kind": pkt.kind, "hops": pkt.hops, "lock_ip": pkt.lock_ip,
         "lock_rem": pkt.lock_rem, "forced": pkt.forced, "bounced": pkt.bounced, "epoch": pkt.epoch}
    f.update(kw)
    return TracerPacket(**f)


def append_hop(pkt: TracerPacket, hop: Hop, allow_repeat: bool = False) -> TracerPacket:
    if not hop.dead and hop.level == pkt.level and hop.id in pkt.traversed and not allow_repeat:
        raise LoopError(f"{hop.id} already traversed by {pkt.summary()}")
    return replace(pkt, hops=pkt.hops + (hop,))


def lock(pkt: TracerPacket, ingress_bnode: Address, crossing: Rem = IDENTITY) -> TracerPacket:
    """CTP -> LTP at the ingress bnode.

    The hop list is kept as is; `crossing` is the quality of the physical
    link the packet entered on, carried as lock_rem.
    """
    if pkt.kind != Kind.CTP:
        raise PacketError("only a CTP can be locked")
    return replace(pkt, kind=Kind.LTP, lock_ip=ingress_bnode, lock_rem=crossing)


def unlock(pkt: TracerPacket, egress_bnode: Address, own_gnode_id: int, rem_across: Rem,
           allow_repeat: bool = False) -> TracerPacket:
    """LTP -> CTP at the egress bnode, appending the gnode it just crossed.

    rem_across becomes the link_rem of the appended hop: the cost of going
    from this egress to the ingress bnode and out over the entry link.
    """
    if pkt.kind != Kind.LTP:
        raise PacketError("only an LTP can be unlocked")
    if divergence_level(egress_bnode, pkt.lock_ip) >= pkt.level:
        raise PacketError(f"{egress_bnode} is not in the gnode locked by {pkt.lock_ip}")
    ctp = replace(pkt, kind=Kind.CTP, lock_ip=None, lock_rem=IDENTITY)
    return append_hop(ctp, Hop(own_gnode_id, pkt.level, rem_across), allow_repeat=allow_repeat)


def has_traversed(pkt: TracerPacket, gnode_id) -> bool:
    return gnode_id in pkt.traversed


def dedup_key(pkt: TracerPacket) -> tuple:
    """Route identity of a packet; REM values are deliberately excluded."""
    dead = tuple((h.level, h.id) for h in pkt.dead_hops)
    return (pkt.level, pkt.traversed, dead, pkt.lock_ip, pkt.bounced)


def is_interesting(pkt: TracerPacket, maps: NodeMaps, facts, seen=()) -> bool:
    """True iff `facts` (what `pkt` teaches this node) would change `maps`.

    A perfect copy of an already seen packet is never interesting.  The
    conditions covered by the fact kinds: a new bnode, a known bnode on a new
    border, the death of a bnode used by saved routes (BnodeFact /
    NodeDeathFact); a new gnode, the death of a gnode, an improved route
    (RouteFact / ReachFact / LinkLossFact).
    """
    if dedup_key(pkt) in seen:
        return False
    return any(apply_fact(maps, f, commit=False) for f in facts)


# -- wire encoding -------------------------------------------------------------

def _u32(x: float) -> int:
    if math.isinf(x):
        return INF_U32
    return min(int(round(x)), INF_U32 - 1)


def _id_bytes(hop_id, level: int, params: TopologyParams) -> bytes:
    n = params.levels
    if isinstance(hop_id, Address):
        return bytes(reversed(hop_id.components))
    slots = [PAD] * n
    slots[n - 1 - level] = hop_id
    return bytes(slots)


def encode(pkt: TracerPacket, params: TopologyParams) -> bytes:
    kind = int(pkt.kind) | (FORCED_BIT if pkt.forced else 0) | (BOUNCED_BIT if pkt.bounced else 0)
    out = bytearray(struct.pack("<BBH", kind, pkt.level, len(pkt.hops)))
    for h in pkt.hops:
        out += _id_bytes(h.id, h.level, params)
        flags = (1 if h.dead else 0) | (h.level << 1) | (0x80 if isinstance(h.id, Address) and h.level else 0)
        out += struct.pack("<IIB", _u32(h.link_rem.total_rtt), _u32(h.link_rem.bottleneck_bw), flags)
    if pkt.kind == Kind.LTP:
        out += bytes(reversed(pkt.lock_ip.components))
        out += struct.pack("<II", _u32(pkt.lock_rem.total_rtt), _u32(pkt.lock_rem.bottleneck_bw))
    return bytes(out)


def _rem(rtt: int, bw: int) -> Rem:
    return Rem(rtt, math.inf if bw == INF_U32 else bw)


def decode(data: bytes, params: TopologyParams) -> TracerPacket:
    n = params.levels
    kind_b, level, count = struct.unpack_from("<BBH", data, 0)
    off = 4
    hops = []
    for _ in range(count):
        raw = data[off:off + n]
        rtt, bw, flags = struct.unpack_from("<IIB", data, off + n)
        off += n + 9
        hl = (flags >> 1) & 0x3F
        if hl == 0 or flags & 0x80:
            hop_id = Address(tuple(reversed(raw)), params)
        else:
            hop_id = raw[n - 1 - hl]
        hops.append(Hop(hop_id, hl, _rem(rtt, bw), bool(flags & 1)))
    kind = Kind(kind_b & ~(FORCED_BIT | BOUNCED_BIT))
    lock_ip, lock_rem = None, IDENTITY
    if kind == Kind.LTP:
        lock_ip = Address(tuple(reversed(data[off:off + n])), params)
        rtt, bw = struct.unpack_from("<II", data, off + n)
        lock_rem = _rem(rtt, bw)
        off += n + 8
    if off != len(data):
        raise PacketError(f"trailing bytes in packet ({len(data) - off})")
    return TracerPacket(level, kind, tuple(hops), lock_ip, lock_rem, bool(kind_b & FORCED_BIT),
                        bool(kind_b & BOUNCED_BIT))
