"""Hierarchical (fractal) addresses.

An address is a vector of gnode IDs, one per significant level.  Storage is
level-0 first; the dotted text form is highest level first, like an IP.
The implicit top-level ID (always 0) is never stored.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import total_ordering

# Returned by divergence_level() when both addresses name the same node.
SAME_NODE = -1


class AddressError(ValueError):
    pass


@dataclass(frozen=True)
class TopologyParams:
    levels: int
    group_size: int = 256

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.group_size < 2:
            raise ValueError(f"group_size must be >= 2, got {self.group_size}")

    @classmethod
    def ipv4(cls) -> TopologyParams:
        return cls(levels=4, group_size=256)

    @classmethod
    def ipv6(cls) -> TopologyParams:
        return cls(levels=16, group_size=256)

    @property
    def address_space(self) -> int:
        return self.group_size ** self.levels

    @property
    def map_bound(self) -> int:
        """Upper bound on route targets a node keeps: B entries per level."""
        return self.group_size * self.levels


@total_ordering
@dataclass(frozen=True, eq=False)
class Address:
    components: tuple[int, ...]
    params: TopologyParams

    def __post_init__(self):
        if len(self.components) != self.params.levels:
            raise AddressError(
                f"expected {self.params.levels} components, got {len(self.components)}"
            )
        for c in self.components:
            if not 0 <= c < self.params.group_size:
                raise AddressError(
                    f"component {c} out of range [0, {self.params.group_size - 1}]"
                )

    def __str__(self):
        return format_address(self)

    def __repr__(self):
        return f"Address({format_address(self)})"

    def __hash__(self):
        return hash(self.components)

    def __eq__(self, other):
        if other is self:
            return True
        if not isinstance(other, Address):
            return NotImplemented
        return self.components == other.components and self.params == other.params

    def __lt__(self, other):
        if not isinstance(other, Address):
            return NotImplemented
        return self.components[::-1] < other.components[::-1]

    def sort_key(self) -> tuple[int, ...]:
        return tuple(reversed(self.components))

    def gnode(self, level: int) -> tuple[int, ...]:
        """Identity of the gnode of `level` containing this node.

        Level 0 is the node itself; the tuple holds components level..n-1.
        """
        _check_level(level, self.params)
        return self.components[level:]

    def replace(self, level: int, gnode_id: int) -> Address:
        comps = list(self.components)
        comps[level] = gnode_id
        return Address(tuple(comps), self.params)


def _check_level(level: int, params: TopologyParams):
    if not 0 <= level < params.levels:
        raise AddressError(f"level {level} out of range [0, {params.levels - 1}]")


def make_address(components_high_first, params: TopologyParams) -> Address:
    return Address(tuple(reversed(tuple(components_high_first))), params)


def parse_address(text: str, params: TopologyParams) -> Address:
    fields = text.strip().split(".")
    if len(fields) != params.levels:
        raise AddressError(
            f"{text!r}: expected {params.levels} dot-separated fields, got {len(fields)}"
        )
    values = []
    for f in fields:
        if not f.isdigit():
            raise AddressError(f"{text!r}: non-numeric field {f!r}")
        values.append(int(f))
    return make_address(values, params)


def format_address(addr: Address) -> str:
    return ".".join(str(c) for c in reversed(addr.components))


def gnode_id_at(addr: Address, level: int) -> int:
    _check_level(level, addr.params)
    return addr.components[level]


def divergence_level(a: Address, b: Address) -> int:
    """Highest level at which `a` and `b` differ, or SAME_NODE."""
    if a.params is not b.params and a.params != b.params:
        raise AddressError("addresses use different topology parameters")
    for level in range(a.params.levels - 1, -1, -1):
        if a.components[level] != b.components[level]:
            return level
    return SAME_NODE
