"""Goods, orders, addresses and the wrap/unwrap mechanics behind de-identification.

Sealing is an access rule: a layer can only be opened by its ``opener``.
There is no real cryptography here; what matters for the privacy analysis is
who *can* open a layer, not how strong the seal is.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Iterable, NewType, Union

import numpy as np

ItemId = NewType("ItemId", int)
CustomerId = NewType("CustomerId", int)
EntityId = NewType("EntityId", int)
OrderId = NewType("OrderId", int)
SurfaceId = NewType("SurfaceId", int)


class AccessDenied(Exception):
    """Raised when an entity tries to open a layer it is not the opener of."""


class InvalidRoute(ValueError):
    pass


class AddressKind(str, Enum):
    CUSTOMER_HOME = "customer_home"
    VENDOR_SITE = "vendor_site"
    DPN_SITE = "dpn_site"
    PMAN_SITE = "pman_site"
    SECONDARY_HOME = "secondary_recipient_home"


@dataclass(frozen=True, order=True)
class Address:
    entity: int
    kind: AddressKind

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.entity}"

    @classmethod
    def parse(cls, text: str) -> "Address":
        kind, _, entity = text.rpartition(":")
        return cls(int(entity), AddressKind(kind))


class Arch(str, Enum):
    CONVENTIONAL = "conventional"
    DPN = "dpn"
    DPN_PMAN = "dpn_pman"
    DPDN = "dpdn"


@dataclass(frozen=True)
class Topology:
    arch: Arch
    k: int = 1  # relay hops, only meaningful for DPDN

    def __post_init__(self):
        object.__setattr__(self, "arch", Arch(self.arch))
        if self.arch is Arch.DPDN and self.k < 1:
            raise ValueError("DPDN needs k >= 1 hops")
        if self.arch is not Arch.DPDN:
            object.__setattr__(self, "k", 0 if self.arch is Arch.CONVENTIONAL else 1)

    @property
    def relays(self) -> int:
        return self.k

    def __str__(self) -> str:
        return f"dpdn({self.k})" if self.arch is Arch.DPDN else self.arch.value


class SizeClass(IntEnum):
    S0 = 0  # small
    S1 = 1  # medium
    S2 = 2  # large
    S3 = 3  # pallet

    def __str__(self) -> str:
        return self.name


def goods_size(n_items: int) -> SizeClass:
    """Size class of a box holding ``n_items`` goods."""
    if n_items <= 1:
        return SizeClass.S0
    if n_items <= 3:
        return SizeClass.S1
    if n_items <= 8:
        return SizeClass.S2
    return SizeClass.S3


def as_items(items: Iterable[int]) -> tuple[int, ...]:
    """Canonical multiset representation: a sorted tuple."""
    return tuple(sorted(int(i) for i in items))


@dataclass(frozen=True)
class Manifest:
    items: tuple[int, ...]
    final_recipient: Address

    def __post_init__(self):
        if not self.items:
            raise ValueError("manifest must list at least one item")
        object.__setattr__(self, "items", as_items(self.items))

    @property
    def counts(self) -> Counter:
        return Counter(self.items)


@dataclass(frozen=True)
class Package:
    surface: int
    visible_dest: Address
    size: SizeClass
    interior: Union[Manifest, "Package"]
    opener: int

    @property
    def is_goods(self) -> bool:
        return isinstance(self.interior, Manifest)

    def layers(self) -> list["Package"]:
        """Outermost first."""
        out = [self]
        while isinstance(out[-1].interior, Package):
            out.append(out[-1].interior)
        return out

    @property
    def depth(self) -> int:
        return len(self.layers())

    def surfaces(self) -> list[int]:
        return [p.surface for p in self.layers()]

    def manifest(self) -> Manifest:
        """Innermost manifest. Simulator-side bookkeeping only, never an entity's view."""
        return self.layers()[-1].interior


class SurfaceMint:
    """Hands out surface ids that are never reused within a run.

    With an ``rng`` the ids are drawn at random so that their numeric order
    carries no information about when a layer was made; without one they
    count up from ``start`` (handy in hand-built tests).
    """

    def __init__(self, rng: np.random.Generator | None = None, start: int = 1):
        self.rng = rng
        self._next = start
        self.issued: set[int] = set()

    def __call__(self) -> int:
        if self.rng is None:
            while self._next in self.issued:
                self._next += 1
            sid = self._next
        else:
            sid = int(self.rng.integers(1, 2**48))
            while sid in self.issued:
                sid = int(self.rng.integers(1, 2**48))
        self.issued.add(sid)
        return sid

    def reserve(self, sid: int) -> None:
        if sid in self.issued:
            raise ValueError(f"surface id {sid} already issued")
        self.issued.add(sid)


def wrap_package(
    inner: Package,
    dest: Address,
    opener: int,
    mint: SurfaceMint,
    common_class: SizeClass | None = None,
) -> Package:
    """Put ``inner`` in a fresh outer box addressed to ``dest``.

    The outer size is the inner size raised to ``common_class`` (a box can
    never shrink what it holds). The surface id is freshly minted.
    """
    size = inner.size if common_class is None else max(inner.size, SizeClass(common_class))
    taken = set(inner.surfaces())
    sid = mint()
    while sid in taken:
        sid = mint()
    return Package(surface=sid, visible_dest=dest, size=SizeClass(size), interior=inner, opener=opener)


def seal_goods(manifest: Manifest, dest: Address, opener: int, mint: SurfaceMint) -> Package:
    """The innermost layer: goods boxed for ``opener``."""
    return Package(
        surface=mint(),
        visible_dest=dest,
        size=goods_size(len(manifest.items)),
        interior=manifest,
        opener=opener,
    )


def unwrap_package(p: Package, by: int) -> tuple[Address, Package | Manifest]:
    """Open the outer layer of ``p`` as entity ``by``.

    Returns the next visible destination and whatever was inside: another
    package (whose interior stays sealed) or, at the innermost layer, the
    manifest.
    """
    if by != p.opener:
        raise AccessDenied(f"entity {by} cannot open layer {p.surface} (opener {p.opener})")
    inner = p.interior
    if isinstance(inner, Manifest):
        return inner.final_recipient, inner
    return inner.visible_dest, inner


@dataclass(frozen=True)
class Order:
    id: int
    customer: int
    vendor: int
    self_items: tuple[int, ...]
    noise_items: tuple[int, ...] = ()
    placed_at: float = 0.0

    def __post_init__(self):
        if not self.self_items:
            raise ValueError(f"order {self.id} has no self items")
        object.__setattr__(self, "self_items", as_items(self.self_items))
        object.__setattr__(self, "noise_items", as_items(self.noise_items))

    @property
    def all_items(self) -> tuple[int, ...]:
        return as_items(self.self_items + self.noise_items)


_ORIGINS = {AddressKind.VENDOR_SITE, AddressKind.CUSTOMER_HOME, AddressKind.PMAN_SITE}
_RELAYS = {AddressKind.DPN_SITE}
_ENDS = {
    AddressKind.VENDOR_SITE: {AddressKind.CUSTOMER_HOME, AddressKind.SECONDARY_HOME},
    AddressKind.CUSTOMER_HOME: {AddressKind.PMAN_SITE},
    AddressKind.PMAN_SITE: {AddressKind.SECONDARY_HOME},
}


@dataclass(frozen=True)
class RouteSpec:
    """Ordered stops of one shipment, origin first.

    Deliveries go vendor -> [dpn...] -> home. Two auxiliary shapes exist for
    the mutual-aid flow: donations (customer home -> [dpn] -> pman) and
    redistribution (pman -> secondary recipient home).
    """

    hops: tuple[Address, ...]
    donation: "RouteSpec | None" = field(default=None, compare=False)

    def __post_init__(self):
        hops = tuple(self.hops)
        object.__setattr__(self, "hops", hops)
        if len(hops) < 2:
            raise InvalidRoute("a route needs an origin and a destination")
        first, last = hops[0].kind, hops[-1].kind
        if first not in _ORIGINS:
            raise InvalidRoute(f"route cannot start at {first.value}")
        if last not in _ENDS[first]:
            raise InvalidRoute(f"route from {first.value} cannot end at {last.value}")
        for mid in hops[1:-1]:
            if mid.kind not in _RELAYS:
                raise InvalidRoute(f"intermediate hop {mid} is not a relay site")
        if first is AddressKind.PMAN_SITE and len(hops) > 2:
            raise InvalidRoute("redistribution routes are direct")

    @property
    def intermediaries(self) -> tuple[Address, ...]:
        return self.hops[1:-1]

    @property
    def n_edges(self) -> int:
        return len(self.hops) - 1
