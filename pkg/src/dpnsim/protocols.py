"""Route planning, onion construction, mix-node batching and the mutual-aid flow."""

from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .model import (
    AccessDenied,
    Address,
    AddressKind,
    Arch,
    Manifest,
    Order,
    Package,
    RouteSpec,
    SizeClass,
    SurfaceMint,
    Topology,
    seal_goods,
    unwrap_package,
    wrap_package,
)
from .workload import SecondaryRequest

__all__ = [
    "Dist", "Threshold", "TimedDelay", "Pool", "MixPolicy", "Directory", "DirectoryTooSmall",
    "plan_route", "plan_donation_route", "build_onion", "MixNodeState", "Flush",
    "mix_on_arrival", "mix_on_timer", "PmanState", "pman_split", "pman_receive", "pman_redistribute",
]

DIST_KINDS = ("constant", "uniform", "exponential")


class DirectoryTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class Dist:
    """Nonnegative delay distribution.

    constant: (value,); uniform: (low, high); exponential: (mean,).
    """

    kind: str = "constant"
    params: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        if self.kind not in DIST_KINDS:
            raise ValueError(f"unknown distribution {self.kind!r}; expected one of {DIST_KINDS}")
        need = {"constant": 1, "uniform": 2, "exponential": 1}[self.kind]
        if len(self.params) != need:
            raise ValueError(f"{self.kind} takes {need} parameter(s), got {len(self.params)}")
        if any(p < 0 or not np.isfinite(p) for p in self.params):
            raise ValueError(f"{self.kind} parameters must be finite and >= 0")
        if self.kind == "uniform" and self.params[0] > self.params[1]:
            raise ValueError("uniform needs low <= high")

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "constant":
            return self.params[0]
        if self.kind == "uniform":
            lo, hi = self.params
            return float(rng.uniform(lo, hi)) if hi > lo else lo
        mean = self.params[0]
        return float(rng.exponential(mean)) if mean > 0 else 0.0

    @property
    def mean(self) -> float:
        if self.kind == "uniform":
            return (self.params[0] + self.params[1]) / 2
        return self.params[0]

    def __str__(self) -> str:
        return f"{self.kind}({','.join(repr(p) for p in self.params)})"


@dataclass(frozen=True)
class Threshold:
    x: int

    def __post_init__(self):
        if self.x < 1:
            raise ValueError("threshold X must be >= 1")

    def __str__(self) -> str:
        return f"threshold({self.x})"


@dataclass(frozen=True)
class TimedDelay:
    delay: Dist

    def __str__(self) -> str:
        return f"timed({self.delay})"


@dataclass(frozen=True)
class Pool:
    pool_min: int
    flush_prob: float

    def __post_init__(self):
        if self.pool_min < 0:
            raise ValueError("pool_min must be >= 0")
        if not 0 < self.flush_prob <= 1:
            raise ValueError("flush_prob must be in (0, 1]")

    def __str__(self) -> str:
        return f"pool({self.pool_min},{self.flush_prob!r})"


MixPolicy = Union[Threshold, TimedDelay, Pool]


@dataclass
class Directory:
    """Every entity of a run and the kind of site it operates."""

    kinds: dict[int, AddressKind] = field(default_factory=dict)
    pman_of_recipient: dict[int, int] = field(default_factory=dict)

    @classmethod
    def build(cls, *, customers: int, vendors: int = 1, dpn_sites: int = 1, pman_sites: int = 0,
              secondary_recipients: int = 0) -> "Directory":
        d = cls()
        for kind, n in (
            (AddressKind.VENDOR_SITE, vendors),
            (AddressKind.DPN_SITE, dpn_sites),
            (AddressKind.PMAN_SITE, pman_sites),
            (AddressKind.CUSTOMER_HOME, customers),
            (AddressKind.SECONDARY_HOME, secondary_recipients),
        ):
            for _ in range(n):
                d.kinds[len(d.kinds)] = kind
        pmans = d.entities(AddressKind.PMAN_SITE)
        for i, r in enumerate(d.entities(AddressKind.SECONDARY_HOME)):
            if pmans:
                d.pman_of_recipient[r] = pmans[i % len(pmans)]
        return d

    def entities(self, kind: AddressKind) -> list[int]:
        return [e for e, k in self.kinds.items() if k is kind]

    def address(self, entity: int) -> Address:
        return Address(entity, self.kinds[entity])

    @property
    def vendors(self) -> list[int]:
        return self.entities(AddressKind.VENDOR_SITE)

    @property
    def dpns(self) -> list[int]:
        return self.entities(AddressKind.DPN_SITE)

    @property
    def pmans(self) -> list[int]:
        return self.entities(AddressKind.PMAN_SITE)

    @property
    def customers(self) -> list[int]:
        return self.entities(AddressKind.CUSTOMER_HOME)

    @property
    def secondaries(self) -> list[int]:
        return self.entities(AddressKind.SECONDARY_HOME)


def _pick_dpns(directory: Directory, k: int, rng: np.random.Generator) -> list[Address]:
    sites = directory.dpns
    if len(sites) < k:
        raise DirectoryTooSmall(f"need {k} DPN site(s), directory has {len(sites)}")
    chosen = rng.choice(len(sites), size=k, replace=False)
    return [directory.address(sites[i]) for i in chosen]


def plan_donation_route(customer: int, directory: Directory, rng: np.random.Generator,
                        via_dpn: bool = True) -> RouteSpec:
    pmans = directory.pmans
    if not pmans:
        raise DirectoryTooSmall("mutual-aid topology needs at least one PMAN site")
    pman = directory.address(pmans[int(rng.integers(len(pmans)))])
    home = directory.address(customer)
    if via_dpn:
        return RouteSpec((home, *_pick_dpns(directory, 1, rng), pman))
    return RouteSpec((home, pman))


def plan_route(order: Order, topology: Topology, directory: Directory, rng: np.random.Generator,
               via_dpn: bool = True) -> RouteSpec:
    """Stops for ``order`` under ``topology``.

    For the mutual-aid topology the returned route carries a ``donation``
    route when the order has noise items; the customer re-ships those after
    delivery.
    """
    vendor = directory.address(order.vendor)
    home = directory.address(order.customer)
    arch = topology.arch
    if arch is Arch.CONVENTIONAL:
        return RouteSpec((vendor, home))
    if arch is Arch.DPDN:
        return RouteSpec((vendor, *_pick_dpns(directory, topology.k, rng), home))
    route = RouteSpec((vendor, *_pick_dpns(directory, 1, rng), home))
    if arch is Arch.DPN_PMAN and order.noise_items:
        donation = plan_donation_route(order.customer, directory, rng, via_dpn=via_dpn)
        route = RouteSpec(route.hops, donation=donation)
    return route


def build_onion(route: RouteSpec, manifest: Manifest, mint: SurfaceMint) -> Package:
    """One sealed layer per stop after the origin, outermost for the first stop."""
    stops = route.hops[1:]
    pkg = seal_goods(manifest, stops[-1], stops[-1].entity, mint)
    for stop in reversed(stops[:-1]):
        pkg = wrap_package(pkg, stop, stop.entity, mint)
    return pkg


@dataclass
class Held:
    package: Package  # already rewrapped for the next leg
    inbound: int
    arrived: float
    depart_at: float | None = None


@dataclass(frozen=True)
class Flush:
    package: Package
    dest: Address
    depart: float
    arrived: float
    inbound: int


@dataclass
class MixNodeState:
    node: int
    policy: MixPolicy
    common_class: SizeClass = SizeClass.S0
    held: list[Held] = field(default_factory=list)


def _peel(pkg: Package, node: int) -> tuple[Address, Package]:
    if pkg.visible_dest.entity != node:
        raise AccessDenied(f"package {pkg.surface} addressed to {pkg.visible_dest}, arrived at relay {node}")
    dest, inner = unwrap_package(pkg, node)
    while isinstance(inner, Package) and inner.opener == node:
        dest, inner = unwrap_package(inner, node)
    if isinstance(inner, Manifest):
        raise AccessDenied(f"relay {node} reached goods in package {pkg.surface}; route ends at a relay")
    return dest, inner


def _release(state: MixNodeState, idx: Sequence[int], now: float) -> list[Flush]:
    out = []
    for i in idx:
        h = state.held[i]
        out.append(Flush(h.package, h.package.visible_dest, now, h.arrived, h.inbound))
    keep = set(range(len(state.held))) - set(idx)
    state.held = [h for i, h in enumerate(state.held) if i in keep]
    return out


def mix_on_arrival(state: MixNodeState, pkg: Package, now: float, rng: np.random.Generator,
                   mint: SurfaceMint) -> tuple[MixNodeState, list[Flush]]:
    """Open, rewrap and hold ``pkg``; return whatever the policy releases now.

    ``state`` is updated in place and returned.
    """
    dest, inner = _peel(pkg, state.node)
    out = wrap_package(inner, dest, dest.entity, mint, state.common_class)
    held = Held(out, pkg.surface, now)
    policy = state.policy
    if isinstance(policy, TimedDelay):
        held.depart_at = now + policy.delay.sample(rng)
        state.held.append(held)
        return state, []
    state.held.append(held)
    if isinstance(policy, Threshold):
        if len(state.held) >= policy.x:
            return state, _release(state, [int(i) for i in rng.permutation(len(state.held))], now)
        return state, []
    excess = len(state.held) - policy.pool_min
    if excess <= 0:
        return state, []
    order = [int(i) for i in rng.permutation(len(state.held))]
    picked = [i for i in order[:excess] if rng.random() < policy.flush_prob]
    return state, _release(state, picked, now) if picked else []


def mix_on_timer(state: MixNodeState, now: float) -> tuple[MixNodeState, list[Flush]]:
    """Release timed packages whose departure time has come."""
    due = [i for i, h in enumerate(state.held) if h.depart_at is not None and h.depart_at <= now]
    due.sort(key=lambda i: (state.held[i].depart_at, i))
    return state, _release(state, due, now) if due else []


@dataclass
class PmanState:
    """Mutual-aid stock. Holds goods and pending requests, never who donated."""

    node: int
    inventory: Counter = field(default_factory=Counter)
    pending_requests: deque = field(default_factory=deque)


def pman_split(order: Order) -> tuple[Manifest, tuple[int, ...]]:
    """Customer-side split of a delivered order into what they keep and what they donate."""
    home = Address(order.customer, AddressKind.CUSTOMER_HOME)
    return Manifest(order.self_items, home), order.noise_items


def pman_receive(state: PmanState, goods: Sequence[int]) -> PmanState:
    if not goods:
        raise ValueError("empty donation")
    state.inventory.update(int(g) for g in goods)
    return state


def pman_redistribute(state: PmanState, now: float) -> tuple[PmanState, list[tuple[Manifest, Address]]]:
    """Serve pending requests first-come first-served, each one whole or not at all.

    A request that cannot be filled yet stays queued without blocking the
    ones behind it.
    """
    deliveries = []
    still = deque()
    for req in state.pending_requests:
        need = Counter(req.items)
        if all(state.inventory[i] >= n for i, n in need.items()):
            state.inventory.subtract(need)
            state.inventory = +state.inventory
            home = Address(req.recipient, AddressKind.SECONDARY_HOME)
            deliveries.append((Manifest(req.items, home), home))
        else:
            still.append(req)
    state.pending_requests = still
    return state, deliveries


def pman_enqueue(state: PmanState, request: SecondaryRequest) -> PmanState:
    state.pending_requests.append(request)
    return state
