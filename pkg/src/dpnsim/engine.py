"""Discrete-event core: event queue, run orchestration, cost and latency accrual."""

from __future__ import annotations

import hashlib
import heapq
import itertools
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Sequence

from .adversary import (
    HoldsAddressOf,
    KnowledgeBook,
    ObservationEvent,
    ObservedMove,
    Purchased,
    ReceivedGoods,
    Relayed,
    RequestedGoods,
    RunArtifacts,
    Shipment,
    ShippedTo,
    Sniffed,
    Truth,
)
from .model import (
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
    unwrap_package,
)
from .protocols import (
    Directory,
    Dist,
    MixNodeState,
    MixPolicy,
    PmanState,
    Threshold,
    TimedDelay,
    build_onion,
    mix_on_arrival,
    mix_on_timer,
    plan_route,
    pman_enqueue,
    pman_receive,
    pman_redistribute,
    pman_split,
)
from .rng import Streams
from .workload import SecondaryRequest, gen_catalog, gen_customers, gen_orders, gen_secondary_requests


class TimeTravel(ValueError):
    pass


class ConfigError(ValueError):
    """Invalid scenario; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class InvariantViolation(RuntimeError):
    pass


class EventKind(Enum):
    ORDER_PLACED = "OrderPlaced"
    PACKAGE_DEPARTED = "PackageDeparted"
    PACKAGE_ARRIVED = "PackageArrived"
    MIX_TIMER = "MixTimer"
    PMAN_CYCLE = "PmanCycle"
    RUN_END = "RunEnd"


@dataclass(order=True)
class Event:
    time: float
    seq: int
    kind: EventKind = field(compare=False)
    payload: Any = field(default=None, compare=False)


class EventQueue:
    """Min-heap on (time, seq); equal times leave in insertion order."""

    def __init__(self):
        self._heap: list[Event] = []
        self._seq = itertools.count()
        self.clock = 0.0

    def __len__(self) -> int:
        return len(self._heap)

    def push(self, time: float, kind: EventKind, payload=None) -> Event:
        return schedule(self, Event(time, next(self._seq), kind, payload))

    def pop(self) -> Event:
        ev = heapq.heappop(self._heap)
        self.clock = ev.time
        return ev


def schedule(queue: EventQueue, event: Event) -> Event:
    if event.time < queue.clock:
        raise TimeTravel(f"event at {event.time} scheduled with clock at {queue.clock}")
    heapq.heappush(queue._heap, event)
    return event


@dataclass(frozen=True)
class CostModel:
    per_hop: float = 1.0
    per_rewrap: float = 0.0


@dataclass(frozen=True)
class AttackConfig:
    correlation_mode: str = "candidate"
    collusion_sets: tuple[str, ...] = ()
    reident_p: int = 2
    reident_trials: int = 0  # 0 means exhaustive
    time_bin: float = 1.0


@dataclass
class Scenario:
    topology: Topology = field(default_factory=lambda: Topology(Arch.DPN))
    customers: int = 10
    vendors: int = 1
    dpn_sites: int = 1
    pman_sites: int = 0
    secondary_recipients: int = 0
    catalog_n: int = 50
    zipf_s: float = 1.0
    sparsity_k: int = 5
    order_rate: float = 0.1
    noise_budget: int = 0
    basket_size: int = 1
    noise_mode: str = "uniform"
    mix: MixPolicy = field(default_factory=lambda: Threshold(1))
    common_class: SizeClass = SizeClass.S2
    latency: Dist = field(default_factory=lambda: Dist("constant", (1.0,)))
    cost: CostModel = field(default_factory=CostModel)
    request_rate: float = 0.1
    request_size: int = 1
    donation_via_dpn: bool = True
    attacks: AttackConfig = field(default_factory=AttackConfig)
    horizon: float = 100.0
    seed: int = 0
    orders: Sequence[Order] | None = None
    requests: Sequence[SecondaryRequest] | None = None

    def validate(self) -> None:
        def need(cond, path, msg):
            if not cond:
                raise ConfigError(path, msg)

        need(self.horizon > 0, "horizon", "must be > 0")
        need(0 <= self.seed < 2**64, "seed", "must be a 64-bit unsigned integer")
        need(self.customers >= 1, "counts.customers", "must be >= 1")
        need(self.vendors >= 1, "counts.vendors", "must be >= 1")
        for name in ("dpn_sites", "pman_sites", "secondary_recipients"):
            need(getattr(self, name) >= 0, f"counts.{name}", "must be >= 0")
        arch = self.topology.arch
        if arch in (Arch.DPN, Arch.DPN_PMAN):
            need(self.dpn_sites >= 1, "counts.dpn_sites", f"{arch.value} needs a DPN site")
        if arch is Arch.DPDN:
            need(self.topology.k >= 1, "topology.k", "must be >= 1")
            need(self.dpn_sites >= self.topology.k, "counts.dpn_sites", f"DPDN({self.topology.k}) needs that many DPN sites")
        if arch is Arch.DPN_PMAN:
            need(self.pman_sites >= 1, "counts.pman_sites", "dpn_pman needs a PMAN site")
        need(self.catalog_n >= 1, "catalog.n", "must be >= 1")
        need(self.zipf_s >= 0, "catalog.zipf_s", "must be >= 0")
        need(1 <= self.sparsity_k <= self.catalog_n, "profile.sparsity_k", "must be in 1..catalog.n")
        need(self.order_rate > 0, "profile.order_rate", "must be > 0")
        need(self.noise_budget >= 0, "profile.noise_budget", "must be >= 0")
        need(self.basket_size >= 1, "profile.basket_size", "must be >= 1")
        need(self.noise_mode in ("uniform", "profile"), "profile.noise_mode", "must be uniform or profile")
        need(self.cost.per_hop >= 0, "cost.per_hop", "must be >= 0")
        need(self.cost.per_rewrap >= 0, "cost.per_rewrap", "must be >= 0")
        need(self.request_rate > 0, "pman.request_rate", "must be > 0")
        need(self.request_size >= 1, "pman.request_size", "must be >= 1")
        need(self.attacks.correlation_mode in ("exact", "candidate"), "attacks.correlation_mode", "must be exact or candidate")
        need(self.attacks.reident_p >= 1, "attacks.reident.p", "must be >= 1")
        need(self.attacks.reident_trials >= 0, "attacks.reident.trials", "must be >= 0")
        need(self.attacks.time_bin > 0, "attacks.reident.time_bin", "must be > 0")


@dataclass
class DeliveryRecord:
    order: int
    customer: int
    placed_at: float
    delivered_at: float | None = None
    hops: int = 0
    rewraps: int = 0
    cost: float = 0.0

    @property
    def latency(self) -> float | None:
        return None if self.delivered_at is None else self.delivered_at - self.placed_at


def accrue(record: DeliveryRecord, what: str, cost: CostModel) -> DeliveryRecord:
    """Charge one traversed edge (``"hop"``) or one rewrap (``"rewrap"``)."""
    if what == "hop":
        record.hops += 1
        record.cost += cost.per_hop
    elif what == "rewrap":
        record.rewraps += 1
        record.cost += cost.per_rewrap
    else:
        raise ValueError(f"cannot accrue {what!r}")
    return record


@dataclass
class RunResult:
    scenario: Scenario
    directory: Directory
    orders: list[Order]
    records: dict[int, DeliveryRecord]
    artifacts: RunArtifacts
    truncated: bool
    in_flight_items: int
    in_flight_packages: int
    held_at_end: dict[int, int]
    shipped_items: int
    items_at_homes: Counter
    items_at_secondary: Counter
    donated_items: int
    redistributed_items: int
    pman_inventory: dict[int, Counter]
    unwrap_trails: dict[int, list[int]]
    relays: list[tuple[int, int, int]]
    event_times: list[float]

    @property
    def observations(self) -> list[ObservationEvent]:
        return self.artifacts.observations

    def serialize(self) -> bytes:
        lines = [f"orders\t{len(self.orders)}", f"truncated\t{self.truncated}", f"in_flight_items\t{self.in_flight_items}"]
        for oid in sorted(self.records):
            r = self.records[oid]
            lines.append(f"record\t{oid}\t{r.customer}\t{r.placed_at!r}\t{r.delivered_at!r}\t{r.hops}\t{r.rewraps}\t{r.cost!r}")
        lines += [e.to_line() for e in self.artifacts.observations]
        lines += self.artifacts.view_lines()
        lines.append(f"homes\t{sorted(self.items_at_homes.items())}")
        lines.append(f"secondary\t{sorted(self.items_at_secondary.items())}")
        lines.append(f"pman\t{sorted((k, sorted(v.items())) for k, v in self.pman_inventory.items())}")
        return ("\n".join(lines) + "\n").encode()

    def digest(self) -> str:
        return hashlib.sha256(self.serialize()).hexdigest()


@dataclass
class _Transit:
    package: Package
    src: Address
    tag: tuple  # ("order", id) | ("donation", id) | ("aid", n)


class _Run:
    def __init__(self, s: Scenario):
        s.validate()
        self.s = s
        self.streams = Streams(s.seed)
        self.dir = Directory.build(customers=s.customers, vendors=s.vendors, dpn_sites=s.dpn_sites,
                                   pman_sites=s.pman_sites, secondary_recipients=s.secondary_recipients)
        self.mint = SurfaceMint(self.streams["surfaces"])
        self.q = EventQueue()
        self.book = KnowledgeBook(self.dir.kinds)
        self.sniffable: dict[int, set] = {}
        self.log: list[ObservationEvent] = []
        self.records: dict[int, DeliveryRecord] = {}
        self.shipments: dict[int, Shipment] = {}
        self.tags: dict[int, tuple] = {}  # live package surface -> tag
        self.live: dict[int, Package] = {}
        self.donation_routes = {}
        self.orders_by_id: dict[int, Order] = {}
        self.items_at_homes: Counter = Counter()
        self.items_at_secondary: Counter = Counter()
        self.shipped_items = 0
        self.donated_items = 0
        self.redistributed_items = 0
        self.unwrap_trails: dict[int, list[int]] = {}
        self.relays: list[tuple[int, int, int]] = []
        self.event_times: list[float] = []
        self.aid_counter = itertools.count()
        self.mixes = {d: MixNodeState(d, s.mix, SizeClass(s.common_class)) for d in self.dir.dpns}
        self.pmans = {p: PmanState(p) for p in self.dir.pmans}
        pseudo_rng = self.streams["pseudonyms"]
        ids = set()
        self.pseudonyms = {}
        for c in self.dir.customers:
            p = int(pseudo_rng.integers(1, 2**31))
            while p in ids:
                p = int(pseudo_rng.integers(1, 2**31))
            ids.add(p)
            self.pseudonyms[c] = p

    # --- workload ---

    def workload(self):
        s = self.s
        catalog = gen_catalog(s.catalog_n, s.zipf_s)
        if s.orders is not None:
            orders = sorted(s.orders, key=lambda o: (o.placed_at, o.id))
        else:
            profiles = gen_customers(len(self.dir.customers), catalog, s.sparsity_k, self.streams["workload.customers"],
                                     order_rate=s.order_rate, noise_budget=s.noise_budget,
                                     customer_ids=self.dir.customers)
            orders = gen_orders(profiles, s.horizon, s.topology, self.streams["workload.orders"], catalog=catalog,
                                vendors=self.dir.vendors, basket_size=s.basket_size, noise_mode=s.noise_mode)
        requests: list[SecondaryRequest] = []
        if s.topology.arch is Arch.DPN_PMAN:
            if s.requests is not None:
                requests = list(s.requests)
            else:
                requests = gen_secondary_requests(self.dir.secondaries, catalog, s.request_rate, s.horizon,
                                                  self.streams["workload.requests"], request_size=s.request_size)
        return orders, requests

    # --- helpers ---

    def observe(self, time, src: Address, pkg: Package) -> ObservationEvent:
        ev = ObservationEvent(time, src, pkg.visible_dest, pkg.surface, pkg.size)
        self.log.append(ev)
        return ev

    def ship(self, pkg: Package, src: Address, tag: tuple, at: float):
        self.live[pkg.surface] = pkg
        self.tags[pkg.surface] = tag
        self.q.push(at, EventKind.PACKAGE_DEPARTED, _Transit(pkg, src, tag))

    def _record(self, tag) -> DeliveryRecord | None:
        return self.records.get(tag[1]) if tag[0] == "order" else None

    def _trail(self, tag, entity):
        if tag[0] == "order":
            self.unwrap_trails.setdefault(tag[1], []).append(entity)

    def _open_all(self, pkg: Package, by: int, tag) -> Manifest:
        inner = pkg
        while isinstance(inner, Package):
            _, inner = unwrap_package(inner, by)
            self._trail(tag, by)
        return inner

    # --- handlers ---

    def on_order(self, order: Order, now: float):
        s = self.s
        self.orders_by_id[order.id] = order
        pseudo = self.pseudonyms[order.customer]
        self.book.add(order.customer, Purchased(pseudo, order.all_items, order.id))
        self.book.add(order.customer, HoldsAddressOf(order.customer, self.dir.address(order.customer)))
        self.book.add(order.vendor, Purchased(pseudo, order.all_items, order.id))
        route = plan_route(order, s.topology, self.dir, self.streams["hops"], via_dpn=s.donation_via_dpn)
        if route.donation is not None:
            self.donation_routes[order.id] = route.donation
        manifest = Manifest(order.all_items, self.dir.address(order.customer))
        pkg = build_onion(route, manifest, self.mint)
        self.book.add(order.vendor, ShippedTo(order.id, route.hops[1], pkg.surface))
        self.records[order.id] = DeliveryRecord(order.id, order.customer, now)
        self.shipments[order.id] = Shipment(order.id, order.customer, pkg.surface)
        self.shipped_items += len(order.all_items)
        self.ship(pkg, route.hops[0], ("order", order.id), now)

    def on_departed(self, tr: _Transit, now: float):
        ev = self.observe(now, tr.src, tr.package)
        self.book.add(tr.src.entity, ObservedMove(ev))
        rec = self._record(tr.tag)
        if rec is not None:
            accrue(rec, "hop", self.s.cost)
        delay = self.s.latency.sample(self.streams["latency"])
        self.q.push(now + delay, EventKind.PACKAGE_ARRIVED, tr)

    def on_arrived(self, tr: _Transit, now: float):
        pkg = tr.package
        ev = self.observe(now, tr.src, pkg)
        dest = pkg.visible_dest
        self.book.add(dest.entity, ObservedMove(ev))
        del self.live[pkg.surface]
        tag = self.tags.pop(pkg.surface)
        if dest.kind is AddressKind.DPN_SITE:
            self.at_relay(dest, pkg, tag, now)
        elif dest.kind is AddressKind.CUSTOMER_HOME:
            self.at_home(dest, pkg, tag, now)
        elif dest.kind is AddressKind.PMAN_SITE:
            self.at_pman(dest, pkg, tag, now)
        elif dest.kind is AddressKind.SECONDARY_HOME:
            manifest = self._open_all(pkg, dest.entity, tag)
            self.book.add(dest.entity, ReceivedGoods(manifest.items, now, pkg.surface))
            self.items_at_secondary.update(manifest.items)
        else:
            raise InvariantViolation(f"package {pkg.surface} delivered to {dest}")

    def at_relay(self, site: Address, pkg: Package, tag, now: float):
        node = site.entity
        inner_layers = pkg.layers()
        # what a sniffing relay would see: one layer past its own
        for layer in inner_layers:
            if layer.opener != node:
                if isinstance(layer.interior, Manifest):
                    self.sniffable.setdefault(node, set()).add(Sniffed(pkg.surface, layer.interior))
                break
        state = self.mixes[node]
        _, flushed = mix_on_arrival(state, pkg, now, self.streams["mixing"], self.mint)
        self._trail(tag, node)
        held = next((h for h in state.held if h.inbound == pkg.surface), None)
        rewrapped = held.package if held else next(f.package for f in flushed if f.inbound == pkg.surface)
        self.book.add(node, Relayed(node, pkg.surface, rewrapped.surface))
        nxt = rewrapped.visible_dest
        if nxt.kind is AddressKind.CUSTOMER_HOME:
            self.book.add(node, HoldsAddressOf(nxt.entity, nxt))
        self.relays.append((node, pkg.surface, rewrapped.surface))
        self.live[rewrapped.surface] = rewrapped
        self.tags[rewrapped.surface] = tag
        rec = self._record(tag)
        if rec is not None:
            accrue(rec, "rewrap", self.s.cost)
        if isinstance(state.policy, TimedDelay):
            self.q.push(held.depart_at, EventKind.MIX_TIMER, node)
        self.dispatch(site, flushed)

    def dispatch(self, site: Address, flushed):
        for f in flushed:
            tag = self.tags[f.package.surface]
            del self.live[f.package.surface]
            self.ship(f.package, site, tag, f.depart)

    def at_home(self, home: Address, pkg: Package, tag, now: float):
        manifest = self._open_all(pkg, home.entity, tag)
        if tag[0] != "order":
            raise InvariantViolation(f"non-order package {pkg.surface} reached a customer home")
        oid = tag[1]
        self.records[oid].delivered_at = now
        self.shipments[oid] = replace(self.shipments[oid], final_surface=pkg.surface)
        order = self.orders_by_id[oid]
        if self.s.topology.arch is Arch.DPN_PMAN and order.noise_items:
            keep, donation = pman_split(order)
            self.items_at_homes.update(keep.items)
            route = self.donation_routes[oid]
            dpkg = build_onion(route, Manifest(donation, route.hops[-1]), self.mint)
            self.ship(dpkg, home, ("donation", oid), now)
        else:
            self.items_at_homes.update(manifest.items)

    def at_pman(self, site: Address, pkg: Package, tag, now: float):
        manifest = self._open_all(pkg, site.entity, tag)
        state = self.pmans[site.entity]
        pman_receive(state, manifest.items)
        self.donated_items += len(manifest.items)
        self.book.add(site.entity, ReceivedGoods(manifest.items, now, pkg.surface))
        self.redistribute(state, now)

    def on_request(self, req: SecondaryRequest, now: float):
        pman = self.dir.pman_of_recipient[req.recipient]
        state = self.pmans[pman]
        pman_enqueue(state, req)
        self.book.add(pman, RequestedGoods(req.recipient, req.items))
        self.book.add(req.recipient, RequestedGoods(req.recipient, req.items))
        self.redistribute(state, now)

    def redistribute(self, state: PmanState, now: float):
        _, deliveries = pman_redistribute(state, now)
        site = self.dir.address(state.node)
        for manifest, home in deliveries:
            pkg = build_onion_direct(site, home, manifest, self.mint)
            self.redistributed_items += len(manifest.items)
            self.ship(pkg, site, ("aid", next(self.aid_counter)), now)

    # --- loop ---

    def run(self) -> RunResult:
        s = self.s
        orders, requests = self.workload()
        for o in orders:
            if o.placed_at < s.horizon:
                self.q.push(o.placed_at, EventKind.ORDER_PLACED, o)
        for r in requests:
            if r.requested_at < s.horizon:
                self.q.push(r.requested_at, EventKind.PMAN_CYCLE, r)
        self.q.push(s.horizon, EventKind.RUN_END)
        while self.q:
            ev = self.q.pop()
            self.event_times.append(ev.time)
            k = ev.kind
            if k is EventKind.RUN_END:
                break
            if k is EventKind.ORDER_PLACED:
                self.on_order(ev.payload, ev.time)
            elif k is EventKind.PACKAGE_DEPARTED:
                self.on_departed(ev.payload, ev.time)
            elif k is EventKind.PACKAGE_ARRIVED:
                self.on_arrived(ev.payload, ev.time)
            elif k is EventKind.MIX_TIMER:
                state = self.mixes[ev.payload]
                _, flushed = mix_on_timer(state, ev.time)
                self.dispatch(self.dir.address(ev.payload), flushed)
            elif k is EventKind.PMAN_CYCLE:
                self.on_request(ev.payload, ev.time)
        return self.result()

    def result(self) -> RunResult:
        in_flight = sum(len(p.manifest().items) for p in self.live.values())
        truth = Truth(dict(self.dir.kinds), dict(self.pseudonyms),
                      [self.shipments[o] for o in sorted(self.shipments)])
        arts = RunArtifacts(self.log, {k: set(v) for k, v in self.book.facts.items()},
                            {k: set(v) for k, v in self.sniffable.items()}, truth, SizeClass(self.s.common_class))
        return RunResult(
            scenario=self.s, directory=self.dir,
            orders=[self.orders_by_id[o] for o in sorted(self.orders_by_id)],
            records=self.records, artifacts=arts,
            truncated=bool(self.live), in_flight_items=in_flight, in_flight_packages=len(self.live),
            held_at_end={n: len(m.held) for n, m in self.mixes.items()},
            shipped_items=self.shipped_items, items_at_homes=self.items_at_homes,
            items_at_secondary=self.items_at_secondary, donated_items=self.donated_items,
            redistributed_items=self.redistributed_items,
            pman_inventory={p: +st.inventory for p, st in self.pmans.items()},
            unwrap_trails=self.unwrap_trails, relays=self.relays, event_times=self.event_times,
        )


def build_onion_direct(src: Address, dest: Address, manifest: Manifest, mint: SurfaceMint) -> Package:
    return build_onion(RouteSpec((src, dest)), manifest, mint)


def run_scenario(s: Scenario) -> RunResult:
    """Simulate ``s`` from its seed. Same scenario, same result, byte for byte."""
    return _Run(s).run()
