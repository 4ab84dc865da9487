"""Threat model: what each party learns, and what a global passive observer can infer.

Knowledge is a set of ground facts per entity. Collusion joins facts that
share an order id, a surface id or a vendor pseudonym. The passive observer
only ever sees :class:`ObservationEvent` records, two per physical movement:
one when the package leaves its source and one when it reaches its
destination.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .model import Address, AddressKind, Manifest, SizeClass, as_items

ADVERSARY = "adversary"


class UnknownEntity(KeyError):
    pass


class Infeasible(RuntimeError):
    """No assignment of outbound to inbound packages fits the observations."""


class InvalidParam(ValueError):
    pass


class ForbiddenFact(RuntimeError):
    """A knowledge rule was violated while recording a view."""


def _items_str(items: Iterable[int]) -> str:
    items = tuple(items)
    return ",".join(str(i) for i in items) if items else "-"


def _items_parse(text: str) -> tuple[int, ...]:
    return () if text == "-" else as_items(int(x) for x in text.split(","))


@dataclass(frozen=True, order=True)
class ObservationEvent:
    time: float
    src: Address
    dst: Address
    surface: int
    size: SizeClass

    def to_line(self) -> str:
        return f"{self.time!r}\t{self.src}\t{self.dst}\t{self.surface}\t{self.size}"

    @classmethod
    def from_line(cls, line: str) -> "ObservationEvent":
        t, src, dst, sid, size = line.rstrip("\n").split("\t")
        return cls(float(t), Address.parse(src), Address.parse(dst), int(sid), SizeClass[size])


# --- facts ---------------------------------------------------------------

@dataclass(frozen=True)
class Purchased:
    pseudonym: int
    items: tuple[int, ...]
    order: int

    def keys(self):
        return {("order", self.order), ("pseudonym", self.pseudonym)}

    def fields(self):
        return [str(self.pseudonym), _items_str(self.items), str(self.order)]

    @classmethod
    def parse(cls, f):
        return cls(int(f[0]), _items_parse(f[1]), int(f[2]))


@dataclass(frozen=True)
class ShippedTo:
    order: int
    address: Address
    surface: int

    def keys(self):
        return {("order", self.order), ("surface", self.surface)}

    def fields(self):
        return [str(self.order), str(self.address), str(self.surface)]

    @classmethod
    def parse(cls, f):
        return cls(int(f[0]), Address.parse(f[1]), int(f[2]))


@dataclass(frozen=True)
class HoldsAddressOf:
    customer: int
    address: Address

    def keys(self):
        return set()

    def fields(self):
        return [str(self.customer), str(self.address)]

    @classmethod
    def parse(cls, f):
        return cls(int(f[0]), Address.parse(f[1]))


@dataclass(frozen=True)
class ReceivedGoods:
    items: tuple[int, ...]
    time: float
    surface: int

    def keys(self):
        return {("surface", self.surface)}

    def fields(self):
        return [_items_str(self.items), repr(self.time), str(self.surface)]

    @classmethod
    def parse(cls, f):
        return cls(_items_parse(f[0]), float(f[1]), int(f[2]))


@dataclass(frozen=True)
class RequestedGoods:
    recipient: int
    items: tuple[int, ...]

    def keys(self):
        return set()

    def fields(self):
        return [str(self.recipient), _items_str(self.items)]

    @classmethod
    def parse(cls, f):
        return cls(int(f[0]), _items_parse(f[1]))


@dataclass(frozen=True)
class ObservedMove:
    event: ObservationEvent

    def keys(self):
        return {("surface", self.event.surface)}

    def fields(self):
        return self.event.to_line().split("\t")

    @classmethod
    def parse(cls, f):
        return cls(ObservationEvent.from_line("\t".join(f)))


@dataclass(frozen=True)
class Relayed:
    """A relay knows which outgoing box it made from which incoming one."""

    node: int
    inbound: int
    outbound: int

    def keys(self):
        return {("surface", self.inbound), ("surface", self.outbound)}

    def fields(self):
        return [str(self.node), str(self.inbound), str(self.outbound)]

    @classmethod
    def parse(cls, f):
        return cls(int(f[0]), int(f[1]), int(f[2]))


@dataclass(frozen=True)
class Sniffed:
    """Contents seen by a relay that opens a box it was not meant to open."""

    surface: int
    manifest: Manifest

    def keys(self):
        return {("surface", self.surface)}

    def fields(self):
        return [str(self.surface), _items_str(self.manifest.items), str(self.manifest.final_recipient)]

    @classmethod
    def parse(cls, f):
        return cls(int(f[0]), Manifest(_items_parse(f[1]), Address.parse(f[2])))


FACT_TYPES = {c.__name__: c for c in (Purchased, ShippedTo, HoldsAddressOf, ReceivedGoods,
                                      RequestedGoods, ObservedMove, Relayed, Sniffed)}
Fact = object

ROLE_RULES: dict[AddressKind, frozenset] = {
    AddressKind.VENDOR_SITE: frozenset({Purchased, ShippedTo, ObservedMove}),
    AddressKind.DPN_SITE: frozenset({HoldsAddressOf, ObservedMove, Relayed}),
    AddressKind.PMAN_SITE: frozenset({ReceivedGoods, RequestedGoods, ObservedMove}),
    AddressKind.CUSTOMER_HOME: frozenset({Purchased, HoldsAddressOf, ObservedMove}),
    AddressKind.SECONDARY_HOME: frozenset({RequestedGoods, ReceivedGoods, ObservedMove}),
}


def fact_line(owner, fact) -> str:
    return "\t".join([str(owner), type(fact).__name__, *fact.fields()])


def parse_fact_line(line: str):
    parts = line.rstrip("\n").split("\t")
    owner, tag, rest = parts[0], parts[1], parts[2:]
    return owner, FACT_TYPES[tag].parse(rest)


def _fact_sort_key(fact):
    return (type(fact).__name__, fact.fields())


@dataclass(frozen=True)
class KnowledgeView:
    owner: Hashable
    facts: frozenset

    def of_type(self, *types) -> list:
        return sorted((f for f in self.facts if isinstance(f, types)), key=_fact_sort_key)

    def addresses(self) -> set[Address]:
        """Every address named anywhere in the view."""
        out = set()
        for f in self.facts:
            if isinstance(f, ObservedMove):
                out |= {f.event.src, f.event.dst}
            elif isinstance(f, (ShippedTo, HoldsAddressOf)):
                out.add(f.address)
            elif isinstance(f, Sniffed):
                out.add(f.manifest.final_recipient)
        return out

    def items(self) -> list[int]:
        out = []
        for f in self.facts:
            if isinstance(f, (Purchased, ReceivedGoods, RequestedGoods)):
                out.extend(f.items)
            elif isinstance(f, Sniffed):
                out.extend(f.manifest.items)
        return out

    def __or__(self, other: "KnowledgeView") -> "KnowledgeView":
        owners = tuple(sorted({*_owners(self.owner), *_owners(other.owner)}, key=str))
        return KnowledgeView(owners, self.facts | other.facts)


def _owners(o):
    return o if isinstance(o, tuple) else (o,)


class KnowledgeBook:
    """Per-entity fact sets, filled in by the engine as entities take part in events."""

    def __init__(self, kinds: Mapping[int, AddressKind]):
        self.kinds = kinds
        self.facts: dict[int, set] = defaultdict(set)

    def add(self, owner: int, fact) -> None:
        allowed = ROLE_RULES[self.kinds[owner]]
        if type(fact) not in allowed:
            raise ForbiddenFact(f"{self.kinds[owner].value} {owner} may not learn {type(fact).__name__}")
        self.facts[owner].add(fact)


# --- run artifacts -------------------------------------------------------

@dataclass(frozen=True)
class Shipment:
    """Ground truth for one order: first and last surface it travelled under."""

    order: int
    customer: int
    origin_surface: int
    final_surface: int | None = None


@dataclass
class Truth:
    entities: dict[int, AddressKind]
    pseudonyms: dict[int, int]
    shipments: list[Shipment] = field(default_factory=list)

    def home(self, customer: int) -> Address:
        return Address(customer, AddressKind.CUSTOMER_HOME)

    def delivered_customers(self) -> list[int]:
        return sorted({s.customer for s in self.shipments if s.final_surface is not None})

    def lines(self) -> list[str]:
        out = [f"truth\tEntity\t{e}\t{k.value}" for e, k in sorted(self.entities.items())]
        out += [f"truth\tPseudonym\t{c}\t{p}" for c, p in sorted(self.pseudonyms.items())]
        out += [
            f"truth\tShipment\t{s.order}\t{s.customer}\t{s.origin_surface}\t"
            f"{'-' if s.final_surface is None else s.final_surface}"
            for s in self.shipments
        ]
        return out


@dataclass
class RunArtifacts:
    """Everything the attacks consume; also what a results bundle persists."""

    observations: list[ObservationEvent]
    views: dict[int, set]
    sniffable: dict[int, set]
    truth: Truth
    common_class: SizeClass = SizeClass.S0

    def view_lines(self) -> list[str]:
        lines = []
        for owner in sorted(self.views):
            lines += [fact_line(owner, f) for f in sorted(self.views[owner], key=_fact_sort_key)]
        for owner in sorted(self.sniffable):
            lines += [fact_line(f"sniff@{owner}", f) for f in sorted(self.sniffable[owner], key=_fact_sort_key)]
        return lines + self.truth.lines()

    @classmethod
    def from_lines(cls, observation_lines: Iterable[str], view_lines: Iterable[str],
                   common_class: SizeClass = SizeClass.S0) -> "RunArtifacts":
        obs = [ObservationEvent.from_line(ln) for ln in observation_lines if ln.strip()]
        views: dict[int, set] = defaultdict(set)
        sniff: dict[int, set] = defaultdict(set)
        truth = Truth({}, {})
        for ln in view_lines:
            if not ln.strip():
                continue
            parts = ln.rstrip("\n").split("\t")
            if parts[0] == "truth":
                tag, f = parts[1], parts[2:]
                if tag == "Entity":
                    truth.entities[int(f[0])] = AddressKind(f[1])
                elif tag == "Pseudonym":
                    truth.pseudonyms[int(f[0])] = int(f[1])
                elif tag == "Shipment":
                    final = None if f[3] == "-" else int(f[3])
                    truth.shipments.append(Shipment(int(f[0]), int(f[1]), int(f[2]), final))
                continue
            owner, fact = parse_fact_line(ln)
            if owner.startswith("sniff@"):
                sniff[int(owner[6:])].add(fact)
            else:
                views[int(owner)].add(fact)
        return cls(obs, dict(views), dict(sniff), truth, common_class)


def _arts(run) -> RunArtifacts:
    return getattr(run, "artifacts", run)


def view_of(entity, run) -> KnowledgeView:
    """Legitimate knowledge of ``entity`` (or of the global observer, ``ADVERSARY``)."""
    arts = _arts(run)
    if entity == ADVERSARY:
        return KnowledgeView(ADVERSARY, frozenset(ObservedMove(e) for e in arts.observations))
    if entity not in arts.truth.entities:
        raise UnknownEntity(entity)
    return KnowledgeView(entity, frozenset(arts.views.get(entity, ())))


def sniffing_dpn(run, node: int) -> KnowledgeView:
    """View of a DPN that also peeks inside every box in its custody.

    Peeking removes one more layer than the DPN is entitled to; it only
    yields contents when that layer holds the goods themselves.
    """
    arts = _arts(run)
    if arts.truth.entities.get(node) is not AddressKind.DPN_SITE:
        raise InvalidParam(f"entity {node} is not a DPN")
    base = view_of(node, arts)
    return KnowledgeView(node, base.facts | frozenset(arts.sniffable.get(node, ())))


# --- collusion -----------------------------------------------------------

@dataclass
class Collusion:
    view: KnowledgeView
    components: list[frozenset]
    link_exposed: dict[int, bool]

    @property
    def rate(self) -> float | None:
        if not self.link_exposed:
            return None
        return sum(self.link_exposed.values()) / len(self.link_exposed)


def _components(facts: Sequence) -> list[frozenset]:
    parent = list(range(len(facts)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    first_with: dict = {}
    for i, f in enumerate(facts):
        for k in f.keys():
            j = first_with.setdefault(k, i)
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[ri] = rj
    groups = defaultdict(set)
    for i, f in enumerate(facts):
        groups[find(i)].add(f)
    return [frozenset(g) for _, g in sorted(groups.items())]


def _reveals_items_of(fact, pseudonym: int | None, home: Address) -> bool:
    if isinstance(fact, Purchased):
        return pseudonym is not None and fact.pseudonym == pseudonym
    if isinstance(fact, Sniffed):
        return fact.manifest.final_recipient == home
    return False


def _reveals_address(fact, home: Address) -> bool:
    if isinstance(fact, (ShippedTo, HoldsAddressOf)):
        return fact.address == home
    if isinstance(fact, ObservedMove):
        return home in (fact.event.src, fact.event.dst)
    if isinstance(fact, Sniffed):
        return fact.manifest.final_recipient == home
    return False


def collude(views: Iterable[KnowledgeView], truth: Truth, customers: Iterable[int] | None = None) -> Collusion:
    """Pool ``views`` and join facts on shared identifiers.

    A customer's link is exposed when one joined component holds both what
    they bought and where they live.
    """
    views = list(views)
    if not views:
        raise InvalidParam("collusion needs at least one view")
    merged = views[0]
    for v in views[1:]:
        merged = merged | v
    facts = sorted(merged.facts, key=_fact_sort_key)
    comps = _components(facts)
    if customers is None:
        customers = truth.delivered_customers()
    exposed = {}
    for c in customers:
        pseudo, home = truth.pseudonyms.get(c), truth.home(c)
        exposed[c] = any(
            any(_reveals_items_of(f, pseudo, home) for f in comp) and any(_reveals_address(f, home) for f in comp)
            for comp in comps
        )
    return Collusion(merged, comps, exposed)


def resolve_collusion_set(spec: str, run) -> list[KnowledgeView]:
    """Views named by a ``+``-joined spec such as ``vendor+dpn`` or ``sniffing-dpn``.

    Tokens: vendor, dpn, pman, customer, secondary, adversary, sniffing-dpn,
    or ``<role>:<index>`` for a single entity of that role.
    """
    arts = _arts(run)
    roles = {
        "vendor": AddressKind.VENDOR_SITE, "dpn": AddressKind.DPN_SITE, "pman": AddressKind.PMAN_SITE,
        "customer": AddressKind.CUSTOMER_HOME, "secondary": AddressKind.SECONDARY_HOME,
    }
    views = []
    for token in spec.split("+"):
        token = token.strip()
        if token == ADVERSARY:
            views.append(view_of(ADVERSARY, arts))
            continue
        sniff = token == "sniffing-dpn" or token.startswith("sniffing-dpn:")
        role, _, idx = token.replace("sniffing-dpn", "dpn").partition(":")
        if role not in roles:
            raise InvalidParam(f"unknown collusion token {token!r}")
        members = sorted(e for e, k in arts.truth.entities.items() if k is roles[role])
        if idx:
            members = [members[int(idx)]]
        for e in members:
            views.append(sniffing_dpn(arts, e) if sniff else view_of(e, arts))
    return views


# --- observation log analysis --------------------------------------------

@dataclass(frozen=True)
class Movement:
    surface: int
    src: Address
    dst: Address
    size: SizeClass
    depart: float
    arrive: float | None
    seq: int  # position of the departure record in the log


def movements(log: Sequence[ObservationEvent]) -> dict[int, Movement]:
    """Pair each surface's departure record with its arrival record."""
    out: dict[int, Movement] = {}
    for seq, ev in enumerate(log):
        m = out.get(ev.surface)
        if m is None:
            out[ev.surface] = Movement(ev.surface, ev.src, ev.dst, ev.size, ev.time, None, seq)
        elif m.arrive is None and (m.src, m.dst) == (ev.src, ev.dst):
            out[ev.surface] = Movement(m.surface, m.src, m.dst, m.size, m.depart, ev.time, m.seq)
        else:
            raise Infeasible(f"surface {ev.surface} observed on more than one movement")
    return out


@dataclass
class Epoch:
    """A group of inbound/outbound packages that can only be matched among themselves."""

    node: int
    size: SizeClass
    time: float
    inbound: tuple[int, ...]
    outbound: tuple[int, ...]
    marginals: dict[int, dict[int, float]]
    n_matchings: int | None = None


@dataclass
class NodePosterior:
    node: int
    mode: str
    epochs: list[Epoch]
    marginals: dict[int, dict[int, float]]
    map_guess: dict[int, int]

    def candidates(self, outbound: int) -> dict[int, float]:
        return {i: p for i, p in self.marginals[outbound].items() if p > 0}


def _blocks(ins: list[Movement], outs: list[Movement]):
    """Split one size class's traffic at instants where everything that came in has gone out."""
    events = [(m.arrive, 0, m.seq, m) for m in ins] + [(m.depart, 1, m.seq, m) for m in outs]
    events.sort(key=lambda e: e[:3])
    blocks, cur_in, cur_out = [], [], []
    for _, kind, _, m in events:
        if kind == 0:
            cur_in.append(m)
            continue
        if len(cur_in) <= len(cur_out):
            raise Infeasible(f"package {m.surface} leaves node {m.src} before enough packages arrived")
        cur_out.append(m)
        if len(cur_in) == len(cur_out):
            blocks.append((cur_in, cur_out))
            cur_in, cur_out = [], []
    if cur_in:
        blocks.append((cur_in, cur_out))
    return blocks


def _closed_form(ins: list[Movement], outs: list[Movement]) -> dict[int, dict[int, float]]:
    # Feasible inbound sets are nested prefixes (by arrival time), so picking
    # uniformly among still-unmatched feasible inbound packages, one outbound
    # at a time in departure order, is uniform over all consistent matchings.
    free = {m.surface: 1.0 for m in ins}
    marg: dict[int, dict[int, float]] = {}
    for j, o in enumerate(outs):
        prefix = [m.surface for m in ins if m.arrive <= o.depart]
        avail = len(prefix) - j
        if avail <= 0:
            raise Infeasible(f"no inbound package left for {o.surface}")
        row = {}
        for s in prefix:
            p = free[s] / avail
            row[s] = p
            free[s] -= p
        marg[o.surface] = row
    return marg


def _enumerate(ins: list[Movement], outs: list[Movement]) -> tuple[dict[int, dict[int, float]], int]:
    feas = [[i for i, m in enumerate(ins) if m.arrive <= o.depart] for o in outs]
    counts = np.zeros((len(outs), len(ins)), dtype=np.int64)
    total = 0
    used = [False] * len(ins)
    pick = [0] * len(outs)

    def rec(j):
        nonlocal total
        if j == len(outs):
            total += 1
            for jj, ii in enumerate(pick):
                counts[jj, ii] += 1
            return
        for i in feas[j]:
            if not used[i]:
                used[i] = True
                pick[j] = i
                rec(j + 1)
                used[i] = False

    rec(0)
    if total == 0:
        raise Infeasible("no consistent matching")
    marg = {
        o.surface: {ins[i].surface: counts[j, i] / total for i in feas[j]}
        for j, o in enumerate(outs)
    }
    return marg, total


def _map_guess(marginals: dict[int, dict[int, float]]) -> dict[int, int]:
    guess = {}
    for out, row in marginals.items():
        if not row:
            continue
        best = max(row.values())
        guess[out] = min(s for s, p in row.items() if p >= best - 1e-12)
    return guess


ENUMERATION_LIMIT = 200_000


def correlation_attack(log, node: int, mode: str = "candidate", common_class: SizeClass = SizeClass.S0,
                       moves: Mapping[int, Movement] | None = None) -> NodePosterior:
    """Posterior over which inbound package each outbound package of ``node`` came from.

    Every consistent matching (an outbound box leaves no earlier than its
    inbound box arrived, and its size is the inbound size raised to the
    node's ``common_class``) is equally likely. ``mode="exact"`` enumerates
    the matchings of each epoch; ``mode="candidate"`` gets the same marginals
    in closed form and is the one to use on large batches. Epochs too big to
    enumerate fall back to the closed form and report ``n_matchings=None``.
    """
    if mode not in ("exact", "candidate"):
        raise InvalidParam(f"unknown correlation mode {mode!r}")
    moves = movements(log) if moves is None else moves
    ins, outs = [], []
    for m in moves.values():
        if m.dst.entity == node and m.arrive is not None:
            ins.append(m)
            kind = m.dst.kind
        if m.src.entity == node:
            outs.append(m)
            kind = m.src.kind
    if (ins or outs) and kind is not AddressKind.DPN_SITE:
        raise InvalidParam(f"entity {node} is not an intermediary")
    common = SizeClass(common_class)
    by_class_in, by_class_out = defaultdict(list), defaultdict(list)
    for m in ins:
        by_class_in[max(m.size, common)].append(m)
    for m in outs:
        by_class_out[m.size].append(m)
    epochs, marginals = [], {}
    for size in sorted(set(by_class_in) | set(by_class_out)):
        for b_in, b_out in _blocks(by_class_in[size], by_class_out[size]):
            if not b_out:
                continue
            b_in = sorted(b_in, key=lambda m: (m.arrive, m.seq))
            b_out = sorted(b_out, key=lambda m: (m.depart, m.seq))
            n = None
            if mode == "exact" and math.perm(len(b_in), len(b_out)) <= ENUMERATION_LIMIT:
                marg, n = _enumerate(b_in, b_out)
            else:
                marg = _closed_form(b_in, b_out)
            epochs.append(Epoch(node, SizeClass(size), b_out[0].depart, tuple(m.surface for m in b_in),
                                tuple(m.surface for m in b_out), marg, n))
            marginals.update(marg)
    epochs.sort(key=lambda e: (e.time, e.size))
    return NodePosterior(node, mode, epochs, marginals, _map_guess(marginals))


def relay_posteriors(log, mode: str = "candidate", common_class: SizeClass = SizeClass.S0,
                     moves: Mapping[int, Movement] | None = None) -> dict[int, NodePosterior]:
    moves = movements(log) if moves is None else moves
    relays = sorted({a.entity for m in moves.values() for a in (m.src, m.dst) if a.kind is AddressKind.DPN_SITE})
    return {n: correlation_attack(log, n, mode, common_class, moves) for n in relays}


def trace_origins(surface: int, moves: Mapping[int, Movement], posteriors: Mapping[int, NodePosterior],
                  _memo: dict | None = None) -> dict[int, float]:
    """Distribution over the first-leg surface a package observed as ``surface`` started out as.

    Relay posteriors are chained hop by hop, treating hops as independent.
    """
    memo = {} if _memo is None else _memo
    if surface in memo:
        return memo[surface]
    m = moves[surface]
    if m.src.kind is not AddressKind.DPN_SITE:
        dist = {surface: 1.0}
    else:
        dist = defaultdict(float)
        for inb, p in posteriors[m.src.entity].marginals[surface].items():
            if p <= 0:
                continue
            for origin, q in trace_origins(inb, moves, posteriors, memo).items():
                dist[origin] += p * q
        dist = dict(dist)
    memo[surface] = dist
    return dist


# --- intersection --------------------------------------------------------

@dataclass
class Round:
    """One observation period: the log plus what the vendor knows about who ordered."""

    log: Sequence[ObservationEvent]
    vendor_view: KnowledgeView
    common_class: SizeClass = SizeClass.S0


@dataclass
class IntersectionResult:
    per_round: list[set]
    cumulative: list[set]
    rounds_to_unique: float  # math.inf when never unique


def _forward_homes(origins: Iterable[int], moves, posteriors) -> set[int]:
    fwd = defaultdict(set)
    for post in posteriors.values():
        for out, row in post.marginals.items():
            for inb, p in row.items():
                if p > 0:
                    fwd[inb].add(out)
    homes, stack, seen = set(), list(origins), set()
    while stack:
        s = stack.pop()
        if s in seen or s not in moves:
            continue
        seen.add(s)
        m = moves[s]
        if m.dst.kind is AddressKind.CUSTOMER_HOME and m.arrive is not None:
            homes.add(m.dst.entity)
        elif m.dst.kind is AddressKind.DPN_SITE:
            stack.extend(fwd[s])
    return homes


def intersection_attack(rounds: Sequence[Round], target: int, mode: str = "candidate") -> IntersectionResult:
    """Intersect, round after round, the homes the target's parcels could have reached.

    ``target`` is the vendor-side pseudonym; the vendor's view supplies the
    surface ids of that pseudonym's shipments.
    """
    per_round, cumulative = [], []
    acc = None
    rounds_to_unique = math.inf
    for r, rnd in enumerate(rounds, start=1):
        orders = {f.order for f in rnd.vendor_view.of_type(Purchased) if f.pseudonym == target}
        if not orders:
            raise InvalidParam(f"target {target} placed no order in round {r}")
        origins = [f.surface for f in rnd.vendor_view.of_type(ShippedTo) if f.order in orders]
        moves = movements(rnd.log)
        posts = relay_posteriors(rnd.log, mode, rnd.common_class, moves)
        cand = _forward_homes(origins, moves, posts)
        per_round.append(cand)
        acc = set(cand) if acc is None else acc & cand
        cumulative.append(set(acc))
        if len(acc) == 1 and rounds_to_unique == math.inf:
            rounds_to_unique = r
    return IntersectionResult(per_round, cumulative, rounds_to_unique)


# --- re-identification ---------------------------------------------------

def uniqueness_reident(traces: Sequence[Iterable[Hashable]], p: int, trials: int | None = None,
                       rng: np.random.Generator | None = None, targets: Sequence[int] | None = None) -> float:
    """Fraction of attempts in which ``p`` known points single out one trace.

    A target trace is picked uniformly, ``p`` of its points are picked
    uniformly, and the attempt succeeds when no other trace contains all of
    them. ``trials=None`` averages over every target and every ``p``-subset
    instead of sampling.
    """
    if p < 1:
        raise InvalidParam("p must be >= 1")
    sets = [frozenset(t) for t in traces]
    if not sets:
        raise InvalidParam("no traces")
    targets = list(range(len(sets))) if targets is None else list(targets)
    index: dict = defaultdict(set)
    for i, s in enumerate(sets):
        for pt in s:
            index[pt].add(i)

    def unique(points) -> bool:
        holders = sorted((index[pt] for pt in points), key=len)
        acc = holders[0]
        for h in holders[1:]:
            if len(acc) <= 1:
                break
            acc = acc & h
        return len(acc) == 1

    if trials is None:
        total = 0.0
        for t in targets:
            pts = sorted(sets[t], key=repr)
            if len(pts) < p:
                raise InvalidParam(f"p={p} exceeds trace {t} length {len(pts)}")
            combos = list(itertools.combinations(pts, p))
            total += sum(unique(c) for c in combos) / len(combos)
        return total / len(targets)
    if rng is None:
        raise InvalidParam("sampled re-identification needs an rng")
    hits = 0
    for _ in range(trials):
        t = targets[int(rng.integers(len(targets)))]
        pts = sorted(sets[t], key=repr)
        if len(pts) < p:
            raise InvalidParam(f"p={p} exceeds trace {t} length {len(pts)}")
        pick = rng.choice(len(pts), size=p, replace=False)
        hits += unique([pts[i] for i in pick])
    return hits / trials if trials else 0.0
