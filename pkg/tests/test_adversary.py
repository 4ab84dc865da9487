import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpnsim.adversary import (
    ADVERSARY,
    ForbiddenFact,
    HoldsAddressOf,
    Infeasible,
    InvalidParam,
    KnowledgeBook,
    ObservationEvent,
    Purchased,
    ReceivedGoods,
    Round,
    RunArtifacts,
    UnknownEntity,
    collude,
    correlation_attack,
    intersection_attack,
    movements,
    relay_posteriors,
    resolve_collusion_set,
    sniffing_dpn,
    trace_origins,
    uniqueness_reident,
    view_of,
)
from dpnsim.engine import Scenario, run_scenario
from dpnsim.model import Address, AddressKind, Arch, SizeClass, Topology
from dpnsim.protocols import Dist, Threshold

from conftest import NODE, brute_force_marginals, hand_run, relay_log

ZERO = Dist("constant", (0.0,))


def test_observation_line_round_trip():
    ev = ObservationEvent(1.25, Address(0, AddressKind.VENDOR_SITE), Address(3, AddressKind.DPN_SITE), 77, SizeClass.S2)
    line = ev.to_line()
    assert line == "1.25\tvendor_site:0\tdpn_site:3\t77\tS2"
    assert ObservationEvent.from_line(line) == ev


# --- correlation -----------------------------------------------------------

def test_lone_package_fully_linked():
    post = correlation_attack(relay_log([(1.0, 0)], [(1.0, 0)]), NODE, "exact")
    assert post.marginals == {200: {100: 1.0}}
    assert post.map_guess == {200: 100}


def test_batch_of_three_matches_oracle():
    ins, outs = [(1.0, 0), (2.0, 0), (3.0, 0)], [(3.0, 0)] * 3
    oracle, n = brute_force_marginals(ins, outs)
    assert n == 6
    for mode in ("exact", "candidate"):
        post = correlation_attack(relay_log(ins, outs), NODE, mode)
        for o, row in oracle.items():
            assert post.marginals[o] == pytest.approx(row, abs=1e-12)
    post = correlation_attack(relay_log(ins, outs), NODE, "exact")
    assert post.epochs[0].n_matchings == 6
    # MAP accuracy: the tie goes to the lowest inbound surface, right for exactly one of three
    assert sum(post.map_guess[200 + j] == 100 + j for j in range(3)) == 1


def test_size_leak():
    ins = [(1.0, 3), (2.0, 1), (3.0, 1)]
    outs = [(3.0, 3), (3.0, 1), (3.0, 1)]
    oracle, _ = brute_force_marginals(ins, outs, common=1)
    post = correlation_attack(relay_log(ins, outs), NODE, "exact", common_class=SizeClass.S1)
    assert oracle[200] == {100: 1.0}
    assert oracle[201] == {101: 0.5, 102: 0.5}
    for o, row in oracle.items():
        assert post.marginals[o] == pytest.approx(row, abs=1e-12)
    assert [len(post.candidates(o)) for o in (200, 201, 202)] == [1, 2, 2]


def test_flush_before_arrivals_is_infeasible():
    with pytest.raises(Infeasible):
        correlation_attack(relay_log([(5.0, 0)], [(1.0, 0)]), NODE)


def test_non_relay_rejected():
    with pytest.raises(InvalidParam):
        correlation_attack(relay_log([(1.0, 0)], [(1.0, 0)]), 10)
    with pytest.raises(InvalidParam):
        correlation_attack(relay_log([(1.0, 0)], [(1.0, 0)]), NODE, mode="bogus")


@st.composite
def relay_traffic(draw):
    """Random traffic through one relay: up to 6 boxes, some still held at the end."""
    common = draw(st.integers(0, 3))
    n = draw(st.integers(1, 6))
    arrive = sorted(draw(st.lists(st.integers(0, 8), min_size=n, max_size=n)))
    sizes = draw(st.lists(st.integers(0, 3), min_size=n, max_size=n))
    ins = [(float(t), s) for t, s in zip(arrive, sizes)]
    order = draw(st.permutations(range(n)))
    n_out = draw(st.integers(1, n))
    outs = []
    for i in order[:n_out]:
        wait = draw(st.integers(0, 4))
        outs.append((ins[i][0] + wait, max(ins[i][1], common)))
    outs.sort(key=lambda o: o[0])
    return ins, outs, common


@settings(max_examples=150, deadline=None)
@given(relay_traffic())
def test_oracle_equivalence(traffic):
    ins, outs, common = traffic
    oracle, total = brute_force_marginals(ins, outs, common)
    assert total > 0
    log = relay_log(ins, outs)
    for mode in ("exact", "candidate"):
        post = correlation_attack(log, NODE, mode, SizeClass(common))
        for o, row in oracle.items():
            got = {i: p for i, p in post.marginals[o].items() if p > 1e-15}
            assert got == pytest.approx(row, abs=1e-9)
            assert math.isclose(sum(post.marginals[o].values()), 1.0, abs_tol=1e-9)


@settings(max_examples=40, deadline=None)
@given(relay_traffic())
def test_posterior_columns_sum_to_at_most_one(traffic):
    ins, outs, common = traffic
    post = correlation_attack(relay_log(ins, outs), NODE, "candidate", SizeClass(common))
    col = {}
    for row in post.marginals.values():
        for i, p in row.items():
            col[i] = col.get(i, 0.0) + p
    assert all(v <= 1 + 1e-9 for v in col.values())


def test_two_hop_trace_chains_posteriors():
    r = hand_run([(0.0, 0, (1,)), (0.5, 1, (2,))], topology=Topology(Arch.DPDN, 2), dpn_sites=2,
                 mix=Threshold(1), latency=Dist("constant", (1.0,)), seed=3)
    moves = movements(r.observations)
    posts = relay_posteriors(r.observations, "exact", r.artifacts.common_class, moves)
    for sh in r.artifacts.truth.shipments:
        dist = trace_origins(sh.final_surface, moves, posts)
        assert dist == {sh.origin_surface: 1.0}


# --- views -----------------------------------------------------------------

def test_view_of_unknown_entity():
    r = hand_run([(0.0, 0, (1,))], mix=Threshold(1))
    with pytest.raises(UnknownEntity):
        view_of(999, r)


def test_adversary_view_is_the_log():
    r = hand_run([(0.0, 0, (1,))], mix=Threshold(1))
    assert len(view_of(ADVERSARY, r).facts) == len(r.observations)


def test_book_refuses_forbidden_fact():
    book = KnowledgeBook({0: AddressKind.VENDOR_SITE, 1: AddressKind.DPN_SITE})
    book.add(0, Purchased(5, (1,), 0))
    with pytest.raises(ForbiddenFact):
        book.add(1, Purchased(5, (1,), 0))
    with pytest.raises(ForbiddenFact):
        book.add(0, HoldsAddressOf(3, Address(3, AddressKind.CUSTOMER_HOME)))


def test_dpn_views_separated():
    r = run_scenario(Scenario(topology=Topology(Arch.DPN), customers=10, mix=Threshold(2), horizon=40.0, seed=5))
    vendor = view_of(r.directory.vendors[0], r)
    dpn = view_of(r.directory.dpns[0], r)
    assert vendor.of_type(Purchased)
    assert all(a.kind is not AddressKind.CUSTOMER_HOME for a in vendor.addresses())
    assert dpn.items() == []
    assert any(a.kind is AddressKind.CUSTOMER_HOME for a in dpn.addresses())


def test_pman_view_has_no_donor():
    r = run_scenario(Scenario(topology=Topology(Arch.DPN_PMAN), pman_sites=1, secondary_recipients=3, customers=10,
                              noise_budget=2, mix=Threshold(2), horizon=60.0, seed=2))
    pman = view_of(r.directory.pmans[0], r)
    got = pman.of_type(ReceivedGoods)
    assert got
    assert set(ReceivedGoods.__dataclass_fields__) == {"items", "time", "surface"}
    customer_homes = {Address(c, AddressKind.CUSTOMER_HOME) for c in r.directory.customers}
    assert not (pman.addresses() & customer_homes)


def test_views_survive_serialization():
    r = hand_run([(0.0, 0, (1, 2)), (1.0, 1, (3,))], mix=Threshold(2))
    arts = r.artifacts
    back = RunArtifacts.from_lines([e.to_line() for e in arts.observations], arts.view_lines(), arts.common_class)
    assert back.observations == arts.observations
    assert back.views == arts.views and back.sniffable == arts.sniffable
    assert back.truth.shipments == arts.truth.shipments and back.truth.pseudonyms == arts.truth.pseudonyms


# --- collusion -------------------------------------------------------------

def two_hop_run():
    return hand_run([(0.0, 0, (1,)), (2.0, 1, (4, 5))], topology=Topology(Arch.DPDN, 2), dpn_sites=2,
                    mix=Threshold(1), latency=Dist("constant", (1.0,)), seed=7)


def hop_entities(r, order):
    """Relays of ``order`` in route order, read from ground truth."""
    trail = r.unwrap_trails[order]
    return [e for i, e in enumerate(trail) if r.directory.kinds[e] is AddressKind.DPN_SITE
            and (i == 0 or trail[i - 1] != e)]


def test_two_hop_closure_by_hand():
    r = two_hop_run()
    vendor = view_of(r.directory.vendors[0], r)
    h1, h2 = hop_entities(r, 0)
    v1, v2 = view_of(h1, r), view_of(h2, r)
    truth = r.artifacts.truth
    c0 = r.directory.customers[0]
    # vendor knows items and first surface; h1 links that surface to the next; h2 links on to the home
    assert not collude([vendor], truth).link_exposed[c0]
    assert not collude([v1], truth).link_exposed[c0]
    assert not collude([v2], truth).link_exposed[c0]
    assert not collude([vendor, v2], truth).link_exposed[c0]
    assert not collude([vendor, v1], truth).link_exposed[c0]
    assert collude([vendor, v1, v2], truth).link_exposed[c0]


def test_vendor_dpn_collusion_exposes_everyone():
    r = run_scenario(Scenario(topology=Topology(Arch.DPN), customers=10, mix=Threshold(3), horizon=60.0, seed=1))
    res = collude(resolve_collusion_set("vendor+dpn", r), r.artifacts.truth)
    assert res.link_exposed and res.rate == 1.0


def test_sniffing_dpn_alone_exposes():
    r = run_scenario(Scenario(topology=Topology(Arch.DPN), customers=10, mix=Threshold(3), horizon=60.0, seed=1))
    node = r.directory.dpns[0]
    assert collude([sniffing_dpn(r, node)], r.artifacts.truth).rate == 1.0
    assert collude([view_of(node, r)], r.artifacts.truth).rate == 0.0


def test_sniffing_non_final_hop_learns_nothing():
    r = two_hop_run()
    h1, h2 = hop_entities(r, 0)
    home = Address(r.directory.customers[0], AddressKind.CUSTOMER_HOME)

    def peeked(node):
        return [f for f in sniffing_dpn(r, node).facts
                if f not in view_of(node, r).facts and f.manifest.final_recipient == home]

    assert peeked(h1) == []
    assert [f.manifest.items for f in peeked(h2)] == [(1,)]


def test_sniffing_requires_dpn():
    r = hand_run([(0.0, 0, (1,))], mix=Threshold(1))
    with pytest.raises(InvalidParam):
        sniffing_dpn(r, r.directory.vendors[0])


def test_sniffed_pman_manifest_is_combined():
    r = hand_run([(0.0, 0, (1, 2), (3,))], topology=Topology(Arch.DPN_PMAN), pman_sites=1, mix=Threshold(1))
    node = r.directory.dpns[0]
    extra = [f for f in sniffing_dpn(r, node).facts if f not in view_of(node, r).facts]
    manifests = [f.manifest.items for f in extra]
    assert (1, 2, 3) in manifests
    assert (1, 2) not in manifests


def test_collude_needs_a_view():
    with pytest.raises(InvalidParam):
        collude([], None)


def test_unknown_collusion_token():
    r = hand_run([(0.0, 0, (1,))], mix=Threshold(1))
    with pytest.raises(InvalidParam):
        resolve_collusion_set("vendor+bank", r)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32), st.sets(st.sampled_from(["vendor", "dpn:0", "dpn:1", "dpn:2", "adversary", "pman",
                                                        "customer:0", "sniffing-dpn:1"]), min_size=1),
       st.sampled_from(["vendor", "dpn:0", "dpn:1", "dpn:2", "adversary", "sniffing-dpn:2"]))
def test_collusion_monotone(seed, names, extra):
    r = run_scenario(Scenario(topology=Topology(Arch.DPDN, 2), dpn_sites=3, pman_sites=1, customers=6,
                              mix=Threshold(2), horizon=30.0, seed=seed, order_rate=0.3))
    if not r.artifacts.truth.delivered_customers():
        return
    base = [v for n in sorted(names) for v in resolve_collusion_set(n, r)]
    before = collude(base, r.artifacts.truth).link_exposed
    after = collude(base + resolve_collusion_set(extra, r), r.artifacts.truth).link_exposed
    assert all(after[c] for c, hit in before.items() if hit)


# --- intersection ------------------------------------------------------------

def test_lone_customer_unique_in_one_round():
    r = hand_run([(0.0, 0, (1,))], mix=Threshold(1))
    vendor = view_of(r.directory.vendors[0], r)
    pseudo = r.artifacts.truth.pseudonyms[r.directory.customers[0]]
    res = intersection_attack([Round(r.observations, vendor, r.artifacts.common_class)], pseudo)
    assert res.rounds_to_unique == 1


def test_twins_never_unique():
    rounds = []
    for t in range(4):
        r = hand_run([(float(t), 0, (1,)), (float(t), 1, (1,))], mix=Threshold(2), latency=ZERO, seed=0)
        rounds.append(Round(r.observations, view_of(r.directory.vendors[0], r), r.artifacts.common_class))
    pseudo = r.artifacts.truth.pseudonyms[r.directory.customers[0]]
    res = intersection_attack(rounds, pseudo)
    assert res.rounds_to_unique == math.inf
    assert res.cumulative[-1] == set(r.directory.customers[:2])


def test_target_absent_from_round():
    r = hand_run([(0.0, 1, (1,))], customers=2, mix=Threshold(1))
    with pytest.raises(InvalidParam):
        intersection_attack([Round(r.observations, view_of(r.directory.vendors[0], r), r.artifacts.common_class)], 12345)


def cobatched_rounds(seed, n_customers=8, batch=4, max_rounds=15):
    """Per round: the target (customer 0) plus batch-1 random others, one Threshold(batch) flush."""
    rng = np.random.default_rng(seed)
    rounds, groups = [], []
    for _ in range(max_rounds):
        others = rng.choice(np.arange(1, n_customers), size=batch - 1, replace=False)
        who = [0, *(int(o) for o in others)]
        spec = [(float(i), c, (1,)) for i, c in enumerate(rng.permutation(who))]
        r = hand_run(spec, customers=n_customers, mix=Threshold(batch), latency=ZERO, seed=0)
        rounds.append(Round(r.observations, view_of(r.directory.vendors[0], r), r.artifacts.common_class))
        groups.append({r.directory.customers[c] for c in who})
    return rounds, groups, r


def set_intersection_oracle(groups):
    acc = None
    for n, g in enumerate(groups, start=1):
        acc = set(g) if acc is None else acc & g
        if len(acc) == 1:
            return n
    return math.inf


def test_intersection_matches_set_oracle():
    attack, oracle = [], []
    for seed in range(200):
        rounds, groups, r = cobatched_rounds(seed)
        pseudo = r.artifacts.truth.pseudonyms[r.directory.customers[0]]
        got = intersection_attack(rounds, pseudo).rounds_to_unique
        attack.append(got)
        oracle.append(set_intersection_oracle(groups))
    assert attack == oracle
    assert np.median(attack) == np.median(oracle)


# --- re-identification --------------------------------------------------------

HAND = [{"a", "b", "c"}, {"a", "b", "d"}, {"a", "c", "d"}, {"e", "f"}]


def enumerate_reident(traces, p):
    """Direct count: each (target, p-subset of its points) weighed equally per target."""
    fracs = []
    for t, tr in enumerate(traces):
        combos = list(itertools.combinations(sorted(tr), p))
        hits = sum(sum(set(c) <= other for other in traces) == 1 for c in combos)
        fracs.append(hits / len(combos))
    return sum(fracs) / len(fracs)


def test_reident_hand_traces():
    assert enumerate_reident(HAND, 2) == 0.5
    assert uniqueness_reident(HAND, 2) == 0.5
    assert uniqueness_reident(HAND, 1) == enumerate_reident(HAND, 1) == 0.25


def test_reident_p_too_long():
    with pytest.raises(InvalidParam):
        uniqueness_reident(HAND, 3)
    with pytest.raises(InvalidParam):
        uniqueness_reident(HAND, 0)


def test_reident_trivial_cases():
    assert uniqueness_reident([{1, 2}], 1) == 1.0
    assert uniqueness_reident([{1, 2}, {1, 2}], 2) == 0.0


def test_reident_sampled_approaches_exhaustive():
    got = uniqueness_reident(HAND[:3], 2, trials=20000, rng=np.random.default_rng(0))
    assert abs(got - enumerate_reident(HAND[:3], 2)) < 0.02


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sets(st.integers(0, 12), min_size=3, max_size=6), min_size=1, max_size=8))
def test_reident_monotone_and_matches_enumeration(traces):
    prev = -1.0
    for p in (1, 2, 3):
        got = uniqueness_reident(traces, p)
        assert got == pytest.approx(enumerate_reident(traces, p), abs=1e-12)
        assert got >= prev - 1e-12
        prev = got
