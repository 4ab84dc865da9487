import itertools
from collections import defaultdict

import pytest

from dpnsim.adversary import ObservationEvent
from dpnsim.engine import Scenario, run_scenario
from dpnsim.model import Address, AddressKind, Order, SizeClass
from dpnsim.protocols import Directory

NODE = 1
VENDOR = Address(0, AddressKind.VENDOR_SITE)
RELAY = Address(NODE, AddressKind.DPN_SITE)


def relay_log(inbound, outbound, latency=0.0):
    """Observation log around one relay.

    ``inbound`` is a list of (arrival time, size) with surfaces 100, 101, ...;
    ``outbound`` a list of (departure time, size) with surfaces 200, 201, ...
    Each outbound goes to its own customer home (entity 10 + index).
    """
    recs = []
    for i, (t, size) in enumerate(inbound):
        s = 100 + i
        recs.append(ObservationEvent(t - latency, VENDOR, RELAY, s, SizeClass(size)))
        recs.append(ObservationEvent(t, VENDOR, RELAY, s, SizeClass(size)))
    for j, (t, size) in enumerate(outbound):
        s = 200 + j
        home = Address(10 + j, AddressKind.CUSTOMER_HOME)
        recs.append(ObservationEvent(t, RELAY, home, s, SizeClass(size)))
        recs.append(ObservationEvent(t + latency, RELAY, home, s, SizeClass(size)))
    recs.sort(key=lambda e: e.time)  # stable: departure record precedes its arrival
    return recs


def brute_force_marginals(inbound, outbound, common=0):
    """Uniform weight over every injective outbound->inbound map that fits.

    Independent oracle: plain permutation enumeration, no epoch splitting.
    Returns (marginals keyed by surfaces, number of matchings).
    """
    counts = defaultdict(lambda: defaultdict(int))
    total = 0
    for perm in itertools.permutations(range(len(inbound)), len(outbound)):
        ok = all(
            inbound[i][0] <= outbound[j][0] and max(inbound[i][1], common) == outbound[j][1]
            for j, i in enumerate(perm)
        )
        if ok:
            total += 1
            for j, i in enumerate(perm):
                counts[200 + j][100 + i] += 1
    return {o: {i: c / total for i, c in row.items()} for o, row in counts.items()}, total


def hand_orders(directory, spec):
    """Orders from (time, customer index, items) tuples, vendor = first vendor."""
    vendor = directory.vendors[0]
    return [
        Order(id=n, customer=directory.customers[c], vendor=vendor, self_items=tuple(items),
              noise_items=tuple(noise) if noise else (), placed_at=t)
        for n, (t, c, items, *rest) in enumerate(spec)
        for noise in [rest[0] if rest else ()]
    ]


def hand_run(orders_spec, **kw):
    """Run with an explicit order list; counts default to what the spec needs."""
    kw.setdefault("customers", max(c for _, c, *_ in orders_spec) + 1)
    s = Scenario(**kw)
    d = Directory.build(customers=s.customers, vendors=s.vendors, dpn_sites=s.dpn_sites,
                        pman_sites=s.pman_sites, secondary_recipients=s.secondary_recipients)
    s.orders = hand_orders(d, orders_spec)
    return run_scenario(s)


@pytest.fixture
def directory():
    return Directory.build(customers=4, vendors=1, dpn_sites=3, pman_sites=1, secondary_recipients=2)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        status, title = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {title}")
