"""Synthetic catalogs, customer profiles, order streams and aid requests."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import Address, AddressKind, Arch, Order, Topology


class InvalidParam(ValueError):
    pass


@dataclass(frozen=True)
class Catalog:
    items: tuple[int, ...]
    zipf_s: float
    weights: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.items)

    def sample(self, rng: np.random.Generator, size: int, replace: bool = True) -> list[int]:
        idx = rng.choice(len(self.items), size=size, replace=replace, p=np.asarray(self.weights))
        return [self.items[i] for i in np.atleast_1d(idx)]


@dataclass(frozen=True)
class CustomerProfile:
    customer: int
    home: Address
    items: tuple[int, ...]
    propensity: tuple[float, ...]
    order_rate: float
    noise_budget: int = 0

    def __post_init__(self):
        if self.order_rate <= 0:
            raise InvalidParam("order_rate must be positive")
        if self.noise_budget < 0:
            raise InvalidParam("noise_budget must be >= 0")


@dataclass(frozen=True)
class SecondaryRequest:
    recipient: int
    items: tuple[int, ...]
    requested_at: float

    def __post_init__(self):
        if not self.items:
            raise InvalidParam("a request must name at least one item")
        object.__setattr__(self, "items", tuple(sorted(self.items)))


def zipf_weights(n: int, s: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=float)
    w = ranks ** (-float(s))
    return w / w.sum()


def gen_catalog(n: int, s: float, rng: np.random.Generator | None = None) -> Catalog:
    """Catalog of ``n`` items with Zipf(s) popularity by rank.

    Item ids are ranks (0 is the most popular). ``rng`` is accepted for
    signature symmetry with the other generators; the catalog itself is
    deterministic.
    """
    if n < 1:
        raise InvalidParam("catalog needs at least one item")
    if not np.isfinite(s) or s < 0:
        raise InvalidParam("zipf exponent must be finite and >= 0")
    w = zipf_weights(n, s)
    return Catalog(items=tuple(range(n)), zipf_s=float(s), weights=tuple(float(x) for x in w))


def gen_customers(
    n: int,
    catalog: Catalog,
    k: int,
    rng: np.random.Generator,
    *,
    order_rate: float = 1.0,
    noise_budget: int = 0,
    customer_ids: Sequence[int] | None = None,
) -> list[CustomerProfile]:
    """Profiles whose support is ``k`` distinct items drawn by popularity."""
    if not 1 <= k <= len(catalog):
        raise InvalidParam(f"sparsity k={k} outside 1..{len(catalog)}")
    ids = list(customer_ids) if customer_ids is not None else list(range(n))
    if len(ids) != n:
        raise InvalidParam("customer_ids length does not match n")
    w = np.asarray(catalog.weights)
    profiles = []
    for cid in ids:
        idx = rng.choice(len(catalog), size=k, replace=False, p=w)
        idx = np.sort(idx)
        prop = w[idx] / w[idx].sum()
        profiles.append(
            CustomerProfile(
                customer=cid,
                home=Address(cid, AddressKind.CUSTOMER_HOME),
                items=tuple(catalog.items[i] for i in idx),
                propensity=tuple(float(p) for p in prop),
                order_rate=order_rate,
                noise_budget=noise_budget,
            )
        )
    return profiles


def _poisson_epochs(rate: float, horizon: float, rng: np.random.Generator) -> list[float]:
    times = []
    t = 0.0
    while True:
        t += rng.exponential(1.0 / rate)
        if t >= horizon:
            return times
        times.append(float(t))


def gen_orders(
    profiles: Sequence[CustomerProfile],
    horizon: float,
    topology: Topology,
    rng: np.random.Generator,
    *,
    catalog: Catalog | None = None,
    vendors: Sequence[int] = (0,),
    basket_size: int = 1,
    noise_mode: str = "uniform",
) -> list[Order]:
    """Poisson order stream per customer, merged and numbered in time order.

    Each basket holds 1..basket_size self items drawn from the customer's
    propensity. In the mutual-aid topology 0..noise_budget
    extra items are added, drawn uniformly from the catalog by default or
    from the customer's own propensity with ``noise_mode="profile"``.
    """
    with_noise = topology.arch is Arch.DPN_PMAN
    if horizon < 0:
        raise InvalidParam("horizon must be >= 0")
    if with_noise and noise_mode == "uniform" and catalog is None:
        raise InvalidParam("uniform noise needs the catalog")
    if noise_mode not in ("uniform", "profile"):
        raise InvalidParam(f"unknown noise_mode {noise_mode!r}")
    raw = []
    for prof in profiles:
        for t in _poisson_epochs(prof.order_rate, horizon, rng):
            n_self = int(rng.integers(1, basket_size + 1))
            picks = rng.choice(len(prof.items), size=n_self, p=np.asarray(prof.propensity))
            self_items = tuple(prof.items[i] for i in picks)
            noise: tuple[int, ...] = ()
            if with_noise and prof.noise_budget > 0:
                n_noise = int(rng.integers(0, prof.noise_budget + 1))
                if n_noise:
                    if noise_mode == "uniform":
                        noise = tuple(int(x) for x in rng.choice(catalog.items, size=n_noise))
                    else:
                        noise = tuple(prof.items[i] for i in rng.choice(len(prof.items), size=n_noise, p=np.asarray(prof.propensity)))
            vendor = int(vendors[int(rng.integers(len(vendors)))])
            raw.append((t, prof.customer, vendor, self_items, noise))
    raw.sort(key=lambda r: (r[0], r[1]))
    return [
        Order(id=i, customer=c, vendor=v, self_items=s, noise_items=n, placed_at=t)
        for i, (t, c, v, s, n) in enumerate(raw)
    ]


def gen_secondary_requests(
    recipients: Sequence[int] | int,
    catalog: Catalog,
    rate: float,
    horizon: float,
    rng: np.random.Generator,
    *,
    request_size: int = 1,
) -> list[SecondaryRequest]:
    """Poisson request stream per recipient; items follow catalog popularity."""
    if isinstance(recipients, int):
        recipients = range(recipients)
    if rate <= 0 and len(recipients):
        raise InvalidParam("request rate must be positive")
    reqs = []
    for r in recipients:
        for t in _poisson_epochs(rate, horizon, rng):
            size = int(rng.integers(1, request_size + 1))
            reqs.append(SecondaryRequest(recipient=int(r), items=tuple(catalog.sample(rng, size)), requested_at=t))
    reqs.sort(key=lambda q: (q.requested_at, q.recipient))
    return reqs
