"""Privacy and efficiency figures for runs and sweeps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .adversary import (
    NodePosterior,
    collude,
    movements,
    relay_posteriors,
    resolve_collusion_set,
    trace_origins,
    uniqueness_reident,
)
from .engine import AttackConfig, RunResult
from .rng import substream

SUPPORT_EPS = 1e-12


class UnknownTarget(KeyError):
    pass


def _dist(posterior, target) -> dict:
    table = posterior.marginals if isinstance(posterior, NodePosterior) else posterior
    try:
        return table[target]
    except KeyError:
        raise UnknownTarget(target) from None


def anonymity_set_size(posterior, target) -> int:
    return sum(1 for p in _dist(posterior, target).values() if p > SUPPORT_EPS)


def linkage_entropy(posterior, target) -> float:
    """Shannon entropy, in bits, of the target's candidate distribution."""
    h = 0.0
    for p in _dist(posterior, target).values():
        if p > SUPPORT_EPS:
            h -= p * math.log2(p)
    return max(h, 0.0)


def map_guess(dist: Mapping[int, float]) -> int:
    best = max(dist.values())
    return min(k for k, p in dist.items() if p >= best - SUPPORT_EPS)


@dataclass
class PrivacyReport:
    n_targets: int = 0
    anon_set_mean: float | None = None
    anon_set_min: int | None = None
    entropy_mean: float | None = None
    map_accuracy: float | None = None
    reident_fraction: float | None = None
    link_exposed: dict[str, float | None] = field(default_factory=dict)


@dataclass
class EfficiencyReport:
    n_delivered: int = 0
    n_truncated: int = 0
    latency_mean: float | None = None
    latency_p50: float | None = None
    latency_p95: float | None = None
    cost_mean: float | None = None
    hops_mean: float | None = None
    donated_items: int = 0
    redistributed_items: int = 0
    residual_inventory: int = 0


@dataclass
class OrderLinkage:
    order: int
    customer: int
    anonymity_set: int
    entropy_bits: float
    map_correct: bool


def order_linkage(arts, mode: str = "candidate") -> list[OrderLinkage]:
    """End-to-end linkage of every delivered order back to its vendor shipment."""
    moves = movements(arts.observations)
    posts = relay_posteriors(arts.observations, mode, arts.common_class, moves)
    memo: dict = {}
    out = []
    for sh in arts.truth.shipments:
        if sh.final_surface is None:
            continue
        dist = trace_origins(sh.final_surface, moves, posts, memo)
        table = {sh.final_surface: dist}
        out.append(OrderLinkage(
            sh.order, sh.customer,
            anonymity_set_size(table, sh.final_surface),
            linkage_entropy(table, sh.final_surface),
            map_guess(dist) == sh.origin_surface,
        ))
    return out


def purchase_traces(run: RunResult, time_bin: float) -> dict[int, set]:
    """What the vendor side holds per pseudonym: (item, time bin) points."""
    traces: dict[int, set] = {}
    pseudo = run.artifacts.truth.pseudonyms
    for o in run.orders:
        pts = traces.setdefault(pseudo[o.customer], set())
        b = int(o.placed_at // time_bin)
        pts.update((i, b) for i in o.all_items)
    return traces


def _mean(xs):
    return float(np.mean(xs)) if len(xs) else None


def collusion_rates(arts, sets: Sequence[str]) -> dict[str, float | None]:
    return {spec: collude(resolve_collusion_set(spec, arts), arts.truth).rate for spec in sets}


def summarize(run: RunResult, attacks: AttackConfig | None = None) -> tuple[PrivacyReport, EfficiencyReport]:
    """Aggregate attack outcomes and delivery records of one run.

    Orders still in flight at the horizon are left out of every statistic
    and counted in ``n_truncated``.
    """
    attacks = attacks or run.scenario.attacks
    arts = run.artifacts
    links = order_linkage(arts, attacks.correlation_mode)
    priv = PrivacyReport(n_targets=len(links))
    if links:
        sizes = [lk.anonymity_set for lk in links]
        priv.anon_set_mean = _mean(sizes)
        priv.anon_set_min = int(min(sizes))
        priv.entropy_mean = _mean([lk.entropy_bits for lk in links])
        priv.map_accuracy = _mean([float(lk.map_correct) for lk in links])
    traces = purchase_traces(run, attacks.time_bin)
    if traces:
        keys = sorted(traces)
        trace_list = [traces[k] for k in keys]
        targets = [i for i, t in enumerate(trace_list) if len(t) >= attacks.reident_p]
        if targets:
            if attacks.reident_trials:
                rng = substream(run.scenario.seed, "reident")
                priv.reident_fraction = uniqueness_reident(trace_list, attacks.reident_p, attacks.reident_trials, rng, targets)
            else:
                priv.reident_fraction = uniqueness_reident(trace_list, attacks.reident_p, targets=targets)
    priv.link_exposed = collusion_rates(arts, attacks.collusion_sets)

    recs = list(run.records.values())
    done = [r for r in recs if r.delivered_at is not None]
    eff = EfficiencyReport(n_delivered=len(done), n_truncated=len(recs) - len(done))
    if done:
        lat = np.array([r.latency for r in done])
        eff.latency_mean = float(lat.mean())
        eff.latency_p50 = float(np.percentile(lat, 50))
        eff.latency_p95 = float(np.percentile(lat, 95))
        eff.cost_mean = _mean([r.cost for r in done])
        eff.hops_mean = _mean([r.hops for r in done])
    eff.donated_items = run.donated_items
    eff.redistributed_items = run.redistributed_items
    eff.residual_inventory = sum(sum(c.values()) for c in run.pman_inventory.values())
    return priv, eff


COLUMNS = [
    "n_orders", "n_delivered", "n_truncated",
    "anon_set_mean", "anon_set_min", "entropy_mean", "map_accuracy", "reident_fraction",
    "latency_mean", "latency_p50", "latency_p95", "cost_mean", "hops_mean",
    "donated_items", "redistributed_items", "residual_inventory", "link_exposed",
]


def fmt(v: Any) -> str:
    if v is None:
        return "NA"
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def report_row(priv: PrivacyReport, eff: EfficiencyReport) -> dict[str, str]:
    row = {
        "n_orders": eff.n_delivered + eff.n_truncated,
        "n_delivered": eff.n_delivered,
        "n_truncated": eff.n_truncated,
        "anon_set_mean": priv.anon_set_mean,
        "anon_set_min": priv.anon_set_min,
        "entropy_mean": priv.entropy_mean,
        "map_accuracy": priv.map_accuracy,
        "reident_fraction": priv.reident_fraction,
        "latency_mean": eff.latency_mean,
        "latency_p50": eff.latency_p50,
        "latency_p95": eff.latency_p95,
        "cost_mean": eff.cost_mean,
        "hops_mean": eff.hops_mean,
        "donated_items": eff.donated_items,
        "redistributed_items": eff.redistributed_items,
        "residual_inventory": eff.residual_inventory,
        "link_exposed": ";".join(f"{k}={fmt(v)}" for k, v in priv.link_exposed.items()),
    }
    return {k: fmt(v) for k, v in row.items()}


def frontier(sweep: Sequence[tuple[float, PrivacyReport, EfficiencyReport]]) -> list[tuple[float, PrivacyReport, EfficiencyReport]]:
    """Sweep points ordered by knob value, one row each."""
    if len(sweep) < 2:
        raise ValueError("a frontier needs at least two sweep points")
    return sorted(sweep, key=lambda r: r[0])
