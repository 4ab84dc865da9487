"""Scenario files: strict YAML documents mapped onto :class:`Scenario`."""

from __future__ import annotations

import copy
import os
from pathlib import Path
from typing import Any

import yaml

from .engine import AttackConfig, ConfigError, CostModel, Scenario
from .model import Arch, SizeClass, Topology
from .protocols import Dist, Pool, Threshold, TimedDelay


class ParseError(ConfigError):
    pass


class ValidationError(ConfigError):
    pass


class UnknownKnob(ConfigError):
    pass


DEFAULTS: dict[str, Any] = {
    "topology": {"kind": "dpn", "k": 1},
    "counts": {"customers": 20, "vendors": 1, "dpn_sites": 1, "pman_sites": 1, "secondary_recipients": 5},
    "catalog": {"n": 50, "zipf_s": 1.0},
    "profile": {"sparsity_k": 5, "order_rate": 0.2, "noise_budget": 0, "basket_size": 2, "noise_mode": "uniform"},
    "mix": {"kind": "threshold", "X": 3, "delay_dist": "exponential", "delay_params": [1.0],
            "pool_min": 2, "flush_prob": 0.5, "common_class": "S2"},
    "latency": {"dist": "constant", "params": [1.0]},
    "cost": {"per_hop": 1.0, "per_rewrap": 0.5},
    "pman": {"request_rate": 0.1, "request_size": 1, "donation_route": "via_dpn"},
    "horizon": 100.0,
    "seed": 0,
    "attacks": {
        "correlation_mode": "candidate",
        "collusion_sets": ["vendor+dpn", "adversary", "dpn", "sniffing-dpn"],
        "reident": {"p": 2, "trials": 0, "time_bin": 10.0},
    },
}

MIX_KEYS = {
    "threshold": {"kind", "X", "common_class"},
    "timed": {"kind", "delay_dist", "delay_params", "common_class"},
    "pool": {"kind", "pool_min", "flush_prob", "common_class"},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ParseError(where, f"unknown key {key!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ParseError(where, "expected a mapping")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def resolve(raw: dict | None) -> dict:
    """Defaults overlaid with ``raw``; unknown keys are a ParseError."""
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ParseError("<root>", "scenario must be a mapping")
    cfg = _merge(DEFAULTS, raw)
    kind = cfg["mix"]["kind"]
    if kind not in MIX_KEYS:
        raise ValidationError("mix.kind", f"unknown mix kind {kind!r}")
    for key in raw.get("mix", {}):
        if key not in MIX_KEYS[kind]:
            raise ParseError(f"mix.{key}", f"not used by {kind} mixing")
    return cfg


def _num(cfg, path, kind=float):
    node = cfg
    for part in path.split("."):
        node = node[part]
    if isinstance(node, bool) or not isinstance(node, (int, float)):
        raise ValidationError(path, f"expected a number, got {node!r}")
    if kind is int:
        if float(node) != int(node):
            raise ValidationError(path, f"expected an integer, got {node!r}")
        return int(node)
    return float(node)


def _dist(cfg, path, kind_key, params_key) -> Dist:
    sec = cfg
    for part in path.split("."):
        sec = sec[part]
    try:
        return Dist(str(sec[kind_key]), tuple(sec[params_key]))
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{path}.{kind_key}", str(exc)) from None


def build_scenario(cfg: dict) -> Scenario:
    topo_kind = cfg["topology"]["kind"]
    try:
        arch = Arch(topo_kind)
    except ValueError:
        raise ValidationError("topology.kind", f"unknown topology {topo_kind!r}") from None
    k = _num(cfg, "topology.k", int)
    if arch is Arch.DPDN and k < 1:
        raise ValidationError("topology.k", "must be >= 1")
    mix = cfg["mix"]
    try:
        common = SizeClass[str(mix["common_class"])]
    except KeyError:
        raise ValidationError("mix.common_class", "must be one of S0..S3") from None
    kind = mix["kind"]
    if kind == "threshold":
        x = _num(cfg, "mix.X", int)
        if x < 1:
            raise ValidationError("mix.X", "must be >= 1")
        policy = Threshold(x)
    elif kind == "timed":
        policy = TimedDelay(_dist(cfg, "mix", "delay_dist", "delay_params"))
    else:
        pool_min = _num(cfg, "mix.pool_min", int)
        flush = _num(cfg, "mix.flush_prob")
        if pool_min < 0:
            raise ValidationError("mix.pool_min", "must be >= 0")
        if not 0 < flush <= 1:
            raise ValidationError("mix.flush_prob", "must be in (0, 1]")
        policy = Pool(pool_min, flush)
    route = cfg["pman"]["donation_route"]
    if route not in ("via_dpn", "direct"):
        raise ValidationError("pman.donation_route", "must be via_dpn or direct")
    att = cfg["attacks"]
    sets = att["collusion_sets"]
    if not isinstance(sets, list) or not all(isinstance(x, str) for x in sets):
        raise ValidationError("attacks.collusion_sets", "expected a list of strings")
    for name in ("noise_mode",):
        if not isinstance(cfg["profile"][name], str):
            raise ValidationError(f"profile.{name}", "expected a string")
    s = Scenario(
        topology=Topology(arch, k if arch is Arch.DPDN else 1),
        customers=_num(cfg, "counts.customers", int),
        vendors=_num(cfg, "counts.vendors", int),
        dpn_sites=_num(cfg, "counts.dpn_sites", int),
        pman_sites=_num(cfg, "counts.pman_sites", int),
        secondary_recipients=_num(cfg, "counts.secondary_recipients", int),
        catalog_n=_num(cfg, "catalog.n", int),
        zipf_s=_num(cfg, "catalog.zipf_s"),
        sparsity_k=_num(cfg, "profile.sparsity_k", int),
        order_rate=_num(cfg, "profile.order_rate"),
        noise_budget=_num(cfg, "profile.noise_budget", int),
        basket_size=_num(cfg, "profile.basket_size", int),
        noise_mode=cfg["profile"]["noise_mode"],
        mix=policy,
        common_class=common,
        latency=_dist(cfg, "latency", "dist", "params"),
        cost=CostModel(_num(cfg, "cost.per_hop"), _num(cfg, "cost.per_rewrap")),
        request_rate=_num(cfg, "pman.request_rate"),
        request_size=_num(cfg, "pman.request_size", int),
        donation_via_dpn=route == "via_dpn",
        attacks=AttackConfig(
            correlation_mode=str(att["correlation_mode"]),
            collusion_sets=tuple(sets),
            reident_p=_num(cfg, "attacks.reident.p", int),
            reident_trials=_num(cfg, "attacks.reident.trials", int),
            time_bin=_num(cfg, "attacks.reident.time_bin"),
        ),
        horizon=_num(cfg, "horizon"),
        seed=_num(cfg, "seed", int),
    )
    try:
        s.validate()
    except ConfigError as exc:
        raise ValidationError(exc.path, str(exc).split(": ", 1)[-1]) from None
    return s


def load_raw(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(str(path), f"cannot read scenario: {exc.strerror}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ParseError(str(path), f"malformed YAML: {exc}") from None
    return raw or {}


def apply_env(cfg: dict, env=None) -> dict:
    env = os.environ if env is None else env
    if env.get("SIM_SEED"):
        try:
            cfg["seed"] = int(env["SIM_SEED"])
        except ValueError:
            raise ValidationError("SIM_SEED", f"not an integer: {env['SIM_SEED']!r}") from None
    return cfg


def parse_scenario(path, env=None) -> Scenario:
    """Read, check and build a scenario. ``SIM_SEED`` in the environment replaces the seed."""
    return build_scenario(apply_env(resolve(load_raw(path)), env))


def set_knob(cfg: dict, knob: str, value) -> dict:
    """Copy of ``cfg`` with the numeric field at dotted path ``knob`` set to ``value``."""
    parts = knob.split(".")
    node = DEFAULTS
    for part in parts:
        if not isinstance(node, dict) or part not in node:
            raise UnknownKnob(knob, "no such field")
        node = node[part]
    if isinstance(node, bool) or not isinstance(node, (int, float)):
        raise UnknownKnob(knob, "not a numeric field")
    out = copy.deepcopy(cfg)
    tgt = out
    for part in parts[:-1]:
        tgt = tgt[part]
    tgt[parts[-1]] = value
    return out
