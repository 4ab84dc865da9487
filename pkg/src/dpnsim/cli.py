"""Command line: run, sweep, attack, report.

Exit codes: 0 success, 1 bad input (config, missing files), 2 a simulator
invariant broke.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import yaml

from . import __version__
from .adversary import ForbiddenFact, Infeasible, RunArtifacts, collude, resolve_collusion_set
from .config import (
    ParseError,
    ValidationError,
    apply_env,
    build_scenario,
    load_raw,
    resolve,
    set_knob,
)
from .engine import ConfigError, InvariantViolation, run_scenario
from .metrics import COLUMNS, fmt, order_linkage, report_row, summarize
from .model import AccessDenied, SizeClass

BUNDLE_FILES = ("results.csv", "observations.log", "views.log", "manifest.txt")
RESULT_HEADER = ["topology", "mix", "seed", *COLUMNS]


class MissingLog(FileNotFoundError):
    pass


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([r[h] for h in header])
    return buf.getvalue()


def _lines(lines) -> str:
    return "".join(ln + "\n" for ln in lines)


def run_bundle(cfg: dict, out: Path) -> dict:
    """Run one resolved config and write its bundle into ``out``; return the results row."""
    scenario = build_scenario(cfg)
    result = run_scenario(scenario)
    priv, eff = summarize(result)
    row = {"topology": str(scenario.topology), "mix": str(scenario.mix), "seed": str(scenario.seed),
           **report_row(priv, eff)}
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(_csv(RESULT_HEADER, [row]), encoding="utf-8")
    (out / "observations.log").write_text(_lines(e.to_line() for e in result.observations), encoding="utf-8")
    (out / "views.log").write_text(_lines(result.artifacts.view_lines()), encoding="utf-8")
    manifest = {"tool": "dpnsim", "version": __version__, "seed": scenario.seed, "config": cfg}
    (out / "manifest.txt").write_text(yaml.safe_dump(manifest, sort_keys=True), encoding="utf-8")
    return row


def _fail(code: int, msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _guard(fn, *args) -> int:
    try:
        return fn(*args)
    except (ConfigError, MissingLog, FileNotFoundError) as exc:
        return _fail(1, str(exc))
    except (InvariantViolation, Infeasible, AccessDenied, ForbiddenFact) as exc:
        return _fail(2, f"invariant violated: {exc}")


def cmd_run(scenario: str, out: str) -> int:
    def go():
        cfg = apply_env(resolve(load_raw(scenario)))
        run_bundle(cfg, Path(out))
        return 0
    return _guard(go)


def _parse_value(text: str):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise ValidationError("--values", f"not a number: {text!r}") from None


def _sweep_point(args):
    cfg, knob, value, out = args
    return run_bundle(set_knob(cfg, knob, value), Path(out))


def cmd_sweep(scenario: str, knob: str, values: str, out: str, parallelism: int = 1) -> int:
    def go():
        cfg = apply_env(resolve(load_raw(scenario)))
        vals = sorted({_parse_value(v) for v in values.split(",") if v.strip()})
        if not vals:
            raise ValidationError("--values", "no values given")
        set_knob(cfg, knob, vals[0])  # fail fast on a bad knob
        root = Path(out)
        jobs = [(cfg, knob, v, str(root / f"{knob}={v}")) for v in vals]
        if parallelism > 1:
            with ProcessPoolExecutor(max_workers=parallelism) as pool:
                rows = list(pool.map(_sweep_point, jobs))
        else:
            rows = [_sweep_point(j) for j in jobs]
        header = ["knob", "value", *RESULT_HEADER]
        frontier_rows = [{"knob": knob, "value": str(v), **r} for v, r in zip(vals, rows)]
        root.mkdir(parents=True, exist_ok=True)
        (root / "frontier.csv").write_text(_csv(header, frontier_rows), encoding="utf-8")
        return 0
    return _guard(go)


def load_bundle(bundle: Path) -> RunArtifacts:
    obs, views, man = bundle / "observations.log", bundle / "views.log", bundle / "manifest.txt"
    for f in (obs, views):
        if not f.exists():
            raise MissingLog(f"{f} not found")
    common = SizeClass.S0
    if man.exists():
        cfg = (yaml.safe_load(man.read_text(encoding="utf-8")) or {}).get("config", {})
        common = SizeClass[cfg.get("mix", {}).get("common_class", "S0")]
    return RunArtifacts.from_lines(obs.read_text(encoding="utf-8").splitlines(),
                                   views.read_text(encoding="utf-8").splitlines(), common)


def _write_new(path: Path, text: str) -> None:
    if path.exists():
        if path.read_text(encoding="utf-8") != text:
            raise ValidationError(str(path), "exists with different content; refusing to overwrite")
        return
    path.write_text(text, encoding="utf-8")


def cmd_attack(bundle: str, spec: str) -> int:
    """Re-run attacks on a saved bundle; outputs go to new files named after the spec."""
    def go():
        root = Path(bundle)
        arts = load_bundle(root)
        raw = load_raw(spec)
        unknown = set(raw) - {"correlation_mode", "collusion_sets"}
        if unknown:
            raise ParseError(sorted(unknown)[0], "unknown attack spec key")
        mode = raw.get("correlation_mode", "candidate")
        if mode not in ("exact", "candidate"):
            raise ValidationError("correlation_mode", "must be exact or candidate")
        sets = raw.get("collusion_sets", [])
        stem = Path(spec).stem
        links = order_linkage(arts, mode)
        link_rows = [{"order": str(lk.order), "customer": str(lk.customer), "anonymity_set": str(lk.anonymity_set),
                      "entropy_bits": fmt(lk.entropy_bits), "map_correct": fmt(lk.map_correct)} for lk in links]
        coll_rows = []
        if arts.truth.delivered_customers():
            for name in sets:
                res = collude(resolve_collusion_set(name, arts), arts.truth)
                coll_rows.append({"collusion_set": name, "exposed": str(sum(res.link_exposed.values())),
                                  "customers": str(len(res.link_exposed)), "rate": fmt(res.rate)})
        _write_new(root / f"attack-{stem}-linkage.csv",
                   _csv(["order", "customer", "anonymity_set", "entropy_bits", "map_correct"], link_rows))
        _write_new(root / f"attack-{stem}-collusion.csv",
                   _csv(["collusion_set", "exposed", "customers", "rate"], coll_rows))
        return 0
    return _guard(go)


def cmd_report(bundle: str) -> int:
    def go():
        root = Path(bundle)
        found = [p for p in (root / "frontier.csv", root / "results.csv") if p.exists()]
        found += sorted(root.glob("attack-*.csv"))
        if not found:
            raise MissingLog(f"no results in {root}")
        for p in found:
            rows = list(csv.reader(p.read_text(encoding="utf-8").splitlines()))
            widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
            print(f"== {p.name}")
            for r in rows:
                print("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        return 0
    return _guard(go)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="dpnsim", description="Private delivery network simulator")
    sub = ap.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("run", help="simulate one scenario and write a results bundle")
    p.add_argument("scenario")
    p.add_argument("--out", required=True)
    p = sub.add_parser("sweep", help="run a scenario across values of one numeric knob")
    p.add_argument("scenario")
    p.add_argument("--knob", required=True, help="dotted key, e.g. mix.X or topology.k")
    p.add_argument("--values", required=True, help="comma separated")
    p.add_argument("--out", required=True)
    p.add_argument("--parallelism", type=int, default=1)
    p = sub.add_parser("attack", help="re-run attacks on a saved bundle")
    p.add_argument("bundle")
    p.add_argument("--spec", required=True)
    p = sub.add_parser("report", help="print the tables of a bundle or sweep")
    p.add_argument("bundle")
    a = ap.parse_args(argv)
    if a.cmd == "run":
        return cmd_run(a.scenario, a.out)
    if a.cmd == "sweep":
        return cmd_sweep(a.scenario, a.knob, a.values, a.out, a.parallelism)
    if a.cmd == "attack":
        return cmd_attack(a.bundle, a.spec)
    return cmd_report(a.bundle)


if __name__ == "__main__":
    sys.exit(main())
