import csv

import pytest
import yaml

from dpnsim.cli import BUNDLE_FILES, RESULT_HEADER, main
from dpnsim.config import DEFAULTS, ParseError, UnknownKnob, ValidationError, parse_scenario, resolve, set_knob
from dpnsim.model import Arch, SizeClass
from dpnsim.protocols import Threshold


def write(path, doc):
    path.write_text(yaml.safe_dump(doc), encoding="utf-8")
    return path


SMALL = {"counts": {"customers": 8}, "horizon": 30.0, "seed": 3}


def rows(path):
    return list(csv.DictReader(path.read_text(encoding="utf-8").splitlines()))


def test_minimal_file_gets_defaults(tmp_path):
    s = parse_scenario(write(tmp_path / "s.yaml", {}), env={})
    assert s.topology.arch is Arch.DPN and s.mix == Threshold(3)
    assert s.customers == DEFAULTS["counts"]["customers"] and s.common_class is SizeClass.S2
    assert s.horizon == 100.0 and s.seed == 0


def test_x_zero_names_field(tmp_path):
    with pytest.raises(ValidationError) as e:
        parse_scenario(write(tmp_path / "s.yaml", {"mix": {"X": 0}}), env={})
    assert e.value.path == "mix.X"


def test_unknown_key(tmp_path):
    with pytest.raises(ParseError) as e:
        parse_scenario(write(tmp_path / "s.yaml", {"mixx": {"X": 2}}), env={})
    assert e.value.path == "mixx"


def test_nested_unknown_key():
    with pytest.raises(ParseError) as e:
        resolve({"latency": {"dist": "constant", "parms": [1]}})
    assert e.value.path == "latency.parms"


def test_key_from_other_mix_kind_rejected():
    with pytest.raises(ParseError):
        resolve({"mix": {"kind": "threshold", "flush_prob": 0.5}})


def test_bad_distribution(tmp_path):
    with pytest.raises(ValidationError) as e:
        parse_scenario(write(tmp_path / "s.yaml", {"latency": {"dist": "normal", "params": [1]}}), env={})
    assert e.value.path == "latency.dist"


def test_malformed_yaml(tmp_path):
    p = tmp_path / "s.yaml"
    p.write_text("mix: [unclosed", encoding="utf-8")
    with pytest.raises(ParseError):
        parse_scenario(p, env={})


def test_sim_seed_overrides(tmp_path):
    s = parse_scenario(write(tmp_path / "s.yaml", {"seed": 1}), env={"SIM_SEED": "77"})
    assert s.seed == 77


def test_set_knob():
    cfg = resolve({})
    assert set_knob(cfg, "mix.X", 8)["mix"]["X"] == 8 and cfg["mix"]["X"] == 3
    with pytest.raises(UnknownKnob):
        set_knob(cfg, "mix.Y", 1)
    with pytest.raises(UnknownKnob):
        set_knob(cfg, "topology.kind", 1)


def test_run_writes_bundle(tmp_path):
    scen = write(tmp_path / "s.yaml", SMALL)
    assert main(["run", str(scen), "--out", str(tmp_path / "out")]) == 0
    for f in BUNDLE_FILES:
        assert (tmp_path / "out" / f).exists()
    (row,) = rows(tmp_path / "out" / "results.csv")
    assert list(row) == RESULT_HEADER
    line = (tmp_path / "out" / "observations.log").read_text().splitlines()[0]
    assert len(line.split("\t")) == 5
    man = yaml.safe_load((tmp_path / "out" / "manifest.txt").read_text())
    assert man["seed"] == 3 and man["tool"] == "dpnsim"


def test_run_is_byte_stable(tmp_path):
    scen = write(tmp_path / "s.yaml", SMALL)
    main(["run", str(scen), "--out", str(tmp_path / "a")])
    main(["run", str(scen), "--out", str(tmp_path / "b")])
    for f in BUNDLE_FILES:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_run_missing_file(tmp_path, capsys):
    assert main(["run", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err


def test_run_invalid_config(tmp_path):
    scen = write(tmp_path / "s.yaml", {"mix": {"X": 0}})
    assert main(["run", str(scen), "--out", str(tmp_path / "o")]) == 1


def test_sweep_rows_sorted(tmp_path):
    scen = write(tmp_path / "s.yaml", SMALL)
    assert main(["sweep", str(scen), "--knob", "mix.X", "--values", "4,1,8,2", "--out", str(tmp_path / "sw")]) == 0
    got = rows(tmp_path / "sw" / "frontier.csv")
    assert [r["value"] for r in got] == ["1", "2", "4", "8"]
    assert (tmp_path / "sw" / "mix.X=4" / "results.csv").exists()


def test_sweep_parallel_identical(tmp_path):
    scen = write(tmp_path / "s.yaml", SMALL)
    main(["sweep", str(scen), "--knob", "mix.X", "--values", "1,2,3", "--out", str(tmp_path / "p1")])
    main(["sweep", str(scen), "--knob", "mix.X", "--values", "1,2,3", "--out", str(tmp_path / "p3"),
          "--parallelism", "3"])
    assert (tmp_path / "p1" / "frontier.csv").read_bytes() == (tmp_path / "p3" / "frontier.csv").read_bytes()


def test_sweep_dpdn_hops(tmp_path):
    scen = write(tmp_path / "s.yaml", {**SMALL, "topology": {"kind": "dpdn", "k": 1}, "counts": {"customers": 8, "dpn_sites": 3},
                                       "mix": {"X": 1}})
    main(["sweep", str(scen), "--knob", "topology.k", "--values", "1,2,3", "--out", str(tmp_path / "sw")])
    got = rows(tmp_path / "sw" / "frontier.csv")
    assert [float(r["hops_mean"]) for r in got] == [2.0, 3.0, 4.0]


def test_sweep_unknown_knob(tmp_path):
    scen = write(tmp_path / "s.yaml", SMALL)
    assert main(["sweep", str(scen), "--knob", "mix.nope", "--values", "1", "--out", str(tmp_path / "sw")]) == 1


def test_attack_collusion_and_rerun(tmp_path):
    scen = write(tmp_path / "s.yaml", SMALL)
    out = tmp_path / "out"
    main(["run", str(scen), "--out", str(out)])
    spec = write(tmp_path / "vd.yaml", {"correlation_mode": "exact", "collusion_sets": ["vendor+dpn", "dpn"]})
    before = {f: (out / f).read_bytes() for f in BUNDLE_FILES}
    assert main(["attack", str(out), "--spec", str(spec)]) == 0
    coll = {r["collusion_set"]: r for r in rows(out / "attack-vd-collusion.csv")}
    assert float(coll["vendor+dpn"]["rate"]) == 1.0 and float(coll["dpn"]["rate"]) == 0.0
    first = (out / "attack-vd-linkage.csv").read_bytes()
    assert main(["attack", str(out), "--spec", str(spec)]) == 0
    assert (out / "attack-vd-linkage.csv").read_bytes() == first
    assert {f: (out / f).read_bytes() for f in BUNDLE_FILES} == before


def test_attack_empty_log(tmp_path):
    b = tmp_path / "b"
    b.mkdir()
    (b / "observations.log").write_text("")
    (b / "views.log").write_text("")
    spec = write(tmp_path / "a.yaml", {"collusion_sets": ["vendor"]})
    assert main(["attack", str(b), "--spec", str(spec)]) == 0
    assert (b / "attack-a-linkage.csv").read_text().splitlines() == ["order,customer,anonymity_set,entropy_bits,map_correct"]
    assert (b / "attack-a-collusion.csv").read_text().splitlines() == ["collusion_set,exposed,customers,rate"]


def test_attack_missing_log(tmp_path):
    spec = write(tmp_path / "a.yaml", {})
    assert main(["attack", str(tmp_path), "--spec", str(spec)]) == 1


def test_attack_bad_spec_key(tmp_path):
    scen = write(tmp_path / "s.yaml", SMALL)
    main(["run", str(scen), "--out", str(tmp_path / "o")])
    spec = write(tmp_path / "a.yaml", {"mode": "exact"})
    assert main(["attack", str(tmp_path / "o"), "--spec", str(spec)]) == 1


def test_report(tmp_path, capsys):
    scen = write(tmp_path / "s.yaml", SMALL)
    main(["run", str(scen), "--out", str(tmp_path / "o")])
    capsys.readouterr()
    assert main(["report", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    assert "results.csv" in out and "anon_set_mean" in out
    assert main(["report", str(tmp_path / "empty")]) == 1
