import csv
import json

import numpy as np
import pytest

from mshe.harness.cli import execute, main
from mshe.harness.config import (
    OUTSIDE_REGIME,
    ConfigError,
    RunConfig,
    apply_overrides,
    build_config,
    config_schema,
    dump_config,
    load_config,
)
from mshe.harness.io import OutputSink
from mshe.spectral import SpectralGrid, write_field_dump

SMALL = ["grid.K=4", "time.dt=0.005", "time.t_end=0.05", "ensemble.n_paths=3", "ensemble.chunk_size=2"]


def small(kind, out, *extra):
    return build_config({"experiment": {"kind": kind}}, SMALL + [f'output_dir="{out}"', *extra])


def read_csv(path):
    lines = path.read_text().splitlines()
    comments = [ln for ln in lines if ln.startswith("#")]
    rows = list(csv.reader(ln for ln in lines if not ln.startswith("#")))
    return comments, rows


def test_defaults_and_round_trip(tmp_path):
    cfg = RunConfig()
    assert cfg.grid.K == 16 and cfg.model.b == 3.5 and cfg.global_regime
    p = tmp_path / "c.json"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg
    assert load_config(p).run_id() == cfg.run_id()


def test_run_id_ignores_output_dir_and_workers():
    a = build_config({}, ['output_dir="x"', "workers=1"])
    b = build_config({}, ['output_dir="y"', "workers=3"])
    assert a.run_id() == b.run_id()
    assert build_config({}, ["model.a=0.6"]).run_id() != a.run_id()


def test_overrides_parse_json_and_strings():
    d = apply_overrides({"grid": {"K": 8}}, ["grid.K=4", "diffusion.shell_sigma={\"3\": 0.2}", "initial.kind=zero"])
    assert d["grid"]["K"] == 4
    assert d["diffusion"]["shell_sigma"] == {"3": 0.2}
    assert d["initial"]["kind"] == "zero"
    with pytest.raises(ConfigError):
        apply_overrides({}, ["grid.K"])


@pytest.mark.parametrize("override,field", [
    ("grid.K=0", "grid.K"),
    ("grid.bogus=1", "grid.bogus"),
    ("time.dt=2", "time"),
    ("ensemble.coupling=\"weird\"", "ensemble.coupling"),
    ("stops.xi=[[1,-2]]", "stops.xi"),
    ("experiment.kind=\"nope\"", "experiment"),
])
def test_schema_errors_name_the_field(override, field):
    with pytest.raises(ConfigError) as e:
        build_config({}, [override])
    assert field in str(e.value)


def test_empty_observable_list_is_rejected():
    with pytest.raises(ConfigError, match="no observables"):
        build_config({"experiment": {"kind": "invariant", "observables": []}})
    with pytest.raises(ConfigError):
        build_config({"experiment": {"kind": "invariant", "observables": ["bogus(1)"]}})


def test_schema_is_published():
    s = config_schema()
    assert "grid" in s["properties"] and "experiment" in s["properties"]


def test_initial_fields(tmp_path):
    assert build_config({}, ["grid.K=3", "initial.kind=zero"]).initial_field().norm() == 0
    c = build_config({}, ["grid.K=3", "initial.kind=constant", "initial.value=2"]).initial_field()
    assert c.coeffs[3, 3] == 2
    m = build_config({}, ["grid.K=3", "initial.kind=mode", "initial.k=2", "initial.mode_kind=sin"]).initial_field()
    assert m.coeffs[5, 3] != 0 and m.coeffs[5, 3].real == 0
    r1 = build_config({}, ["grid.K=3"]).initial_field()
    r2 = build_config({}, ["grid.K=3"]).initial_field()
    np.testing.assert_array_equal(r1.coeffs, r2.coeffs)
    raw, _ = write_field_dump(tmp_path / "u0.bin", r1, SpectralGrid(3), 0.0, 0)
    f = build_config({}, ["grid.K=3", "initial.kind=file", f'initial.path="{raw}"']).initial_field()
    assert (f - r1).norm() < 1e-12 * r1.norm()
    with pytest.raises(ValueError):
        build_config({}, ["grid.K=4", "initial.kind=file", f'initial.path="{raw}"']).initial_field()


def test_diffusion_specs():
    assert build_config({}, ["diffusion.kind=scalar_multiplicative", "diffusion.kappa=0.3"]).diffusion_spec().kappa == 0.3
    assert build_config({}, ["diffusion.sigma=[0.1,0.2]"]).diffusion_spec().sigma == (0.1, 0.2)
    assert build_config({}, ["diffusion.kind=diagonal_multiplicative", "diffusion.gamma=[1,2]"]).diffusion_spec().gamma == (1.0, 2.0)


def test_simulate_writes_tagged_outputs(tmp_path):
    cfg = small("simulate", tmp_path / "run", "experiment.snapshot_stride=5")
    manifest = json.loads(execute(cfg).read_text())
    rid = cfg.run_id()
    assert manifest["run_id"] == rid
    assert set(manifest) >= {"config", "code_version", "wall_clock_seconds", "outputs", "anomalies"}
    for name in manifest["outputs"]:
        assert (tmp_path / "run" / name).exists()
    comments, rows = read_csv(tmp_path / "run" / "norms.csv")
    assert comments[0] == f"# run_id={rid}"
    assert rows[0][0] == "t" and len(rows) == 12
    traj = json.loads((tmp_path / "run" / "trajectory.json").read_text())
    assert traj["run_id"] == rid
    raw = tmp_path / "run" / traj["snapshots"]["file"]
    assert rid in raw.name
    assert raw.stat().st_size == len(traj["snapshots"]["times"]) * 81 * 16


def test_rerun_is_bitwise_identical(tmp_path):
    outs = []
    for d in ("a", "b"):
        cfg = small("ensemble", tmp_path / d)
        execute(cfg)
        outs.append({p.name: p.read_bytes() for p in (tmp_path / d).iterdir() if p.name != "manifest.json"})
    assert outs[0] == outs[1]


def test_outside_regime_stamp(tmp_path):
    cfg = small("ensemble", tmp_path / "r", "model.b=5.0")
    m = json.loads(execute(cfg).read_text())
    assert m["regime"] == OUTSIDE_REGIME
    assert json.loads((tmp_path / "r" / "moments.json").read_text())["regime"] == OUTSIDE_REGIME
    comments, _ = read_csv(tmp_path / "r" / "moments_per_path.csv")
    assert f"# regime={OUTSIDE_REGIME}" in comments
    cfg_in = small("ensemble", tmp_path / "s")
    assert "regime" not in json.loads(execute(cfg_in).read_text())


def test_single_level_galerkin_ladder_is_allowed(tmp_path):
    cfg = small("convergence", tmp_path / "g", "experiment.shell_ladder=[16]")
    execute(cfg)
    _, rows = read_csv(tmp_path / "g" / "galerkin.csv")
    assert len(rows) == 2 and float(rows[1][1]) == 0.0


@pytest.mark.parametrize("kind,extra,files", [
    ("invariant", ["experiment.T_avg=1.0", "experiment.stride=1", "experiment.radii=[1,10]"],
     {"measure.json", "spectrum.csv"}),
    ("feller", ["experiment.t=0.02", "experiment.levels=2"], {"feller.csv", "feller.json"}),
    ("stopprob", ["experiment.t=0.05", "experiment.r0=10"], {"stopprob.csv"}),
    ("convergence", ["experiment.shell_ladder=[4,16]", "experiment.dts=[0.01,0.005]"],
     {"galerkin.csv", "timestep.csv", "timestep.json"}),
])
def test_each_experiment_kind_runs(tmp_path, kind, extra, files):
    cfg = small(kind, tmp_path / kind, *extra)
    manifest = json.loads(execute(cfg).read_text())
    assert files <= set(manifest["outputs"])


def test_output_confinement(tmp_path):
    sink = OutputSink(tmp_path / "o", "abc")
    with pytest.raises(ValueError):
        sink.path("../escape.json")
    sink.write_json("x.json", {"a": np.float64(1.5), "b": np.arange(2)})
    assert json.loads((tmp_path / "o" / "x.json").read_text()) == {"a": 1.5, "b": [0, 1], "run_id": "abc"}


def test_failed_run_leaves_no_outputs(tmp_path, monkeypatch):
    from mshe.harness import experiments

    def boom(cfg, sink, mapper):
        sink.write_json("partial.json", {})
        raise RuntimeError("fail")

    monkeypatch.setitem(experiments.RUNNERS, "simulate", boom)
    cfg = small("simulate", tmp_path / "f")
    with pytest.raises(RuntimeError):
        execute(cfg)
    assert not (tmp_path / "f").exists()


def test_cli_main(tmp_path, capsys):
    out = tmp_path / "cli"
    rc = main(["simulate", "--out", str(out), *sum((["--set", s] for s in SMALL), [])])
    assert rc == 0
    assert (out / "manifest.json").exists()
    assert main(["invariant", "--set", "experiment.observables=[]"]) == 2
    assert "no observables" in capsys.readouterr().err
    cfgfile = tmp_path / "c.json"
    cfgfile.write_text(json.dumps({"experiment": {"kind": "feller"}}))
    assert main(["simulate", "--config", str(cfgfile)]) == 2
    assert main(["--print-schema"]) == 0
    short = ["invariant", "--out", str(tmp_path / "short"), "--set", "grid.K=4", "--set", "experiment.T_avg=0.01"]
    assert main(short) == 2
    assert "run failed" in capsys.readouterr().err
    assert not (tmp_path / "short").exists()
