import csv
import re
import shutil
import subprocess
import sys
from importlib import resources

import numpy as np
import pytest

from emckt import cli
from emckt.config import config_from_dict, load_config, time_step
from emckt.postprocess import relative_l2

DATA = resources.files("emckt") / "data"

SMALL = """
[mesh]
cells = [2, 2, 2]
dims = [0.2, 0.2, 0.2]

[[ports]]
id = 1
a = [0.1, 0.1, 0.0]
b = [0.1, 0.1, 0.2]

[time]
f_max = 2.0e9
steps = {steps}

[circuit]
netlist = "{deck}"

[archive]
path = "arch.empx"

[output]
dir = "out"
figures = {figures}
compare_threshold = {threshold}
"""


def _setup(tmp_path, deck="mixer.cir", steps=60, figures="false", threshold="1e-9", extra=""):
    for name in ("mixer.cir", "chebyshev.cir", "dd_rectifier.cir", "schottky.dd"):
        shutil.copy(DATA / name, tmp_path / name)
    cfg = tmp_path / "run.toml"
    cfg.write_text(SMALL.format(steps=steps, deck=deck, figures=figures, threshold=threshold) + extra)
    return cfg


def _report(text):
    return dict(re.findall(r"^(\S+) = (.*)$", text, re.M))


def test_auto_dt():
    cfg = config_from_dict({"time": {"f_max": 2e9}})
    assert time_step(cfg) == pytest.approx(16.6667e-12, rel=1e-5)
    assert time_step(config_from_dict({"time": {"dt": 16e-12}})) == 16e-12
    cfg = config_from_dict({"circuit": {"netlist": str(DATA / "chebyshev.cir")}})
    assert time_step(cfg) == 1.0 / (30 * 2e9)


def test_extract_deterministic(tmp_path, capsys):
    cfg = _setup(tmp_path)
    assert cli.main(["extract", "--config", str(cfg), "--archive", str(tmp_path / "a1.empx")]) == 0
    assert cli.main(["extract", "--config", str(cfg), "--archive", str(tmp_path / "a2.empx")]) == 0
    assert (tmp_path / "a1.empx").read_bytes() == (tmp_path / "a2.empx").read_bytes()
    rep = _report(capsys.readouterr().out)
    assert rep["lags"] == "61" and rep["ports"] == "1"


def test_compare_self_consistent(tmp_path, capsys):
    cfg = _setup(tmp_path, figures="true")
    assert cli.main(["compare", "--config", str(cfg)]) == 0
    rep = _report(capsys.readouterr().out)
    out = tmp_path / "out"
    assert rep["verdict"] == "PASS"

    def volts(name):
        with open(out / name) as fh:
            return np.array([float(r["V"]) for r in csv.DictReader(fh)])

    err = relative_l2(volts("coupled_waveforms.csv"), volts("replay_waveforms.csv"))
    assert float(rep["relative_l2"]) == pytest.approx(err, rel=1e-5)
    with open(out / "compare.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 61
    a = np.array([float(r["V_coupled"]) for r in rows])
    b = np.array([float(r["V_replay"]) for r in rows])
    assert relative_l2(a, b) == pytest.approx(err, rel=1e-12)
    for name in ("compare.png", "coupled_waveforms.png", "replay_spectrum_Y_port1.csv",
                 "coupled_spectrum_S11_port1.csv"):
        assert (out / name).exists()
    assert (out / "replay_spectrum_V_port1.csv").read_text().startswith("f_Hz,re,im\n")


def test_compare_threshold_exit_4(tmp_path):
    cfg = _setup(tmp_path, threshold="1e-300")
    assert cli.main(["compare", "--config", str(cfg)]) == 4


def test_replay_dt_mismatch_exit_2(tmp_path, caplog):
    cfg = _setup(tmp_path)
    assert cli.main(["extract", "--config", str(cfg)]) == 0
    text = cfg.read_text().replace("f_max = 2.0e9", "f_max = 2.5e9")
    cfg.write_text(text)
    assert cli.main(["replay", "--config", str(cfg)]) == 2
    assert "kind=ConfigurationError" in caplog.text


def test_horizon_exit_2(tmp_path):
    cfg = _setup(tmp_path, steps=60)
    assert cli.main(["extract", "--config", str(cfg)]) == 0
    cfg.write_text(cfg.read_text().replace("steps = 60", "steps = 61"))
    assert cli.main(["replay", "--config", str(cfg)]) == 2


def test_config_errors_exit_2(tmp_path):
    cfg = _setup(tmp_path)
    cfg.write_text(cfg.read_text() + "\n[bogus]\nx = 1\n")
    assert cli.main(["coupled", "--config", str(cfg)]) == 2
    cfg = _setup(tmp_path, deck="missing.cir")
    assert cli.main(["coupled", "--config", str(cfg)]) == 2
    assert cli.main(["coupled", "--config", str(tmp_path / "nope.toml")]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[mesh\n")
    assert cli.main(["coupled", "--config", str(bad)]) == 2


def test_solver_failure_exit_3(tmp_path):
    cfg = _setup(tmp_path, extra="\n[solver]\ngmres_tol = 1e-15\ngmres_restart = 1\ngmres_max_iter = 1\n")
    assert cli.main(["coupled", "--config", str(cfg)]) == 3


def test_coupled_deterministic(tmp_path):
    cfg = _setup(tmp_path)
    assert cli.main(["coupled", "--config", str(cfg), "--out", str(tmp_path / "r1")]) == 0
    assert cli.main(["coupled", "--config", str(cfg), "--out", str(tmp_path / "r2")]) == 0
    for name in ("coupled_waveforms.csv", "coupled_spectrum_Y_port1.csv"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()


def test_bench_outputs(tmp_path, capsys):
    cfg = _setup(tmp_path, deck="chebyshev.cir", figures="true")
    assert cli.main(["bench", "--config", str(cfg)]) == 0
    rep = _report(capsys.readouterr().out)
    assert float(rep["newton_coupled"]) == 1.0
    out = tmp_path / "out"
    first = (out / "cost_report.csv").read_text()
    assert first.splitlines()[0] == "quantity,value"
    assert (out / "timings.csv").exists() and (out / "cumulative_time.png").exists()
    assert cli.main(["bench", "--config", str(cfg)]) == 0
    assert (out / "cost_report.csv").read_text() == first


def test_pml_config(tmp_path):
    cfg = _setup(tmp_path, extra="\n[pml]\nenabled = true\nthickness_cells = 1\nzmax = true\n")
    assert cli.main(["coupled", "--config", str(cfg)]) == 0
    cfg = _setup(tmp_path, extra="\n[pml]\nenabled = true\n")
    assert cli.main(["coupled", "--config", str(cfg)]) == 2


def test_shipped_configs_load():
    for name in ("cavity_chebyshev.toml", "cavity_mixer.toml", "cavity_dd_rectifier.toml"):
        cfg = load_config(DATA / name)
        assert time_step(cfg) == pytest.approx(1.0 / (30 * 2e9))
        assert cfg.lags >= cfg.steps + 1


def test_module_entry_point(tmp_path):
    cfg = _setup(tmp_path, steps=5)
    proc = subprocess.run([sys.executable, "-m", "emckt", "coupled", "--config", str(cfg)],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.startswith("=== emckt coupled ===")
    assert proc.stdout.rstrip().endswith("=== end ===")


def test_file_mesh_matches_box(tmp_path):
    from emckt.config import build_em
    from emckt.mesh import build_box_mesh, write_ascii

    write_ascii(build_box_mesh(2, 2, 2, (0.2, 0.2, 0.2)), tmp_path / "cube.mesh")
    port = {"id": 1, "a": [0.1, 0.1, 0.0], "b": [0.1, 0.1, 0.2]}
    base = {"ports": [port], "time": {"f_max": 2e9}}
    from_file = config_from_dict({**base, "mesh": {"kind": "file", "file": "cube.mesh"}}, tmp_path)
    boxed = config_from_dict({**base, "mesh": {"cells": [2, 2, 2], "dims": [0.2, 0.2, 0.2]}})
    _, s_file, _, p_file = build_em(from_file)
    _, s_box, _, p_box = build_em(boxed)
    assert np.array_equal(s_file.pec, s_box.pec)
    assert s_file.n_free == s_box.n_free == 26
    assert p_file[0].edges == p_box[0].edges
