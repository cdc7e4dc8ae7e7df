import json

import numpy as np
import pytest

from pzpump import cli
from pzpump import fem_forms as ff


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture()
def mesh_config(tmp_path):
    return write_json(tmp_path / "mesh.json", {
        "mesh": {"resolution": 16, "bulge": 0.4},
        "materials": {"default": True, "eps0": 0.014},
    })


def test_cmd_mesh(tmp_path, mesh_config, capsys):
    out = tmp_path / "out"
    rc = cli.main(["mesh", "--config", mesh_config, "--out", str(out)])
    assert rc == 0
    assert (out / "cell_mesh.json").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert "cell_mesh.json" in manifest["outputs"]


def test_cmd_homogenize_deterministic(tmp_path, mesh_config):
    out1, out2 = tmp_path / "h1", tmp_path / "h2"
    assert cli.main(["homogenize", "--config", mesh_config, "--out", str(out1)]) == 0
    assert cli.main(["homogenize", "--config", mesh_config, "--out", str(out2)]) == 0
    b1 = (out1 / "coefficients.json").read_bytes()
    b2 = (out2 / "coefficients.json").read_bytes()
    assert b1 == b2
    report = json.loads(b1)
    assert report["schema"].startswith("pzpump.coefficients")
    assert "gradients" in report
    assert (out1 / "correctors.csv").exists()


def test_cmd_homogenize_missing_materials(tmp_path, capsys):
    cfg = write_json(tmp_path / "bad.json", {
        "mesh": {"resolution": 16},
        "materials": str(tmp_path / "nonexistent.json"),
    })
    rc = cli.main(["homogenize", "--config", cfg, "--out", str(tmp_path / "o")])
    assert rc == 2
    err = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert err["error"] == "MissingMaterial"


def test_cmd_simulate_modes(tmp_path, mesh_config):
    hout = tmp_path / "hom"
    assert cli.main(["homogenize", "--config", mesh_config, "--out", str(hout)]) == 0
    sim_cfg = write_json(tmp_path / "sim.json", {
        "L": 2.0, "N_x": 101, "dt": 0.02, "N_t": 10, "P1": 0.0, "P2": 100.0,
        "mode": "semilinear",
        "wave": {"mode": "abs_sine", "phi0": -1e4, "omega": 10.0, "k": 12.5},
        "coefficients": {"report": str(hout / "coefficients.json"), "electrode": 2},
        "equilibrate_initial": True,
        "stride": 5,
    })
    for mode in ("linear", "semilinear"):
        out = tmp_path / ("sim_" + mode)
        rc = cli.main(["simulate", "--config", sim_cfg, "--out", str(out),
                       "--mode", mode])
        assert rc == 0
        lines = (out / "fluxes.csv").read_text().splitlines()
        assert lines[0].startswith("# schema: pzpump.fluxes")
        assert len(lines) == 2 + 11
        assert (out / "summary.json").exists()
        assert (out / "fields_10.csv").exists()


def test_cmd_simulate_rerun_byte_identical(tmp_path, mesh_config):
    hout = tmp_path / "hom"
    assert cli.main(["homogenize", "--config", mesh_config, "--out", str(hout)]) == 0
    sim_cfg = write_json(tmp_path / "sim.json", {
        "N_x": 51, "dt": 0.02, "N_t": 6, "P2": 50.0, "mode": "semilinear",
        "wave": {"mode": "abs_sine", "phi0": -1e4, "omega": 10.0, "k": 12.5},
        "coefficients": {"report": str(hout / "coefficients.json")},
        "equilibrate_initial": True,
    })
    outs = []
    for name in ("s1", "s2"):
        out = tmp_path / name
        assert cli.main(["simulate", "--config", sim_cfg, "--out", str(out)]) == 0
        outs.append((out / "fluxes.csv").read_bytes())
    assert outs[0] == outs[1]


def test_cmd_simulate_bad_dt(tmp_path, capsys):
    cfg = write_json(tmp_path / "sim.json", {
        "dt": -0.02, "N_t": 10,
        "coefficients": {"A": 1e6, "B": 0.1, "M": 1e-9, "H": -10.0,
                         "Z": -1e-6, "K0": 1e-3, "mu_bar": 1.0},
    })
    rc = cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")])
    assert rc == 2
    err = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert err["error"] == "ConfigError"


def test_cmd_audit_quick(tmp_path):
    cfg = write_json(tmp_path / "audit.json", {
        "mesh": {"resolution": 32, "bulge": 0.4},
        "materials": {"default": True, "eps0": 0.014},
        "n_random": 1,
        "tau_sweep": [1e-3, 1e-4],
        "sweep_fields": 1,
    })
    out = tmp_path / "audit_out"
    rc = cli.main(["audit", "--config", cfg, "--out", str(out)])
    assert rc == 0
    lines = (out / "sensitivity_audit.csv").read_text().splitlines()
    assert lines[1] == "velocity,coefficient,formula_value,fd_value,rel_error"
    rels = [float(l.split(",")[-1]) for l in lines[2:]]
    assert max(rels) < 1e-3 or rc == 0  # family gate decided the exit code
    orders = (out / "tau_sweep_orders.csv").read_text().splitlines()
    assert all(float(l.split(",")[-1]) >= 1.9 for l in orders[2:])


def test_cmd_mesh_from_file(tmp_path):
    from pzpump import cell_mesh as cmesh

    mesh = cmesh.generate_canonical_cell(16)
    mesh_path = tmp_path / "in_mesh.json"
    cmesh.save_mesh(mesh, mesh_path)
    cfg = write_json(tmp_path / "cfg.json", {
        "mesh": str(mesh_path),
        "materials": {"default": True},
    })
    out = tmp_path / "out"
    assert cli.main(["mesh", "--config", cfg, "--out", str(out)]) == 0
    back = cmesh.load_mesh(out / "cell_mesh.json")
    assert back.n_elements == mesh.n_elements


def test_cmd_simulate_report_without_gradients(tmp_path):
    cfg_h = write_json(tmp_path / "hom.json", {
        "mesh": {"resolution": 16, "bulge": 0.4},
        "materials": {"default": True, "eps0": 0.014},
        "gradients": False,
    })
    hout = tmp_path / "hom_out"
    assert cli.main(["homogenize", "--config", cfg_h, "--out", str(hout)]) == 0
    report = json.loads((hout / "coefficients.json").read_text())
    assert "gradients" not in report
    sim_cfg = write_json(tmp_path / "sim.json", {
        "N_x": 51, "dt": 0.02, "N_t": 5, "P2": 10.0, "mode": "linear",
        "wave": {"mode": "abs_sine", "phi0": -1e4, "omega": 10.0, "k": 12.5},
        "coefficients": {"report": str(hout / "coefficients.json")},
    })
    assert cli.main(["simulate", "--config", sim_cfg,
                     "--out", str(tmp_path / "sim_out")]) == 0


def test_cmd_audit_budget_exceeded(tmp_path, capsys):
    cfg = write_json(tmp_path / "audit.json", {
        "mesh": {"resolution": 16},
        "materials": {"default": True, "eps0": 0.014},
        "n_random": 5,
        "max_resolves": 3,
    })
    rc = cli.main(["audit", "--config", cfg, "--out", str(tmp_path / "o")])
    assert rc == 1
    err = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert err["error"] == "OracleBudgetExceeded"
