import json
import math

import pytest

from eigencharts import ValidationError
from eigencharts.cli import main, run_experiment, substream_seed
from eigencharts.config import OUTPUT_ENV, fixture_path, list_fixtures, load_config, parse_config_text

CHEAP = ["--set", "domain.resolution=49"]


def test_list_fixtures(capsys):
    assert main(["list-fixtures"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) >= 5
    names = {line.split(":")[0]: line for line in lines}
    assert "delta" in names["dumbbell"] and "n = 3" in names["dumbbell"]
    assert "eps" in names["rectangle_neumann"]
    assert [n for n, _ in list_fixtures()] == sorted(names)


@pytest.mark.parametrize("name", [n for n, _ in list_fixtures()])
def test_every_fixture_validates(name, capsys):
    assert main(["validate", name]) == 0
    assert capsys.readouterr().out.strip() == f"{name}: ok"


def test_a_prime_not_below_a_is_rejected(capsys):
    code = main(["validate", "unit_square_dirichlet", "--set", "selection.A_prime=0.7"])
    assert code == 2
    err = capsys.readouterr().err
    assert "validation failure in stage config" in err
    assert "0 < A' < A" in err


def test_config_errors():
    with pytest.raises(ValidationError, match="unknown key"):
        parse_config_text("[selection]\nbogus = 1\n")
    with pytest.raises(ValidationError, match="unknown config section"):
        parse_config_text("[nope]\n")
    with pytest.raises(ValidationError, match="section.key=value"):
        parse_config_text("", overrides=["rho=1"])
    with pytest.raises(ValidationError, match="unknown stage"):
        parse_config_text("[experiment]\nstages = eig,fly\n")
    with pytest.raises(ValidationError, match="bad config value"):
        parse_config_text("[selection]\nrho = abc\n")
    with pytest.raises(ValidationError, match="not found"):
        load_config("no_such_fixture")


def test_mask_file_must_exist(tmp_path):
    cfg = tmp_path / "m.cfg"
    cfg.write_text("[domain]\nshape = mask_file\nmask_file = missing.pbm\n")
    with pytest.raises(ValidationError, match="mask file does not exist"):
        load_config(cfg)


def test_overrides_and_defaults_materialised():
    cfg = load_config("unit_square_dirichlet", ["selection.rho=0.2", "domain.resolution=64"])
    assert cfg.getfloat("selection", "rho") == 0.2
    assert cfg.get("domain", "resolution") == "64"
    d = cfg.to_dict()
    assert d["selection"]["c0"] == "0.1" and d["analysis"]["pair_budget"] == "200000"


def test_output_dir_env_override(tmp_path, monkeypatch):
    cfg = load_config("free_plane")
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path))
    assert cfg.output_dir() == tmp_path / "free_plane"
    assert main(["run", "free_plane", "--no-figures"]) == 0
    assert (tmp_path / "free_plane" / "report.json").exists()


def test_substreams_differ():
    seeds = {substream_seed(0, s) for s in ("eig", "heat", "triangulate", "distort")}
    assert len(seeds) == 4
    assert substream_seed(0, "triangulate", 1) != substream_seed(0, "triangulate", 2)
    assert substream_seed(5, "eig") == substream_seed(5, "eig")


def test_numerical_failure_names_stage(tmp_path, capsys):
    code = main(["run", "unit_square_neumann", "-o", str(tmp_path), *CHEAP,
                 "--set", "experiment.stages=eig,select", "--set", "selection.c0=1e6",
                 "--set", "selection.relax_max=0"])
    assert code == 3
    assert "numerical failure in stage select" in capsys.readouterr().err


def test_free_plane_bundle(tmp_path):
    report = run_experiment("free_plane", out_dir=tmp_path, figures=False)
    J = report["triangulate"]["jacobian"]
    v = 0.5 / (4 * math.pi) * math.exp(-0.25)
    # grad_x K_t(x, a) = -(x - a) K / (2t), so each diagonal entry is -v
    assert J[0][0] == pytest.approx(-v, abs=1e-10) and J[1][1] == pytest.approx(-v, abs=1e-10)
    assert abs(J[0][1]) < 1e-15 and abs(J[1][0]) < 1e-15
    data = json.loads((tmp_path / "triangulation.json").read_text())
    assert data["analytic_entry"] == pytest.approx(v)


def test_run_bundle_contents(tmp_path):
    report = run_experiment("unit_square_neumann", CHEAP[1:], tmp_path, figures=False)
    assert {"eigenvalues.csv", "weyl.csv", "selection.json", "distortion_selection.json",
            "report.json"} <= set(report["files"])
    assert report["config"]["domain"]["resolution"] == "49"
    assert report["select"][0]["all_pass"]
    saved = json.loads((tmp_path / "report.json").read_text())
    assert saved["experiment"] == "unit_square_neumann"


def test_rerun_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["run", "unit_square_neumann", "-o", str(out), *CHEAP]) == 0
    files = sorted(p.name for p in a.iterdir())
    assert files == sorted(p.name for p in b.iterdir())
    assert any(f.endswith(".png") for f in files)
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_fixture_path_resolution():
    assert fixture_path("dumbbell").name == "dumbbell.cfg"
    assert fixture_path("dumbbell.cfg") == fixture_path("dumbbell")
    assert fixture_path("nope") is None
