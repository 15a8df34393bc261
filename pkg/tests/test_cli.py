import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import TRUTH, noise_free_dataset
from recurgap.cli import main
from recurgap.harness import CSV_COLUMNS, parse_summary_csv
from recurgap.simulate import TIDY_COLUMNS, read_tidy, write_tidy

SIM = """\
n = 20
c_max = 125
error_dist = normal
gamma0 = 0.6
gamma1 = -0.4
rho = 0.03
sigma2 = 11
seed = 5
"""


def _write(path, text):
    path.write_text(text)
    return str(path)


def _report(path):
    out = {}
    for line in path.read_text().splitlines():
        k, v = line.split("=", 1)
        out[k] = v
    return out


def test_simulate_writes_tidy(tmp_path):
    out = tmp_path / "d.csv"
    assert main(["simulate", "--config", _write(tmp_path / "s.cfg", SIM), "--out", str(out)]) == 0
    assert out.read_text().splitlines()[0] == ",".join(TIDY_COLUMNS)
    assert read_tidy(str(out)).n == 20
    # --seed overrides the file
    out2 = tmp_path / "d2.csv"
    main(["simulate", "--config", str(tmp_path / "s.cfg"), "--out", str(out2), "--seed", "6"])
    assert out.read_text() != out2.read_text()


def test_simulate_missing_key(tmp_path, capsys):
    cfg = _write(tmp_path / "s.cfg", SIM.replace("n = 20\n", ""))
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "d.csv")]) == 2
    assert "'n'" in capsys.readouterr().err


def test_simulate_unwritable(tmp_path):
    cfg = _write(tmp_path / "s.cfg", SIM)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "missing" / "d.csv")]) == 3


def test_missing_config_is_io_error(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path / "d.csv")]) == 3


def _noise_free_file(tmp_path):
    path = tmp_path / "nf.csv"
    with open(path, "w", newline="") as fh:
        write_tidy(noise_free_dataset(), fh)
    return str(path)


def test_fit_recovers_noise_free_truth(tmp_path):
    out = tmp_path / "fit.txt"
    assert main(["fit", "--data", _noise_free_file(tmp_path), "--out", str(out)]) == 0
    rep = _report(out)
    assert rep["method"] == "np" and rep["converged"] == "true"
    got = [float(rep[k]) for k in ("gamma0", "gamma1", "rho")]
    np.testing.assert_allclose(got, TRUTH.theta, atol=1e-6)
    assert "np.float64" not in out.read_text()


def test_fit_cs_method(tmp_path):
    data = tmp_path / "d.csv"
    main(["simulate", "--config", _write(tmp_path / "s.cfg", SIM), "--out", str(data)])
    out = tmp_path / "fit.txt"
    assert main(["fit", "--data", str(data), "--method", "cs-normal", "--out", str(out)]) == 0
    rep = _report(out)
    assert rep["method"] == "cs-normal" and np.isfinite(float(rep["ase_sigma2"]))


def test_fit_corrupt_row(tmp_path, capsys):
    data = tmp_path / "d.csv"
    main(["simulate", "--config", _write(tmp_path / "s.cfg", SIM), "--out", str(data)])
    lines = data.read_text().splitlines()
    lines[3] = lines[3].replace(",", ",x", 1)
    data.write_text("\n".join(lines) + "\n")
    assert main(["fit", "--data", str(data), "--out", str(tmp_path / "f.txt")]) == 2
    assert "line 4" in capsys.readouterr().err


def test_fit_non_convergence_writes_report(tmp_path):
    cfg = _write(tmp_path / "f.cfg", "max_iter = 0\n")
    out = tmp_path / "fit.txt"
    data = tmp_path / "d.csv"
    main(["simulate", "--config", _write(tmp_path / "s.cfg", SIM), "--out", str(data)])
    assert main(["fit", "--data", str(data), "--config", cfg, "--out", str(out)]) == 4
    assert _report(out)["converged"] == "false"


def test_fit_bad_config(tmp_path):
    data = _noise_free_file(tmp_path)
    for text in ("bogus = 1\n", "rho_min = 0.5\nrho_max = 0.1\n", "tol = abc\n"):
        cfg = _write(tmp_path / "f.cfg", text)
        assert main(["fit", "--data", data, "--config", cfg, "--out", str(tmp_path / "f.txt")]) == 2


MC = SIM + "reps = 3\nmethods = np\nmaster_seed = 2\n"


def test_mc_and_workers(tmp_path, capsys):
    cfg = _write(tmp_path / "m.cfg", MC)
    a, b, md = tmp_path / "a.csv", tmp_path / "b.csv", tmp_path / "a.md"
    assert main(["mc", "--config", cfg, "--out", str(a), "--out-md", str(md)]) == 0
    assert "progress: 3/3" in capsys.readouterr().err
    assert main(["mc", "--config", cfg, "--out", str(b), "--workers", "2"]) == 0
    assert a.read_text() == b.read_text()
    assert a.read_text().splitlines()[0] == ",".join(CSV_COLUMNS)
    assert parse_summary_csv(a.read_text())[0].reps == 3
    assert md.read_text().startswith("### Normal errors")


def test_compare_runs_both_methods(tmp_path):
    cfg = _write(tmp_path / "m.cfg", MC.replace("reps = 3", "reps = 1"))
    out = tmp_path / "c.csv"
    assert main(["compare", "--config", cfg, "--out", str(out)]) == 0
    assert parse_summary_csv(out.read_text())[0].methods == ("np", "cs-normal")


@pytest.mark.parametrize("argv", [["mc", "--config", "x", "--out", "y", "--bogus"], ["frobnicate"], [],
                                  ["fit", "--data", "x", "--out", "y", "--method", "ml"],
                                  ["simulate", "--config", "x", "--out", "y", "--seed", "-1"]])
def test_usage_errors_exit_2(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_mc_bad_workers(tmp_path):
    cfg = _write(tmp_path / "m.cfg", MC)
    assert main(["mc", "--config", cfg, "--out", str(tmp_path / "a.csv"), "--workers", "0"]) == 2


def test_module_entry_point(tmp_path):
    env = dict(os.environ)
    r = subprocess.run([sys.executable, "-m", "recurgap.cli", "--help"], capture_output=True, text=True, env=env)
    assert r.returncode == 0 and "simulate" in r.stdout
