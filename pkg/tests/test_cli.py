import json

import numpy as np
import pytest

from ptcure.cli import EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_OK, main
from ptcure.config import ConfigError, load_config, parse_text

from pathlib import Path

FIXTURES = Path(__file__).parent / "fixtures"
DATA = FIXTURES / "small.csv"


def test_version(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--version"])
    assert e.value.code == 0
    assert capsys.readouterr().out.startswith("ptcure ")


def test_fit_matches_golden_output(tmp_path):
    assert main(["fit", str(DATA), "--method", "qif", "--family", "ar1", "--out", str(tmp_path)]) == EXIT_OK
    got = json.loads((tmp_path / "fit.json").read_text())
    want = json.loads((FIXTURES / "qif_ar1_fit.json").read_text())
    np.testing.assert_allclose(got["beta_hat"], want["beta_hat"], atol=1e-8, rtol=0)
    np.testing.assert_allclose(got["se"], want["se"], atol=1e-8, rtol=0)
    assert (tmp_path / "baseline.csv").exists()


def test_fit_gee_table_rows(tmp_path):
    assert main(["fit", str(DATA), "--method", "gee", "--family", "exchangeable", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "table.csv").read_text().splitlines()
    assert [l.split(",")[0] for l in lines] == ["term", "intercept", "x1", "x2", "rho", "phi"]
    assert lines[4].endswith(",")          # rho and phi carry no standard error


def test_fit_not_converged_exit_code(tmp_path):
    rc = main(["fit", str(DATA), "--outer-max-iter", "1", "--out", str(tmp_path)])
    assert rc == EXIT_NOT_CONVERGED
    assert (tmp_path / "fit.json").exists()


def test_bad_input_exit_code(tmp_path, caplog):
    bad = tmp_path / "bad.csv"
    bad.write_text("cluster,time,event,x1\n0,1.0,1,0.5\n0,-2.0,1,0.1\n")
    assert main(["fit", str(bad), "--out", str(tmp_path / "o")]) == EXIT_INPUT
    assert "bad.csv:3" in caplog.text
    assert main(["fit", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "o")]) == EXIT_INPUT


def test_bad_config_exit_code(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("outer_tol = -1\n")
    assert main(["fit", str(DATA), "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_INPUT
    cfg.write_text("no equals sign\n")
    assert main(["fit", str(DATA), "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_INPUT


def test_simulate_requires_seed(tmp_path):
    assert main(["simulate", "--out", str(tmp_path)]) == EXIT_INPUT


def test_simulate_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["simulate", "--seed", "7", "--K", "30", "--n", "4", "--cure-rate", "0.40",
                     "--out", str(tmp_path / d / "x.csv")]) == 0
    a = (tmp_path / "a" / "x.csv").read_bytes()
    assert a == (tmp_path / "b" / "x.csv").read_bytes()
    assert a == DATA.read_bytes()


def test_simulate_unknown_cure_rate(tmp_path):
    assert main(["simulate", "--seed", "1", "--cure-rate", "0.3", "--out", str(tmp_path)]) == EXIT_INPUT


def test_km_command(tmp_path):
    assert main(["km", str(DATA), "--out", str(tmp_path / "km.csv")]) == 0
    rows = (tmp_path / "km.csv").read_text().splitlines()
    assert rows[0] == "time,survival,at_risk,events" and rows[1].startswith("0.0,1.0,120,")
    surv = [float(r.split(",")[1]) for r in rows[1:]]
    assert all(b <= a for a, b in zip(surv, surv[1:]))


def test_bootstrap_command(tmp_path):
    rc = main(["bootstrap", str(DATA), "--method", "gee", "--family", "exchangeable", "--seed", "3",
               "--replicates", "4", "--threads", "1", "--times", "0.5,1.0", "--out", str(tmp_path)])
    assert rc == 0
    out = json.loads((tmp_path / "bootstrap.json").read_text())
    assert out["replicates"] == 4 and len(out["cdf_var"]) == 2


def test_study_command(tmp_path):
    rc = main(["study", "--seed", "2", "--K", "20", "--n", "3", "--replications", "2", "--threads", "1",
               "--out", str(tmp_path)])
    assert rc == 0
    assert (tmp_path / "cross_efficiency.csv").exists()


# config parsing ------------------------------------------------------------------

def test_parse_text():
    assert parse_text("a = 1  # c\n\nb=\n") == {"a": "1", "b": None}
    with pytest.raises(ConfigError, match=":2:"):
        parse_text("a=1\na=2\n")
    with pytest.raises(ConfigError, match=":1:"):
        parse_text("oops\n")


def test_load_config_json_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text("{bad")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.json")
