import os

import pytest

from chargelab import cli


def test_sigma_command(capsys):
    assert cli.main(["sigma", "--bc", "periodic", "--L", "8", "--budget", "0"]) == 0
    bc, L, value, method = capsys.readouterr().out.strip().split(",")
    assert (bc, L) == ("periodic", "8") and float(value) > 1.0 and method == "stripe"


def test_anneal_writes_candidate(tmp_path, capsys):
    out = tmp_path / "o"
    assert cli.main(["anneal", "--L", "2", "--budget", "10", "--out", str(out), "--seed", "3"]) == 0
    assert (out / "anneal_periodic_L2_s3.txt").exists()
    assert "per_area=" in capsys.readouterr().out


def test_relaxed_command(capsys):
    assert cli.main(["relaxed", "--L", "2", "--round"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("E_rel=") and "gap=" in out


def test_scaling_then_stored_studies(tmp_path, capsys):
    out = str(tmp_path)
    cli.main(["scaling", "--L", "2", "4", "8", "--budget", "0", "--out", out])
    text = capsys.readouterr().out
    assert "sigma_star=" in text
    assert os.path.exists(os.path.join(out, "scaling.csv"))
    assert os.path.exists(os.path.join(out, "candidates", "periodic_L8_s0.txt"))
    code = cli.main(["decay", "--L", "2", "4", "8", "--out", out])
    assert code in (0, 1) and os.path.exists(os.path.join(out, "decay.json"))


def test_missing_candidate_is_reported(tmp_path, capsys):
    assert cli.main(["equipartition", "--out", str(tmp_path)]) == 2
    assert "error: no stored periodic candidate" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("L = 8\nspeed = fast\n")
    assert cli.main(["sigma", "--config", str(cfg)]) == 2
    assert "bad.cfg:2: unknown key" in capsys.readouterr().err


def test_verify_quick(capsys):
    assert cli.main(["verify", "--seed", "1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(ln.startswith("PASS") for ln in lines)


def test_unknown_command_exits():
    with pytest.raises(SystemExit):
        cli.main(["explode"])
