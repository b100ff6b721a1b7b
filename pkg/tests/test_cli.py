import subprocess
import sys

import pytest

from oseen_afem.cli import main
from oseen_afem.reporting import CSV_HEADER, read_csv


def test_unknown_example_exits_with_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["run", "--example", "cavity"])
    assert info.value.code == 2
    assert "invalid choice" in capsys.readouterr().err


def test_module_entry_point_usage_error():
    proc = subprocess.run([sys.executable, "-m", "oseen_afem", "run", "--example", "nope"],
                          capture_output=True, text=True)
    assert proc.returncode == 2


def test_small_run_writes_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--example", "bubble2d", "--refinements", "2", "--out", str(out), "--svg"]) == 0
    rows = read_csv(out / "run.csv")
    assert (out / "run.csv").read_text().splitlines()[0] == CSV_HEADER
    assert len(rows) == 3
    for name in ("constants.txt", "indicators.csv", "final_mesh.svg", "certification.txt"):
        assert (out / name).stat().st_size > 0
    assert sorted(p.name for p in (out / "svg").iterdir()) == ["mesh_000.svg", "mesh_001.svg", "mesh_002.svg"]
    assert "status                   ok" in (out / "certification.txt").read_text()
    text = capsys.readouterr().out
    assert "example bubble2d" in text and "effectivity" in text


def test_lshape_uses_its_default_beta(tmp_path, capsys):
    out = tmp_path / "l"
    assert main(["run", "--example", "lshape2d", "--refinements", "1", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "beta 0.1601" in text
    assert "0.1601" in (out / "constants.txt").read_text()
    assert read_csv(out / "run.csv")[0]["err_total"] == ""


def test_overrides_and_residual_mode(tmp_path, capsys):
    out = tmp_path / "r"
    assert main(["run", "--example", "layer2d", "--refinements", "1", "--estimator", "residual",
                 "--beta", "0.3", "--theta", "2", "--out", str(out)]) == 0
    assert "beta 0.3" in capsys.readouterr().out
    assert not (out / "certification.txt").exists()


def test_thread_cap(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("AFEM_THREADS", "1")
    assert main(["run", "--example", "bubble2d", "--refinements", "0", "--out", str(tmp_path)]) == 0
    monkeypatch.setenv("AFEM_THREADS", "many")
    assert main(["run", "--example", "bubble2d", "--refinements", "0", "--out", str(tmp_path)]) == 1
    assert "AFEM_THREADS" in capsys.readouterr().err


def test_negative_refinements_is_an_error(tmp_path, capsys):
    assert main(["run", "--example", "bubble2d", "--refinements", "-1", "--out", str(tmp_path)]) == 1
    assert "oseen-afem: error:" in capsys.readouterr().err
